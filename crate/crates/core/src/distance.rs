//! Squared point-to-set distance penalties.
//!
//! The squared distance from a point to a set, `0.5 * ||P(y) - y||^2`, is
//! built from the set's projection alone and is differentiable with gradient
//! `y - P(y)`. The functional form never changes with the constraint, so
//! swapping constraints means swapping projections and nothing else.

use crate::error::{CoreError, Result};
use crate::projections::{
    project_intersection, ConstraintSet, INTERSECTION_DEFAULT_SWEEPS, INTERSECTION_DEFAULT_TOL,
};
use crate::tensor::{Real, Tensor};

/// How multiple constraint sets combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltyMode {
    /// One weighted squared-distance term per set.
    SumOfDistances,
    /// A single squared distance to the intersection of the sets binding
    /// each channel, evaluated through the intersection projection.
    SingleIntersection,
}

/// A weighted collection of constraint sets with a combination mode.
#[derive(Debug, Clone)]
pub struct DistancePenalty {
    terms: Vec<(ConstraintSet, Real)>,
    mode: PenaltyMode,
}

impl DistancePenalty {
    pub fn new(terms: Vec<(ConstraintSet, Real)>, mode: PenaltyMode) -> Result<Self> {
        if terms.is_empty() {
            return Err(CoreError::Argument("penalty needs at least one set".into()));
        }
        for (set, weight) in &terms {
            if !(*weight > 0.0) {
                return Err(CoreError::Argument(format!(
                    "penalty weight must be positive, got {weight} for {}",
                    set.describe()
                )));
            }
        }
        if mode == PenaltyMode::SingleIntersection {
            // A single distance to an intersection carries one scale; demand
            // equal weights within each channel group so that scale is
            // unambiguous.
            for (set, weight) in &terms {
                let ch = set.channel();
                for (other, w2) in &terms {
                    if other.channel() == ch && w2 != weight {
                        return Err(CoreError::Argument(
                            "single-intersection mode requires equal weights per channel".into(),
                        ));
                    }
                }
            }
        }
        Ok(Self { terms, mode })
    }

    pub fn uniform(sets: Vec<ConstraintSet>, mode: PenaltyMode) -> Result<Self> {
        Self::new(sets.into_iter().map(|s| (s, 1.0)).collect(), mode)
    }

    pub fn terms(&self) -> &[(ConstraintSet, Real)] {
        &self.terms
    }

    pub fn mode(&self) -> PenaltyMode {
        self.mode
    }

    pub fn validate(&self, h: usize, w: usize, n_class: usize) -> Result<()> {
        for (set, _) in &self.terms {
            set.validate(h, w, n_class)?;
        }
        Ok(())
    }

    /// Weighted penalty value and its gradient with respect to the output
    /// probabilities. In sum mode this is `sum_i alpha_i * d_i^2(y)` with the
    /// per-set gradients accumulated into the bound channels; in
    /// single-intersection mode the sets binding each channel are projected
    /// onto jointly.
    pub fn value_and_grad(&self, probs: &Tensor) -> Result<(Real, Tensor)> {
        let (_, h, w) = probs.chw()?;
        let mut value = 0.0;
        let mut grad = Tensor::zeros(probs.shape().to_vec());
        match self.mode {
            PenaltyMode::SumOfDistances => {
                for (set, weight) in &self.terms {
                    let field = probs.channel(set.channel());
                    let projected = set.project_field(field, h, w)?;
                    let gch = grad.channel_mut(set.channel());
                    for i in 0..field.len() {
                        let r = field[i] - projected[i];
                        value += 0.5 * weight * r * r;
                        gch[i] += weight * r;
                    }
                }
            }
            PenaltyMode::SingleIntersection => {
                for (channel, group, weight) in self.channel_groups() {
                    let field = probs.channel(channel);
                    let projected = self.project_group(&group, field, h, w)?;
                    let gch = grad.channel_mut(channel);
                    for i in 0..field.len() {
                        let r = field[i] - projected[i];
                        value += 0.5 * weight * r * r;
                        gch[i] += weight * r;
                    }
                }
            }
        }
        Ok((value, grad))
    }

    /// Unweighted squared distance `||y - P(y)||^2` summed over the
    /// constraint structure; this is the feasibility series the trainer
    /// logs and thresholds against `epsilon^2`.
    pub fn feasibility_sq(&self, probs: &Tensor) -> Result<Real> {
        let (_, h, w) = probs.chw()?;
        let mut total = 0.0;
        match self.mode {
            PenaltyMode::SumOfDistances => {
                for (set, _) in &self.terms {
                    let field = probs.channel(set.channel());
                    let projected = set.project_field(field, h, w)?;
                    total += dist_sq(field, &projected);
                }
            }
            PenaltyMode::SingleIntersection => {
                for (channel, group, _) in self.channel_groups() {
                    let field = probs.channel(channel);
                    let projected = self.project_group(&group, field, h, w)?;
                    total += dist_sq(field, &projected);
                }
            }
        }
        Ok(total)
    }

    // Sets grouped by bound channel, in first-appearance order.
    fn channel_groups(&self) -> Vec<(usize, Vec<ConstraintSet>, Real)> {
        let mut groups: Vec<(usize, Vec<ConstraintSet>, Real)> = Vec::new();
        for (set, weight) in &self.terms {
            let ch = set.channel();
            match groups.iter_mut().find(|(c, _, _)| *c == ch) {
                Some((_, members, _)) => members.push(set.clone()),
                None => groups.push((ch, vec![set.clone()], *weight)),
            }
        }
        groups
    }

    fn project_group(
        &self,
        group: &[ConstraintSet],
        field: &[Real],
        h: usize,
        w: usize,
    ) -> Result<Vec<Real>> {
        if group.len() == 1 {
            group[0].project_field(field, h, w)
        } else {
            let res = project_intersection(
                field,
                group,
                h,
                w,
                INTERSECTION_DEFAULT_SWEEPS,
                INTERSECTION_DEFAULT_TOL,
            )?;
            if !res.converged {
                log::warn!("intersection projection stopped before tolerance");
            }
            Ok(res.point)
        }
    }
}

fn dist_sq(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b.iter()).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Squared distance `0.5 * ||P(y) - y||^2` of a channel field to one set.
pub fn distance_sq(field: &[Real], set: &ConstraintSet, h: usize, w: usize) -> Result<Real> {
    let projected = set.project_field(field, h, w)?;
    Ok(0.5 * dist_sq(field, &projected))
}

/// Gradient of [`distance_sq`]: `y - P(y)`. Exactly zero on feasible
/// points. At projection ties (where the nearest point is not unique) this
/// returns the direction toward the deterministically selected projection.
pub fn distance_grad(field: &[Real], set: &ConstraintSet, h: usize, w: usize) -> Result<Vec<Real>> {
    let projected = set.project_field(field, h, w)?;
    Ok(field
        .iter()
        .zip(projected.iter())
        .map(|(&y, &p)| y - p)
        .collect())
}
