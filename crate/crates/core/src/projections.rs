//! Euclidean projections onto the supported constraint sets, plus a
//! combinator for intersections.
//!
//! Every set description carries the output channel it binds to; the
//! projection itself acts on the flattened spatial field of that channel.
//! Tie-breaking is a total order everywhere (lowest index wins) so repeated
//! runs are bit-identical.

use nalgebra::DMatrix;

use crate::error::{CoreError, Result};
use crate::tensor::Real;

/// Declarative description of one constraint on the network output.
#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintSet {
    /// At most `max_count` nonzero entries in the channel.
    Cardinality { channel: usize, max_count: usize },
    /// Channel l1 norm at most `radius`.
    L1Ball { channel: usize, radius: Real },
    /// Channel, viewed as an `h x w` matrix, has rank at most `rank`.
    MaxRank { channel: usize, rank: usize },
    /// All member sets at once. Members must bind the same channel.
    Intersection(Vec<ConstraintSet>),
}

// Caps for the projection-onto-intersection solver when it runs implicitly
// inside distance evaluations.
pub const INTERSECTION_DEFAULT_SWEEPS: usize = 200;
pub const INTERSECTION_DEFAULT_TOL: Real = 1e-12;

impl ConstraintSet {
    /// The output channel this constraint binds to.
    pub fn channel(&self) -> usize {
        match self {
            Self::Cardinality { channel, .. }
            | Self::L1Ball { channel, .. }
            | Self::MaxRank { channel, .. } => *channel,
            Self::Intersection(sets) => sets.first().map_or(0, |s| s.channel()),
        }
    }

    /// Whether the set is convex (drives Dykstra vs. plain cyclic
    /// projection inside intersections).
    pub fn is_convex(&self) -> bool {
        match self {
            Self::L1Ball { .. } => true,
            Self::Cardinality { .. } | Self::MaxRank { .. } => false,
            Self::Intersection(sets) => sets.iter().all(|s| s.is_convex()),
        }
    }

    /// Validate bounds against the spatial geometry of the bound channel.
    pub fn validate(&self, h: usize, w: usize, n_class: usize) -> Result<()> {
        let n = h * w;
        match self {
            Self::Cardinality { channel, max_count } => {
                check_channel(*channel, n_class)?;
                if *max_count > n {
                    return Err(CoreError::Argument(format!(
                        "cardinality bound {max_count} exceeds pixel count {n}"
                    )));
                }
            }
            Self::L1Ball { channel, radius } => {
                check_channel(*channel, n_class)?;
                if !(*radius >= 0.0) {
                    return Err(CoreError::Argument(format!(
                        "l1 radius must be >= 0, got {radius}"
                    )));
                }
            }
            Self::MaxRank { channel, rank } => {
                check_channel(*channel, n_class)?;
                if *rank < 1 || *rank > h.min(w) {
                    return Err(CoreError::Argument(format!(
                        "rank bound {rank} outside 1..={}",
                        h.min(w)
                    )));
                }
            }
            Self::Intersection(sets) => {
                if sets.is_empty() {
                    return Err(CoreError::Argument("empty intersection".into()));
                }
                let ch = sets[0].channel();
                for s in sets {
                    if s.channel() != ch {
                        return Err(CoreError::Argument(
                            "intersection members must bind the same channel".into(),
                        ));
                    }
                    s.validate(h, w, n_class)?;
                }
            }
        }
        Ok(())
    }

    /// Project a flattened spatial field of the bound channel onto the set.
    pub fn project_field(&self, field: &[Real], h: usize, w: usize) -> Result<Vec<Real>> {
        match self {
            Self::Cardinality { max_count, .. } => project_cardinality(field, *max_count),
            Self::L1Ball { radius, .. } => project_l1_ball(field, *radius),
            Self::MaxRank { rank, .. } => project_rank(field, h, w, *rank),
            Self::Intersection(sets) => {
                let res = project_intersection(
                    field,
                    sets,
                    h,
                    w,
                    INTERSECTION_DEFAULT_SWEEPS,
                    INTERSECTION_DEFAULT_TOL,
                )?;
                if !res.converged {
                    log::warn!(
                        "intersection projection did not converge in {} sweeps",
                        INTERSECTION_DEFAULT_SWEEPS
                    );
                }
                Ok(res.point)
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Self::Cardinality { channel, max_count } => {
                format!("cardinality(channel={channel}, max_count={max_count})")
            }
            Self::L1Ball { channel, radius } => {
                format!("l1_ball(channel={channel}, radius={radius})")
            }
            Self::MaxRank { channel, rank } => {
                format!("max_rank(channel={channel}, rank={rank})")
            }
            Self::Intersection(sets) => {
                let inner: Vec<String> = sets.iter().map(|s| s.describe()).collect();
                format!("intersection[{}]", inner.join(", "))
            }
        }
    }
}

fn check_channel(channel: usize, n_class: usize) -> Result<()> {
    if channel >= n_class {
        return Err(CoreError::Argument(format!(
            "constraint channel {channel} out of range (n_class = {n_class})"
        )));
    }
    Ok(())
}

/// Lower and upper area fractions for the first class of a two-class
/// segmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FractionBounds {
    a1: Real,
    a2: Real,
}

impl FractionBounds {
    pub fn new(a1: Real, a2: Real) -> Result<Self> {
        if !(0.0..=1.0).contains(&a1) || !(0.0..=1.0).contains(&a2) || a1 > a2 {
            return Err(CoreError::Argument(format!(
                "need 0 <= a1 <= a2 <= 1, got a1={a1}, a2={a2}"
            )));
        }
        Ok(Self { a1, a2 })
    }

    pub fn a1(&self) -> Real {
        self.a1
    }

    pub fn a2(&self) -> Real {
        self.a2
    }
}

/// Translate area-fraction bounds into per-channel cardinality bounds for a
/// two-class output. Because the softmax output sums to one per pixel, a
/// lower bound on one class is an upper bound on the other, so only upper
/// bounds are needed: `card(channel 0) <= floor(a2 * n)` and
/// `card(channel 1) <= floor((1 - a1) * n)`. Floor keeps the counts
/// conservative.
pub fn fraction_bounds_to_cardinality(b: &FractionBounds, n_pixels: usize) -> Vec<ConstraintSet> {
    let n = n_pixels as Real;
    vec![
        ConstraintSet::Cardinality {
            channel: 0,
            max_count: (b.a2 * n).floor() as usize,
        },
        ConstraintSet::Cardinality {
            channel: 1,
            max_count: ((1.0 - b.a1) * n).floor() as usize,
        },
    ]
}

/// Euclidean projection onto `{x : card(x) <= k}`: keep the `k` entries of
/// largest magnitude in place, zero the rest. Magnitude ties are broken by
/// keeping the lowest index.
pub fn project_cardinality(v: &[Real], k: usize) -> Result<Vec<Real>> {
    if k > v.len() {
        return Err(CoreError::Argument(format!(
            "cardinality bound {k} exceeds vector length {}",
            v.len()
        )));
    }
    if k == v.len() {
        return Ok(v.to_vec());
    }
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
    let mut out = vec![0.0; v.len()];
    for &i in order.iter().take(k) {
        out[i] = v[i];
    }
    Ok(out)
}

/// Euclidean projection onto the l1 ball of the given radius, via the
/// sorted-cumulative-sum threshold rule.
pub fn project_l1_ball(v: &[Real], radius: Real) -> Result<Vec<Real>> {
    if !(radius >= 0.0) {
        return Err(CoreError::Argument(format!(
            "l1 radius must be >= 0, got {radius}"
        )));
    }
    let l1: Real = v.iter().map(|x| x.abs()).sum();
    if l1 <= radius {
        return Ok(v.to_vec());
    }
    let mut mags: Vec<Real> = v.iter().map(|x| x.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (j, &u) in mags.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - radius) / (j + 1) as Real;
        if u - candidate > 0.0 {
            theta = candidate;
        } else {
            break;
        }
    }
    Ok(v.iter()
        .map(|&x| x.signum() * (x.abs() - theta).max(0.0))
        .collect())
}

/// Euclidean (Frobenius) projection of an `h x w` field onto the matrices
/// of rank at most `k`: truncated SVD. Singular-value ties keep the earlier
/// indices of the decomposition.
pub fn project_rank(field: &[Real], h: usize, w: usize, k: usize) -> Result<Vec<Real>> {
    if field.len() != h * w {
        return Err(CoreError::Shape(format!(
            "field length {} does not match {h}x{w}",
            field.len()
        )));
    }
    if k < 1 || k > h.min(w) {
        return Err(CoreError::Argument(format!(
            "rank bound {k} outside 1..={}",
            h.min(w)
        )));
    }
    let m = DMatrix::from_row_slice(h, w, field);
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd requested u");
    let vt = svd.v_t.expect("svd requested v_t");
    let mut sv: Vec<(usize, Real)> = svd
        .singular_values
        .iter()
        .copied()
        .enumerate()
        .collect();
    sv.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut truncated = nalgebra::DVector::zeros(svd.singular_values.len());
    for &(idx, s) in sv.iter().take(k) {
        truncated[idx] = s;
    }
    let rebuilt = &u * DMatrix::from_diagonal(&truncated) * &vt;
    Ok(rebuilt.transpose().as_slice().to_vec())
}

/// Result of projecting onto an intersection of sets.
#[derive(Debug, Clone)]
pub struct IntersectionResult {
    pub point: Vec<Real>,
    pub converged: bool,
    pub sweeps: usize,
}

/// Approximate projection onto the intersection of several sets. Uses
/// Dykstra's corrections when every member set is convex (the iterates then
/// converge to the exact projection); otherwise falls back to plain cyclic
/// projection, which finds a point of the intersection but makes no
/// nearest-point claim. Non-convergence is reported through the flag, not
/// as an error.
pub fn project_intersection(
    v: &[Real],
    sets: &[ConstraintSet],
    h: usize,
    w: usize,
    max_sweeps: usize,
    tol: Real,
) -> Result<IntersectionResult> {
    if sets.is_empty() {
        return Err(CoreError::Argument(
            "intersection projection needs at least one set".into(),
        ));
    }
    if sets.len() == 1 {
        return Ok(IntersectionResult {
            point: sets[0].project_field(v, h, w)?,
            converged: true,
            sweeps: 1,
        });
    }
    let dykstra = sets.iter().all(|s| s.is_convex());
    let n = v.len();
    let mut x = v.to_vec();
    let mut increments = vec![vec![0.0 as Real; n]; if dykstra { sets.len() } else { 0 }];
    let mut converged = false;
    let mut sweeps = 0;
    for sweep in 1..=max_sweeps {
        sweeps = sweep;
        let x_before = x.clone();
        for (s, set) in sets.iter().enumerate() {
            if dykstra {
                let shifted: Vec<Real> = x
                    .iter()
                    .zip(increments[s].iter())
                    .map(|(&a, &b)| a + b)
                    .collect();
                let projected = set.project_field(&shifted, h, w)?;
                for i in 0..n {
                    increments[s][i] = shifted[i] - projected[i];
                }
                x = projected;
            } else {
                x = set.project_field(&x, h, w)?;
            }
        }
        let moved: Real = x
            .iter()
            .zip(x_before.iter())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<Real>()
            .sqrt();
        if moved < tol {
            converged = true;
            break;
        }
    }
    Ok(IntersectionResult {
        point: x,
        converged,
        sweeps,
    })
}
