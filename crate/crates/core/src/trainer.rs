//! The constrained training loop: forward pass, final multiplier assembly,
//! backward/update step, adaptive penalty growth, per-iteration
//! augmentation, and the stopping/checkpoint rules for the three
//! supervision regimes (none, partial, bounding box).

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distance::DistancePenalty;
use crate::error::{CoreError, Result};
use crate::losses::{masked_cross_entropy, size_sum_penalty, SupervisionMask};
use crate::network::{backward, forward, LayerGrads, ParamStack};
use crate::ops::softmax_channels_backward;
use crate::tensor::{Real, Tensor};

/// Supervision regime of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// No labels: minimize the distance to the constraint set alone and
    /// stop once the output is feasible within tolerance.
    Feasibility,
    /// Labels plus constraints, with best-checkpoint selection among
    /// feasible iterations.
    LabelsConstraints,
    /// Like `LabelsConstraints`, but while the output is infeasible the
    /// label gradient is discarded and only the distance term drives the
    /// update.
    HardFeasibility,
}

impl TrainMode {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "feasibility" => Ok(Self::Feasibility),
            "labels+constraints" => Ok(Self::LabelsConstraints),
            "hard-feasibility" => Ok(Self::HardFeasibility),
            other => Err(CoreError::Config(format!(
                "unknown mode '{other}' (expected 'feasibility', 'labels+constraints', or 'hard-feasibility')"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Feasibility => "feasibility",
            Self::LabelsConstraints => "labels+constraints",
            Self::HardFeasibility => "hard-feasibility",
        }
    }
}

/// The output-side penalty the trainer optimizes alongside the labels.
#[derive(Debug, Clone)]
pub enum OutputPenalty {
    /// Projection-based squared distance penalties; the trainer's alpha
    /// multiplies every term and grows per the adaptive rule.
    Distance(DistancePenalty),
    /// The sum-of-output baseline with a fixed weight; alpha stays frozen
    /// so the baseline matches its usual fixed-lambda form.
    SizeSum {
        channel: usize,
        a1: Real,
        a2: Real,
        lambda: Real,
    },
}

impl OutputPenalty {
    /// Penalty gradient with respect to the output probabilities,
    /// pre-multiplied by the trainer's alpha where the rule applies.
    fn grad(&self, probs: &Tensor, alpha: Real) -> Result<Tensor> {
        match self {
            Self::Distance(p) => {
                let (_, g) = p.value_and_grad(probs)?;
                Ok(g.scale(alpha))
            }
            Self::SizeSum {
                channel,
                a1,
                a2,
                lambda,
            } => {
                let (_, g) = size_sum_penalty(probs.channel(*channel), *a1, *a2, *lambda);
                let mut out = Tensor::zeros(probs.shape().to_vec());
                out.channel_mut(*channel).copy_from_slice(&g);
                Ok(out)
            }
        }
    }

    /// The series the stopping rule and the alpha rule watch: the
    /// unweighted squared distance for projection penalties, the raw
    /// violation value for the baseline.
    pub fn feasibility_sq(&self, probs: &Tensor) -> Result<Real> {
        match self {
            Self::Distance(p) => p.feasibility_sq(probs),
            Self::SizeSum {
                channel, a1, a2, ..
            } => Ok(size_sum_penalty(probs.channel(*channel), *a1, *a2, 1.0).0),
        }
    }

    fn alpha_rule_active(&self) -> bool {
        matches!(self, Self::Distance(_))
    }
}

/// Hyperparameters and mode flags for one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Initial penalty weight.
    pub alpha0: Real,
    /// Penalty growth factor (> 1).
    pub eta: Real,
    /// History window the growth rule compares against.
    pub window: usize,
    /// Feasibility tolerance: the output counts as feasible when the
    /// squared distance falls to `epsilon^2`.
    pub epsilon: Real,
    /// Learning rate.
    pub gamma: Real,
    pub max_iters: usize,
    pub seed: u64,
    pub augment: bool,
    /// Class whose labels are re-subsampled each iteration (used for the
    /// dense outside-box background labels), if any.
    pub subsample_class: Option<usize>,
    pub subsample_fraction: Real,
    /// Keep the best feasible checkpoint by validation loss.
    pub checkpoint_best: bool,
    /// Grow alpha when the distance fails to *decrease* below the window
    /// max (plateau-inclusive variant) instead of only when it strictly
    /// exceeds it.
    pub plateau_growth: bool,
    /// Fraction of annotated pixels held out as the validation signal.
    pub validation_fraction: Real,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Feasibility,
            alpha0: 1.0,
            eta: 1.5,
            window: 10,
            epsilon: 1e-3,
            gamma: 0.05,
            max_iters: 500,
            seed: 0,
            augment: true,
            subsample_class: None,
            subsample_fraction: 0.1,
            checkpoint_best: true,
            plateau_growth: false,
            validation_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 1.0) {
            return Err(CoreError::Config(format!("eta must be > 1, got {}", self.eta)));
        }
        if self.window < 1 {
            return Err(CoreError::Config("window must be >= 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(CoreError::Config(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(self.gamma > 0.0) {
            return Err(CoreError::Config(format!(
                "gamma must be > 0, got {}",
                self.gamma
            )));
        }
        if !(self.alpha0 > 0.0) {
            return Err(CoreError::Config(format!(
                "alpha0 must be > 0, got {}",
                self.alpha0
            )));
        }
        if self.max_iters < 1 {
            return Err(CoreError::Config("max_iters must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.subsample_fraction) {
            return Err(CoreError::Config(format!(
                "subsample fraction must be in [0, 1], got {}",
                self.subsample_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(CoreError::Config(format!(
                "validation fraction must be in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

/// Best feasible checkpoint seen during a labeled run.
#[derive(Debug, Clone)]
pub struct BestCheckpoint {
    pub params: ParamStack,
    pub iteration: usize,
    pub val_loss: Real,
    pub dist: Real,
}

/// Everything a finished run reports.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: ParamStack,
    pub best: Option<BestCheckpoint>,
    /// Squared distance to the constraint set per iteration (computed on
    /// the de-augmented output).
    pub dist_history: Vec<Real>,
    /// Training label loss per iteration (zero when no labels).
    pub loss_history: Vec<Real>,
    /// Alpha after each iteration's penalty update.
    pub alpha_history: Vec<Real>,
    /// Held-out validation loss per iteration (empty when no validation).
    pub val_history: Vec<Real>,
    /// Whether the label gradient contributed to each iteration's update.
    pub label_grad_used: Vec<bool>,
    pub feasible: bool,
    pub iterations_run: usize,
    pub iter_seconds: Vec<f64>,
}

/// The adaptive penalty rule: multiply alpha by eta when the current
/// distance exceeds the maximum of the previous `m` distances. Inactive
/// until `m` previous values exist. `plateau` switches to the
/// plateau-inclusive reading (grow when the distance fails to drop below
/// the window max).
pub fn update_alpha(
    history: &[Real],
    d_i: Real,
    alpha: Real,
    eta: Real,
    m: usize,
    plateau: bool,
) -> Real {
    if history.len() < m {
        return alpha;
    }
    let window_max = history[history.len() - m..]
        .iter()
        .fold(Real::NEG_INFINITY, |acc, &v| acc.max(v));
    let grow = if plateau {
        d_i >= window_max
    } else {
        d_i > window_max
    };
    if grow {
        alpha * eta
    } else {
        alpha
    }
}

/// Spatial transform sampled for one iteration: optional horizontal flip,
/// vertical flip, and (square inputs only) transposition, applied in that
/// order. All three are involutions, so the inverse applies them in
/// reverse order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpatialMap {
    pub hflip: bool,
    pub vflip: bool,
    pub transpose: bool,
    pub h: usize,
    pub w: usize,
}

impl SpatialMap {
    pub fn identity(h: usize, w: usize) -> Self {
        Self {
            hflip: false,
            vflip: false,
            transpose: false,
            h,
            w,
        }
    }

    /// Map an original pixel index to its augmented position.
    pub fn apply_pixel(&self, pixel: usize) -> usize {
        let (mut r, mut c) = (pixel / self.w, pixel % self.w);
        if self.hflip {
            c = self.w - 1 - c;
        }
        if self.vflip {
            r = self.h - 1 - r;
        }
        if self.transpose {
            std::mem::swap(&mut r, &mut c);
        }
        r * self.out_width() + c
    }

    fn out_width(&self) -> usize {
        if self.transpose {
            self.h
        } else {
            self.w
        }
    }

    /// Apply the transform to every channel of a `[c, h, w]` tensor.
    pub fn apply_tensor(&self, t: &Tensor) -> Tensor {
        let (c, h, w) = t.chw().expect("spatial map needs [c, h, w]");
        assert_eq!((h, w), (self.h, self.w), "map built for another geometry");
        let (oh, ow) = if self.transpose { (w, h) } else { (h, w) };
        let mut out = Tensor::zeros(vec![c, oh, ow]);
        for ch in 0..c {
            let src = t.channel(ch);
            let dst = out.channel_mut(ch);
            for p in 0..h * w {
                dst[self.apply_pixel(p)] = src[p];
            }
        }
        out
    }

    /// Undo the transform (inverse spatial map).
    pub fn invert_tensor(&self, t: &Tensor) -> Tensor {
        let (c, th, tw) = t.chw().expect("spatial map needs [c, h, w]");
        let (oh, ow) = if self.transpose { (self.w, self.h) } else { (self.h, self.w) };
        assert_eq!((th, tw), (oh, ow), "map built for another geometry");
        let mut out = Tensor::zeros(vec![c, self.h, self.w]);
        for ch in 0..c {
            let src = t.channel(ch);
            let dst = out.channel_mut(ch);
            for p in 0..self.h * self.w {
                dst[p] = src[self.apply_pixel(p)];
            }
        }
        out
    }
}

/// The augmented view of one iteration.
#[derive(Debug, Clone)]
pub struct AugmentOutcome {
    pub data: Tensor,
    pub mask: SupervisionMask,
    pub map: SpatialMap,
}

/// Randomly flip/transpose the data, remap the annotations accordingly, and
/// re-subsample the configured label class. Transposition is skipped (with
/// a log notice) for non-square inputs.
pub fn augment(
    data: &Tensor,
    mask: &SupervisionMask,
    subsample_class: Option<usize>,
    subsample_fraction: Real,
    rng: &mut impl Rng,
) -> AugmentOutcome {
    let (_, h, w) = data.chw().expect("augment needs [c, h, w] data");
    let hflip = rng.gen::<bool>();
    let vflip = rng.gen::<bool>();
    let transpose = if h == w {
        rng.gen::<bool>()
    } else {
        log::debug!("skipping transposition for non-square {h}x{w} input");
        false
    };
    let map = SpatialMap {
        hflip,
        vflip,
        transpose,
        h,
        w,
    };
    let data = map.apply_tensor(data);
    let mut entries = Vec::with_capacity(mask.len());
    for &(pixel, class) in mask.entries() {
        if Some(class) == subsample_class && !(rng.gen::<Real>() < subsample_fraction) {
            continue;
        }
        entries.push((map.apply_pixel(pixel), class));
    }
    let mask = SupervisionMask::new(entries, h * w, usize::MAX)
        .expect("remapped entries stay in range");
    AugmentOutcome { data, mask, map }
}

/// Assemble the final multiplier at the logits: gradient of the label loss
/// plus `alpha` times the penalty gradient, both taken with respect to the
/// probabilities and chained through the softmax. With an empty mask the
/// label term is absent and the multiplier reduces to the pure feasibility
/// seed.
pub fn assemble_final_multiplier(
    probs: &Tensor,
    mask: Option<&SupervisionMask>,
    penalty: &OutputPenalty,
    alpha: Real,
) -> Result<Tensor> {
    let mut g_probs = penalty.grad(probs, alpha)?;
    if let Some(mask) = mask.filter(|m| !m.is_empty()) {
        let (_, ce_grad) = masked_cross_entropy(probs, mask)?;
        g_probs.axpy(1.0, &ce_grad);
    }
    Ok(softmax_channels_backward(probs, &g_probs))
}

/// Run the training loop. `mask` must be `None`/empty in feasibility mode
/// and nonempty in the labeled modes.
pub fn train(
    params0: ParamStack,
    data: &Tensor,
    mask: Option<&SupervisionMask>,
    penalty: &OutputPenalty,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    cfg.validate()?;
    params0.validate()?;
    let (_, h, w) = data.chw()?;
    if let OutputPenalty::Distance(p) = penalty {
        p.validate(h, w, params0.n_class)?;
    }
    let has_labels = mask.map_or(false, |m| !m.is_empty());
    match cfg.mode {
        TrainMode::Feasibility if has_labels => {
            return Err(CoreError::Config(
                "feasibility mode runs without labels; drop the mask or switch modes".into(),
            ))
        }
        TrainMode::LabelsConstraints | TrainMode::HardFeasibility if !has_labels => {
            return Err(CoreError::Config(format!(
                "{} mode needs a nonempty supervision mask",
                cfg.mode.name()
            )))
        }
        _ => {}
    }

    // Split off the held-out validation pixels once, at run start.
    let full_mask = mask.cloned().unwrap_or_else(SupervisionMask::empty);
    let (train_mask, val_mask) = if has_labels && cfg.validation_fraction > 0.0 {
        split_validation(&full_mask, cfg.validation_fraction, cfg.seed, h * w)
    } else {
        (full_mask.clone(), SupervisionMask::empty())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = params0;
    let mut alpha = cfg.alpha0;
    let eps_sq = cfg.epsilon * cfg.epsilon;

    let mut dist_history: Vec<Real> = Vec::new();
    let mut loss_history: Vec<Real> = Vec::new();
    let mut alpha_history: Vec<Real> = Vec::new();
    let mut val_history: Vec<Real> = Vec::new();
    let mut label_grad_used: Vec<bool> = Vec::new();
    let mut iter_seconds: Vec<f64> = Vec::new();
    let mut best: Option<BestCheckpoint> = None;
    let mut feasible = false;

    for iteration in 1..=cfg.max_iters {
        let t0 = Instant::now();
        let view = if cfg.augment {
            augment(
                data,
                &train_mask,
                cfg.subsample_class,
                cfg.subsample_fraction,
                &mut rng,
            )
        } else {
            AugmentOutcome {
                data: data.clone(),
                mask: train_mask.clone(),
                map: SpatialMap::identity(h, w),
            }
        };

        let fwd = forward(&params, &view.data)?;
        // The feasibility series is measured on the de-augmented output so
        // it is comparable across iterations.
        let probs_orig = view.map.invert_tensor(&fwd.probs);
        let d_i = penalty.feasibility_sq(&probs_orig)?;
        let loss_i = if !view.mask.is_empty() {
            masked_cross_entropy(&fwd.probs, &view.mask)?.0
        } else {
            0.0
        };
        if !d_i.is_finite() || !loss_i.is_finite() {
            return Err(CoreError::Diverged {
                iteration,
                what: format!("d_i = {d_i}, loss = {loss_i}"),
            });
        }
        let val_i = if !val_mask.is_empty() {
            masked_cross_entropy(&probs_orig, &val_mask)?.0
        } else {
            Real::NAN
        };
        let feasible_now = d_i <= eps_sq;

        if cfg.mode == TrainMode::Feasibility && feasible_now {
            dist_history.push(d_i);
            loss_history.push(loss_i);
            alpha_history.push(alpha);
            if !val_mask.is_empty() {
                val_history.push(val_i);
            }
            label_grad_used.push(false);
            iter_seconds.push(t0.elapsed().as_secs_f64());
            feasible = true;
            break;
        }

        // The snapshot keeps the parameters that produced this feasible,
        // lowest-validation output, so it happens before the update.
        if cfg.checkpoint_best
            && !val_mask.is_empty()
            && feasible_now
            && best.as_ref().map_or(true, |b| val_i < b.val_loss)
        {
            best = Some(BestCheckpoint {
                params: params.clone(),
                iteration,
                val_loss: val_i,
                dist: d_i,
            });
        }

        // Hard feasibility: while infeasible, only the distance term drives
        // the update.
        let use_labels = !view.mask.is_empty()
            && !(cfg.mode == TrainMode::HardFeasibility && !feasible_now);
        let label_view = if use_labels { Some(&view.mask) } else { None };
        let p_logits = assemble_final_multiplier(&fwd.probs, label_view, penalty, alpha)?;
        let grads = backward(&params, &fwd.trajectory, &p_logits)?;
        if !grads.all_finite() {
            return Err(CoreError::Diverged {
                iteration,
                what: "non-finite parameter gradient".into(),
            });
        }
        params.sgd_step(&grads, cfg.gamma);

        if penalty.alpha_rule_active() {
            alpha = update_alpha(&dist_history, d_i, alpha, cfg.eta, cfg.window, cfg.plateau_growth);
        }

        dist_history.push(d_i);
        loss_history.push(loss_i);
        alpha_history.push(alpha);
        if !val_mask.is_empty() {
            val_history.push(val_i);
        }
        label_grad_used.push(use_labels);
        iter_seconds.push(t0.elapsed().as_secs_f64());
        feasible = feasible_now;
    }

    let iterations_run = dist_history.len();
    Ok(TrainResult {
        params,
        best,
        dist_history,
        loss_history,
        alpha_history,
        val_history,
        label_grad_used,
        feasible,
        iterations_run,
        iter_seconds,
    })
}

// Hold out a fixed random fraction of the annotated pixels as the
// validation signal for checkpoint selection.
fn split_validation(
    mask: &SupervisionMask,
    fraction: Real,
    seed: u64,
    n_pixels: usize,
) -> (SupervisionMask, SupervisionMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x76a1_55e7_c0ff_ee00);
    let mut order: Vec<usize> = (0..mask.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_val = ((mask.len() as Real) * fraction).ceil() as usize;
    let n_val = n_val.min(mask.len().saturating_sub(1));
    let mut val = Vec::with_capacity(n_val);
    let mut train = Vec::with_capacity(mask.len() - n_val);
    for (rank, &idx) in order.iter().enumerate() {
        if rank < n_val {
            val.push(mask.entries()[idx]);
        } else {
            train.push(mask.entries()[idx]);
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    (
        SupervisionMask::new(train, n_pixels, usize::MAX).expect("subset stays valid"),
        SupervisionMask::new(val, n_pixels, usize::MAX).expect("subset stays valid"),
    )
}

/// Write the run histories as CSV with a versioned header comment.
pub fn write_history_csv(path: &Path, result: &TrainResult) -> Result<()> {
    let mut out = String::from("# setseg history v1: iteration,distance,loss,alpha\n");
    for i in 0..result.iterations_run {
        out.push_str(&format!(
            "{},{},{},{}\n",
            i + 1,
            result.dist_history[i],
            result.loss_history[i],
            result.alpha_history[i]
        ));
    }
    fs::write(path, out)?;
    Ok(())
}
