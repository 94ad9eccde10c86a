//! Residual and reversible hyperbolic segmentation networks.
//!
//! Both architectures share a learned 1x1 opening convolution that lifts the
//! input channels to the network width, a stack of convolutional layers, and
//! a closing stage that slices the first `n_class` channels as logits and
//! applies the channel softmax.
//!
//! The residual recursion is `y_j = y_{j-1} - f(K_j y_{j-1})` and stores all
//! states for the backward pass. The hyperbolic recursion is
//! `y_j = 2 y_{j-1} - y_{j-2} - h^2 K_j^T f(K_j y_{j-1})` with
//! `y_1 = y_2 = opened input`; it is reversible, so the backward pass keeps
//! only the last two states and recomputes earlier ones by inverting each
//! step.
//!
//! The backward pass propagates the adjoint state of the training
//! Lagrangian layer by layer. For the residual network the multiplier
//! recursion is `p_{j-1} = p_j - K_j^T (f'(K_j y_{j-1}) .* p_j)`; the
//! two-step recursion of the hyperbolic network makes every state feed the
//! two following ones, and its multiplier recursion is derived from that
//! dependency structure. Both are validated against central finite
//! differences of the composite objective.

use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::error::{CoreError, Result};
use crate::ops::{
    activation, activation_deriv, conv2d, conv2d_kernel_grad, conv2d_transpose, softmax_channels,
    Activation,
};
use crate::tensor::{read_tensor, write_tensor, KernelBank, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Resnet,
    Hyperbolic,
}

impl Arch {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "resnet" => Ok(Self::Resnet),
            "hyperbolic" => Ok(Self::Hyperbolic),
            other => Err(CoreError::Config(format!(
                "unknown architecture '{other}' (expected 'resnet' or 'hyperbolic')"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Resnet => "resnet",
            Self::Hyperbolic => "hyperbolic",
        }
    }
}

/// All learnable parameters plus the architecture metadata.
#[derive(Debug, Clone)]
pub struct ParamStack {
    pub arch: Arch,
    /// 1x1 convolution lifting the input channels to the network width.
    pub opening: KernelBank,
    pub layers: Vec<KernelBank>,
    /// Time step of the hyperbolic recursion (unused by the residual net).
    pub h: Real,
    pub activation: Activation,
    pub n_class: usize,
}

impl ParamStack {
    /// Seeded initialization: zero-mean uniform entries scaled by
    /// 1/sqrt(fan-in). `flat_out` selects a "flat" block shape
    /// (out < width) for the hyperbolic layers.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        arch: Arch,
        in_channels: usize,
        width: usize,
        n_layers: usize,
        kernel: usize,
        flat_out: Option<usize>,
        h: Real,
        act: Activation,
        n_class: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layer_out = match (arch, flat_out) {
            (Arch::Resnet, Some(_)) => {
                return Err(CoreError::Config(
                    "flat blocks are only available for the hyperbolic architecture".into(),
                ))
            }
            (_, Some(out)) => out,
            (_, None) => width,
        };
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            layers.push(random_bank(layer_out, width, kernel, kernel, rng));
        }
        let stack = Self {
            arch,
            opening: random_bank(width, in_channels, 1, 1, rng),
            layers,
            h,
            activation: act,
            n_class,
        };
        stack.validate()?;
        Ok(stack)
    }

    pub fn width(&self) -> usize {
        self.opening.out_channels()
    }

    pub fn in_channels(&self) -> usize {
        self.opening.in_channels()
    }

    pub fn validate(&self) -> Result<()> {
        let width = self.width();
        if self.layers.is_empty() {
            return Err(CoreError::Config("network needs at least one layer".into()));
        }
        if self.n_class < 2 {
            return Err(CoreError::Config("n_class must be at least 2".into()));
        }
        if self.n_class > width {
            return Err(CoreError::Config(format!(
                "n_class {} exceeds network width {}",
                self.n_class, width
            )));
        }
        if (self.opening.kh(), self.opening.kw()) != (1, 1) {
            return Err(CoreError::Config("opening layer must be 1x1".into()));
        }
        if self.arch == Arch::Hyperbolic && !(self.h > 0.0) {
            return Err(CoreError::Config(format!(
                "hyperbolic time step must be positive, got {}",
                self.h
            )));
        }
        for (i, k) in self.layers.iter().enumerate() {
            if k.in_channels() != width {
                return Err(CoreError::Config(format!(
                    "layer {i} expects {} input channels, network width is {width}",
                    k.in_channels()
                )));
            }
            if self.arch == Arch::Resnet && k.out_channels() != width {
                return Err(CoreError::Config(format!(
                    "residual layer {i} must map width to width ({} != {width})",
                    k.out_channels()
                )));
            }
        }
        Ok(())
    }

    /// In-place SGD step `K <- K - gamma * grad` over every bank.
    pub fn sgd_step(&mut self, grads: &LayerGrads, gamma: Real) {
        self.opening.weights_mut().axpy(-gamma, &grads.opening);
        for (k, g) in self.layers.iter_mut().zip(grads.layers.iter()) {
            k.weights_mut().axpy(-gamma, g);
        }
    }

    /// Write one tensor file per kernel bank plus a text manifest.
    pub fn save_checkpoint(&self, dir: &Path, iteration: usize) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_tensor(&dir.join("opening.bin"), self.opening.weights())?;
        let mut manifest = String::new();
        manifest.push_str(&format!("arch={}\n", self.arch.name()));
        manifest.push_str(&format!("h={}\n", self.h));
        manifest.push_str(&format!("activation={}\n", self.activation.name()));
        manifest.push_str(&format!("n_class={}\n", self.n_class));
        manifest.push_str(&format!("iteration={iteration}\n"));
        manifest.push_str(&format!("opening={}\n", shape_txt(self.opening.weights())));
        manifest.push_str(&format!("layers={}\n", self.layers.len()));
        for (i, k) in self.layers.iter().enumerate() {
            write_tensor(&dir.join(format!("layer_{i:02}.bin")), k.weights())?;
            manifest.push_str(&format!("layer_{i:02}={}\n", shape_txt(k.weights())));
        }
        fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<(Self, usize)> {
        let path = dir.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| CoreError::Malformed {
            path: path.display().to_string(),
            what: format!("cannot read checkpoint manifest: {e}"),
        })?;
        let mut arch = None;
        let mut h = None;
        let mut act = None;
        let mut n_class = None;
        let mut iteration = 0usize;
        let mut n_layers = None;
        for line in text.lines() {
            let Some((key, value)) = line.split_once('=') else {
                continue;
            };
            match key {
                "arch" => arch = Some(Arch::parse(value)?),
                "h" => h = value.parse::<Real>().ok(),
                "activation" => act = Some(Activation::parse(value)?),
                "n_class" => n_class = value.parse::<usize>().ok(),
                "iteration" => iteration = value.parse::<usize>().unwrap_or(0),
                "layers" => n_layers = value.parse::<usize>().ok(),
                _ => {}
            }
        }
        let missing = |what: &str| CoreError::Malformed {
            path: path.display().to_string(),
            what: format!("missing {what}"),
        };
        let arch = arch.ok_or_else(|| missing("arch"))?;
        let h = h.ok_or_else(|| missing("h"))?;
        let act = act.ok_or_else(|| missing("activation"))?;
        let n_class = n_class.ok_or_else(|| missing("n_class"))?;
        let n_layers = n_layers.ok_or_else(|| missing("layers"))?;
        let opening = KernelBank::new(read_tensor(&dir.join("opening.bin"))?)?;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            layers.push(KernelBank::new(read_tensor(
                &dir.join(format!("layer_{i:02}.bin")),
            )?)?);
        }
        let stack = Self {
            arch,
            opening,
            layers,
            h,
            activation: act,
            n_class,
        };
        stack.validate()?;
        Ok((stack, iteration))
    }
}

fn shape_txt(t: &Tensor) -> String {
    t.shape()
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

fn random_bank(
    out_channels: usize,
    in_channels: usize,
    kh: usize,
    kw: usize,
    rng: &mut impl Rng,
) -> KernelBank {
    let fan_in = (in_channels * kh * kw) as Real;
    let bound = 1.0 / fan_in.sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    KernelBank::new(Tensor::from_fn(
        vec![out_channels, in_channels, kh, kw],
        |_| dist.sample(rng),
    ))
    .expect("kernel bank shape is valid by construction")
}

/// Stored forward states. The residual variant keeps the full list
/// `y_1..y_n`; the hyperbolic variant keeps only `(y_{n-1}, y_n)` and the
/// backward pass reconstructs earlier states by inversion.
#[derive(Debug, Clone)]
pub enum StateTrajectory {
    Resnet { input: Tensor, states: Vec<Tensor> },
    Hyperbolic { input: Tensor, y_prev: Tensor, y_last: Tensor },
}

impl StateTrajectory {
    pub fn last_state(&self) -> &Tensor {
        match self {
            Self::Resnet { states, .. } => states.last().expect("nonempty trajectory"),
            Self::Hyperbolic { y_last, .. } => y_last,
        }
    }

    pub fn input(&self) -> &Tensor {
        match self {
            Self::Resnet { input, .. } | Self::Hyperbolic { input, .. } => input,
        }
    }
}

/// Output of a forward pass: logits, per-pixel class probabilities, and the
/// stored states needed by the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Tensor,
    pub probs: Tensor,
    pub trajectory: StateTrajectory,
}

/// One step of the hyperbolic recursion.
fn hyperbolic_step(
    y_prev: &Tensor,
    y_prev2: &Tensor,
    k: &KernelBank,
    h: Real,
    act: Activation,
) -> Result<Tensor> {
    let pre = conv2d(y_prev, k)?;
    let lifted = conv2d_transpose(&activation(&pre, act), k)?;
    let mut out = y_prev.scale(2.0);
    out.axpy(-1.0, y_prev2);
    out.axpy(-(h * h), &lifted);
    Ok(out)
}

/// Invert one hyperbolic step: recover `y_{j-2}` from `(y_j, y_{j-1})` and
/// the kernel that produced `y_j`. The recursion is symmetric in
/// `y_j <-> y_{j-2}`, so inversion reuses the forward step with the roles
/// swapped.
pub fn inverse_hyperbolic_step(
    y_j: &Tensor,
    y_prev: &Tensor,
    k: &KernelBank,
    h: Real,
    act: Activation,
) -> Result<Tensor> {
    hyperbolic_step(y_prev, y_j, k, h, act)
}

/// Forward propagation. Residual: `y_1 = opened input`, then one residual
/// step per layer. Hyperbolic: `y_1 = y_2 = opened input`, then one
/// two-step update per layer.
pub fn forward(params: &ParamStack, data: &Tensor) -> Result<ForwardPass> {
    let opened = conv2d(data, &params.opening)?;
    let trajectory = match params.arch {
        Arch::Resnet => {
            let mut states = vec![opened];
            for k in &params.layers {
                let prev = states.last().expect("nonempty");
                let pre = conv2d(prev, k)?;
                let mut next = prev.clone();
                next.axpy(-1.0, &activation(&pre, params.activation));
                states.push(next);
            }
            StateTrajectory::Resnet {
                input: data.clone(),
                states,
            }
        }
        Arch::Hyperbolic => {
            let mut y_prev2 = opened.clone();
            let mut y_prev = opened;
            for k in &params.layers {
                let next = hyperbolic_step(&y_prev, &y_prev2, k, params.h, params.activation)?;
                y_prev2 = y_prev;
                y_prev = next;
            }
            StateTrajectory::Hyperbolic {
                input: data.clone(),
                y_prev: y_prev2,
                y_last: y_prev,
            }
        }
    };
    let logits = slice_channels(trajectory.last_state(), params.n_class)?;
    let probs = softmax_channels(&logits);
    Ok(ForwardPass {
        logits,
        probs,
        trajectory,
    })
}

/// Copy the first `n_class` channels (the closing channel selection).
fn slice_channels(state: &Tensor, n_class: usize) -> Result<Tensor> {
    let (c, h, w) = state.chw()?;
    if n_class > c {
        return Err(CoreError::Shape(format!(
            "cannot slice {n_class} classes from {c} channels"
        )));
    }
    Tensor::new(
        vec![n_class, h, w],
        state.data()[..n_class * h * w].to_vec(),
    )
}

/// Adjoint of [`slice_channels`]: zero-pad the multiplier back to the full
/// network width.
fn pad_channels(p: &Tensor, width: usize) -> Result<Tensor> {
    let (c, h, w) = p.chw()?;
    if c > width {
        return Err(CoreError::Shape(format!(
            "multiplier has {c} channels, width is only {width}"
        )));
    }
    let mut out = Tensor::zeros(vec![width, h, w]);
    out.data_mut()[..c * h * w].copy_from_slice(p.data());
    Ok(out)
}

/// Parameter gradients for every kernel bank.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub opening: Tensor,
    pub layers: Vec<Tensor>,
}

impl LayerGrads {
    pub fn all_finite(&self) -> bool {
        self.opening.all_finite() && self.layers.iter().all(|g| g.all_finite())
    }
}

/// Backward pass: given the final multiplier at the logits (assembled by
/// the trainer from the label loss and the distance penalty), propagate the
/// adjoint state through the layers and return the gradient with respect to
/// every kernel bank, opening included.
pub fn backward(
    params: &ParamStack,
    trajectory: &StateTrajectory,
    p_logits: &Tensor,
) -> Result<LayerGrads> {
    let width = params.width();
    let (pc, _, _) = p_logits.chw()?;
    if pc != params.n_class {
        return Err(CoreError::Consistency(format!(
            "multiplier has {pc} channels, expected n_class = {}",
            params.n_class
        )));
    }
    match (params.arch, trajectory) {
        (Arch::Resnet, StateTrajectory::Resnet { input, states }) => {
            if states.len() != params.layers.len() + 1 {
                return Err(CoreError::Consistency(format!(
                    "trajectory has {} states for {} layers",
                    states.len(),
                    params.layers.len()
                )));
            }
            let mut p = pad_channels(p_logits, width)?;
            let mut grads = vec![Tensor::zeros(vec![1]); params.layers.len()];
            for idx in (0..params.layers.len()).rev() {
                let k = &params.layers[idx];
                let y_in = &states[idx];
                let pre = conv2d(y_in, k)?;
                let sensitivity = activation_deriv(&pre, params.activation).mul_elem(&p);
                // y_j = y_{j-1} - f(K_j y_{j-1}), so the kernel gradient
                // carries a minus sign.
                grads[idx] =
                    conv2d_kernel_grad(y_in, &sensitivity, k.kh(), k.kw())?.scale(-1.0);
                p.axpy(-1.0, &conv2d_transpose(&sensitivity, k)?);
            }
            let opening_grad = conv2d_kernel_grad(input, &p, 1, 1)?;
            Ok(LayerGrads {
                opening: opening_grad,
                layers: grads,
            })
        }
        (Arch::Hyperbolic, StateTrajectory::Hyperbolic { input, y_prev, y_last }) => {
            let h2 = params.h * params.h;
            let mut y_cur = y_last.clone();
            let mut y_prev = y_prev.clone();
            // q_cur = adjoint of the state currently produced, q_prev its
            // predecessor (accumulating).
            let mut q_cur = pad_channels(p_logits, width)?;
            let mut q_prev = Tensor::zeros(q_cur.shape().to_vec());
            let mut grads = vec![Tensor::zeros(vec![1]); params.layers.len()];
            for idx in (0..params.layers.len()).rev() {
                let k = &params.layers[idx];
                let pre = conv2d(&y_prev, k)?;
                let post = activation(&pre, params.activation);
                let deriv = activation_deriv(&pre, params.activation);
                // d<q, K^T f(K y)>/dK has two terms because K appears twice.
                let kq = conv2d(&q_cur, k)?;
                let mut grad = conv2d_kernel_grad(&q_cur, &post, k.kh(), k.kw())?;
                grad.axpy(
                    1.0,
                    &conv2d_kernel_grad(&y_prev, &deriv.mul_elem(&kq), k.kh(), k.kw())?,
                );
                grads[idx] = grad.scale(-h2);
                // q_{j-1} += 2 q_j - h^2 K^T (f'(K y_{j-1}) .* (K q_j))
                q_prev.axpy(2.0, &q_cur);
                q_prev.axpy(-h2, &conv2d_transpose(&deriv.mul_elem(&kq), k)?);
                // q_{j-2} starts from the -I coupling
                let q_prev2 = q_cur.scale(-1.0);
                // reconstruct y_{j-2} instead of reading a stored state
                let y_prev2 = inverse_hyperbolic_step(&y_cur, &y_prev, k, params.h, params.activation)?;
                y_cur = std::mem::replace(&mut y_prev, y_prev2);
                q_cur = std::mem::replace(&mut q_prev, q_prev2);
            }
            // q_cur is now the adjoint of y_2, q_prev of y_1; both equal the
            // opened input.
            q_cur.axpy(1.0, &q_prev);
            let opening_grad = conv2d_kernel_grad(input, &q_cur, 1, 1)?;
            Ok(LayerGrads {
                opening: opening_grad,
                layers: grads,
            })
        }
        _ => Err(CoreError::Consistency(
            "trajectory variant does not match the architecture".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_stack(arch: Arch, rng: &mut ChaCha8Rng) -> ParamStack {
        ParamStack::init(arch, 2, 4, 3, 3, None, 0.2, Activation::Tanh, 2, rng).unwrap()
    }

    fn random_data(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        use rand::Rng as _;
        Tensor::from_fn(vec![c, h, w], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_kernel_resnet_is_the_identity_on_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut stack = small_stack(Arch::Resnet, &mut rng);
        for k in &mut stack.layers {
            *k.weights_mut() = Tensor::zeros(k.weights().shape().to_vec());
        }
        let data = random_data(&mut rng, 2, 4, 4);
        let fwd = forward(&stack, &data).unwrap();
        let StateTrajectory::Resnet { states, .. } = &fwd.trajectory else {
            panic!("wrong trajectory variant");
        };
        let first = &states[0];
        let last = states.last().unwrap();
        assert_eq!(first, last);
    }

    #[test]
    fn zero_kernel_hyperbolic_states_stay_at_the_opened_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut stack = small_stack(Arch::Hyperbolic, &mut rng);
        for k in &mut stack.layers {
            *k.weights_mut() = Tensor::zeros(k.weights().shape().to_vec());
        }
        let data = random_data(&mut rng, 2, 4, 4);
        let opened = conv2d(&data, &stack.opening).unwrap();
        let fwd = forward(&stack, &data).unwrap();
        let StateTrajectory::Hyperbolic { y_prev, y_last, .. } = &fwd.trajectory else {
            panic!("wrong trajectory variant");
        };
        assert_eq!(y_prev, &opened);
        assert_eq!(y_last, &opened);
    }

    #[test]
    fn output_probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for arch in [Arch::Resnet, Arch::Hyperbolic] {
            let stack = small_stack(arch, &mut rng);
            let data = random_data(&mut rng, 2, 5, 5);
            let fwd = forward(&stack, &data).unwrap();
            let (c, h, w) = fwd.probs.chw().unwrap();
            for p in 0..h * w {
                let sum: Real = (0..c).map(|ch| fwd.probs.data()[ch * h * w + p]).sum();
                assert!((sum - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn inverse_step_with_zero_kernels_is_the_linear_two_step_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = KernelBank::zeros(4, 4, 3, 3);
        let y_j = random_data(&mut rng, 4, 3, 3);
        let y_prev = random_data(&mut rng, 4, 3, 3);
        let back = inverse_hyperbolic_step(&y_j, &y_prev, &k, 0.2, Activation::Tanh).unwrap();
        let mut expect = y_prev.scale(2.0);
        expect.axpy(-1.0, &y_j);
        assert_eq!(back, expect);
    }

    #[test]
    fn single_step_inversion_is_exact_to_roundoff() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bank = KernelBank::new(Tensor::from_fn(vec![4, 4, 3, 3], |_| {
            use rand::Rng as _;
            rng.gen_range(-0.5..0.5)
        }))
        .unwrap();
        let y_prev2 = random_data(&mut rng, 4, 4, 4);
        let y_prev = random_data(&mut rng, 4, 4, 4);
        let y_j = hyperbolic_step(&y_prev, &y_prev2, &bank, 0.2, Activation::Tanh).unwrap();
        let back = inverse_hyperbolic_step(&y_j, &y_prev, &bank, 0.2, Activation::Tanh).unwrap();
        for (a, b) in back.data().iter().zip(y_prev2.data().iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn six_layer_round_trip_reconstructs_the_first_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let stack =
            ParamStack::init(Arch::Hyperbolic, 2, 4, 6, 3, None, 0.2, Activation::Tanh, 2, &mut rng)
                .unwrap();
        let data = random_data(&mut rng, 2, 6, 6);
        let opened = conv2d(&data, &stack.opening).unwrap();
        let fwd = forward(&stack, &data).unwrap();
        let StateTrajectory::Hyperbolic { y_prev, y_last, .. } = &fwd.trajectory else {
            panic!("wrong trajectory variant");
        };
        let mut cur = y_last.clone();
        let mut prev = y_prev.clone();
        for k in stack.layers.iter().rev() {
            let prev2 = inverse_hyperbolic_step(&cur, &prev, k, stack.h, stack.activation).unwrap();
            cur = prev;
            prev = prev2;
        }
        // prev is now y_1, cur is y_2; both equal the opened input
        let max_err = prev
            .data()
            .iter()
            .zip(opened.data().iter())
            .fold(0.0 as Real, |m, (&a, &b)| m.max((a - b).abs()));
        assert!(max_err <= 1e-8, "round-trip error {max_err}");
    }

    #[test]
    fn backward_is_zero_for_zero_multiplier() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for arch in [Arch::Resnet, Arch::Hyperbolic] {
            let stack = small_stack(arch, &mut rng);
            let data = random_data(&mut rng, 2, 4, 4);
            let fwd = forward(&stack, &data).unwrap();
            let p = Tensor::zeros(vec![2, 4, 4]);
            let grads = backward(&stack, &fwd.trajectory, &p).unwrap();
            assert!(grads.opening.data().iter().all(|&g| g == 0.0));
            for g in &grads.layers {
                assert!(g.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn backward_is_linear_in_the_multiplier() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for arch in [Arch::Resnet, Arch::Hyperbolic] {
            let stack = small_stack(arch, &mut rng);
            let data = random_data(&mut rng, 2, 4, 4);
            let fwd = forward(&stack, &data).unwrap();
            let p = random_data(&mut rng, 2, 4, 4);
            let q = random_data(&mut rng, 2, 4, 4);
            let (a, b) = (1.7, -0.4);
            let mut combo = p.scale(a);
            combo.axpy(b, &q);
            let g_combo = backward(&stack, &fwd.trajectory, &combo).unwrap();
            let g_p = backward(&stack, &fwd.trajectory, &p).unwrap();
            let g_q = backward(&stack, &fwd.trajectory, &q).unwrap();
            let mut expect = g_p.opening.scale(a);
            expect.axpy(b, &g_q.opening);
            let err = g_combo
                .opening
                .data()
                .iter()
                .zip(expect.data().iter())
                .fold(0.0 as Real, |m, (&x, &y)| m.max((x - y).abs()));
            assert!(err <= 1e-12);
            for i in 0..stack.layers.len() {
                let mut expect = g_p.layers[i].scale(a);
                expect.axpy(b, &g_q.layers[i]);
                let err = g_combo.layers[i]
                    .data()
                    .iter()
                    .zip(expect.data().iter())
                    .fold(0.0 as Real, |m, (&x, &y)| m.max((x - y).abs()));
                assert!(err <= 1e-12);
            }
        }
    }

    #[test]
    fn one_layer_resnet_matches_the_hand_derived_chain_rule() {
        // width 1, 1x1 kernels, 2x2 image: every pixel is the scalar
        // recursion y2 = y1 - tanh(k * y1) with y1 = w * d. The probe
        // objective J = 0.5 * sum((y2 - t)^2) gives
        //   dJ/dk = sum_p p * (-(1 - tanh^2(k y1)) * y1)
        //   dJ/dw = sum_p p * (1 - (1 - tanh^2(k y1)) * k) * d
        // with p = y2 - t per pixel.
        let w_open = 1.3;
        let k_val = 0.7;
        let stack = ParamStack {
            arch: Arch::Resnet,
            opening: KernelBank::new(Tensor::new(vec![1, 1, 1, 1], vec![w_open]).unwrap()).unwrap(),
            layers: vec![
                KernelBank::new(Tensor::new(vec![1, 1, 1, 1], vec![k_val]).unwrap()).unwrap(),
            ],
            h: 0.2,
            activation: Activation::Tanh,
            n_class: 1,
        };
        let data = Tensor::new(vec![1, 2, 2], vec![0.5, -0.8, 1.1, 0.2]).unwrap();
        let target = Tensor::new(vec![1, 2, 2], vec![0.1, 0.0, -0.3, 0.4]).unwrap();
        // forward by hand, skipping validate() (n_class = 1 is fine here
        // because the probe bypasses the softmax closing)
        let opened = conv2d(&data, &stack.opening).unwrap();
        let pre = conv2d(&opened, &stack.layers[0]).unwrap();
        let mut y2 = opened.clone();
        y2.axpy(-1.0, &activation(&pre, Activation::Tanh));
        let p = y2.sub(&target);
        let traj = StateTrajectory::Resnet {
            input: data.clone(),
            states: vec![opened.clone(), y2.clone()],
        };
        let grads = backward(&stack, &traj, &p).unwrap();

        let mut dk = 0.0;
        let mut dw = 0.0;
        for i in 0..4 {
            let d = data.data()[i];
            let y1 = w_open * d;
            let fprime = 1.0 - (k_val * y1).tanh().powi(2);
            let pi = p.data()[i];
            dk += pi * (-fprime * y1);
            dw += pi * (1.0 - fprime * k_val) * d;
        }
        assert!((grads.layers[0].data()[0] - dk).abs() <= 1e-12);
        assert!((grads.opening.data()[0] - dw).abs() <= 1e-12);
    }

    #[test]
    fn residual_constraints_hold_after_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let stack = small_stack(Arch::Resnet, &mut rng);
        let data = random_data(&mut rng, 2, 4, 4);
        let fwd = forward(&stack, &data).unwrap();
        let StateTrajectory::Resnet { states, .. } = &fwd.trajectory else {
            panic!("wrong variant");
        };
        for (idx, k) in stack.layers.iter().enumerate() {
            let pre = conv2d(&states[idx], k).unwrap();
            let mut expect = states[idx].clone();
            expect.axpy(-1.0, &activation(&pre, stack.activation));
            let err = expect
                .data()
                .iter()
                .zip(states[idx + 1].data().iter())
                .fold(0.0 as Real, |m, (&a, &b)| m.max((a - b).abs()));
            assert!(err <= 1e-12);
        }
    }

    #[test]
    fn mismatched_trajectory_is_a_consistency_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let resnet = small_stack(Arch::Resnet, &mut rng);
        let hyper = small_stack(Arch::Hyperbolic, &mut rng);
        let data = random_data(&mut rng, 2, 4, 4);
        let fwd = forward(&hyper, &data).unwrap();
        let p = Tensor::zeros(vec![2, 4, 4]);
        assert!(matches!(
            backward(&resnet, &fwd.trajectory, &p),
            Err(CoreError::Consistency(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_preserves_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let stack = ParamStack::init(
            Arch::Hyperbolic,
            3,
            6,
            2,
            3,
            Some(4),
            0.2,
            Activation::ReluSmooth,
            2,
            &mut rng,
        )
        .unwrap();
        let dir = std::env::temp_dir().join(format!("setseg-ckpt-{}", std::process::id()));
        stack.save_checkpoint(&dir, 42).unwrap();
        let (back, iter) = ParamStack::load_checkpoint(&dir).unwrap();
        assert_eq!(iter, 42);
        assert_eq!(back.arch, stack.arch);
        assert_eq!(back.n_class, stack.n_class);
        assert_eq!(back.activation, stack.activation);
        assert_eq!(back.opening.weights(), stack.opening.weights());
        for (a, b) in back.layers.iter().zip(stack.layers.iter()) {
            assert_eq!(a.weights(), b.weights());
        }
        fs::remove_dir_all(&dir).unwrap();
    }
}
