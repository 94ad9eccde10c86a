//! Numeric kernels: 2D convolution, its adjoint, channel softmax, and
//! pointwise activations.
//!
//! Convolutions use zero "same" padding with stride 1 so spatial dimensions
//! are preserved across layers. For even kernel sizes the padding splits as
//! floor/ceil of `(k - 1) / 2` on the leading/trailing side.

use crate::error::{CoreError, Result};
use crate::tensor::{KernelBank, Real, Tensor};

/// Pointwise nonlinearity. Both variants are smooth, so the derivative in
/// the backward pass is exact everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    /// Softplus, a smooth stand-in for ReLU.
    ReluSmooth,
}

impl Activation {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "tanh" => Ok(Self::Tanh),
            "relu-smooth" => Ok(Self::ReluSmooth),
            other => Err(CoreError::Config(format!(
                "unknown activation '{other}' (expected 'tanh' or 'relu-smooth')"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Tanh => "tanh",
            Self::ReluSmooth => "relu-smooth",
        }
    }

    #[inline]
    pub fn eval(&self, x: Real) -> Real {
        match self {
            Self::Tanh => x.tanh(),
            Self::ReluSmooth => {
                if x > 0.0 {
                    x + (-x).exp().ln_1p()
                } else {
                    x.exp().ln_1p()
                }
            }
        }
    }

    #[inline]
    pub fn deriv(&self, x: Real) -> Real {
        match self {
            Self::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Self::ReluSmooth => {
                // logistic sigmoid, computed stably on both tails
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
        }
    }
}

/// Apply the activation elementwise.
pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    x.map(|v| kind.eval(v))
}

/// Elementwise derivative of the activation at `x`.
pub fn activation_deriv(x: &Tensor, kind: Activation) -> Tensor {
    x.map(|v| kind.deriv(v))
}

// Rows i with both i and i+shift inside [0, n).
#[inline]
fn valid_range(shift: isize, n: usize) -> std::ops::Range<usize> {
    let lo = (-shift).max(0) as usize;
    let hi_signed = n as isize - shift.max(0);
    let hi = hi_signed.max(0) as usize;
    lo..hi.max(lo)
}

fn check_conv_input(x: &Tensor, k: &KernelBank, expect_channels: usize) -> Result<(usize, usize)> {
    let (c, h, w) = x.chw()?;
    if c != expect_channels {
        return Err(CoreError::Shape(format!(
            "input has {} channels, kernel bank expects {}",
            c, expect_channels
        )));
    }
    if !x.all_finite() || !k.weights().all_finite() {
        return Err(CoreError::Numeric("conv input contains NaN/Inf".into()));
    }
    Ok((h, w))
}

/// Cross-correlation of `x: [c_in, h, w]` with the bank, producing
/// `[c_out, h, w]`. Linear in both arguments.
pub fn conv2d(x: &Tensor, k: &KernelBank) -> Result<Tensor> {
    let (h, w) = check_conv_input(x, k, k.in_channels())?;
    let (co, ci, kh, kw) = (k.out_channels(), k.in_channels(), k.kh(), k.kw());
    let (pt, pl) = ((kh - 1) / 2, (kw - 1) / 2);
    let kdata = k.weights().data();
    let mut out = Tensor::zeros(vec![co, h, w]);
    for o in 0..co {
        let och = out.channel_mut(o);
        for c in 0..ci {
            let xch = x.channel(c);
            let kbase = (o * ci + c) * kh * kw;
            for di in 0..kh {
                let sr = di as isize - pt as isize;
                let rows = valid_range(sr, h);
                for dj in 0..kw {
                    let sc = dj as isize - pl as isize;
                    let cols = valid_range(sc, w);
                    let weight = kdata[kbase + di * kw + dj];
                    if weight == 0.0 || cols.is_empty() {
                        continue;
                    }
                    for i in rows.clone() {
                        let src = ((i as isize + sr) as usize) * w;
                        let dst = i * w;
                        for j in cols.clone() {
                            och[dst + j] += weight * xch[src + (j as isize + sc) as usize];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`conv2d`] in the image argument: for all `u`, `v`,
/// `<conv2d(u, k), v> == <u, conv2d_transpose(v, k)>`.
pub fn conv2d_transpose(v: &Tensor, k: &KernelBank) -> Result<Tensor> {
    let (h, w) = check_conv_input(v, k, k.out_channels())?;
    let (co, ci, kh, kw) = (k.out_channels(), k.in_channels(), k.kh(), k.kw());
    let (pt, pl) = ((kh - 1) / 2, (kw - 1) / 2);
    let kdata = k.weights().data();
    let mut out = Tensor::zeros(vec![ci, h, w]);
    for c in 0..ci {
        let och = out.channel_mut(c);
        for o in 0..co {
            let vch = v.channel(o);
            let kbase = (o * ci + c) * kh * kw;
            for di in 0..kh {
                let sr = di as isize - pt as isize;
                // a = i + sr runs over valid_range mapped forward
                let rows = valid_range(sr, h);
                for dj in 0..kw {
                    let sc = dj as isize - pl as isize;
                    let cols = valid_range(sc, w);
                    let weight = kdata[kbase + di * kw + dj];
                    if weight == 0.0 || cols.is_empty() {
                        continue;
                    }
                    for i in rows.clone() {
                        let dst = ((i as isize + sr) as usize) * w;
                        let src = i * w;
                        for j in cols.clone() {
                            och[dst + (j as isize + sc) as usize] += weight * vch[src + j];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`conv2d`] in the kernel argument: gradient of
/// `<upstream, conv2d(x, K)>` with respect to `K`, returned as an
/// `[out, in, kh, kw]` tensor.
pub fn conv2d_kernel_grad(x: &Tensor, upstream: &Tensor, kh: usize, kw: usize) -> Result<Tensor> {
    let (ci, h, w) = x.chw()?;
    let (co, hu, wu) = upstream.chw()?;
    if (hu, wu) != (h, w) {
        return Err(CoreError::Shape(format!(
            "kernel grad spatial mismatch: input {h}x{w}, upstream {hu}x{wu}"
        )));
    }
    let (pt, pl) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut out = Tensor::zeros(vec![co, ci, kh, kw]);
    let odata = out.data_mut();
    for o in 0..co {
        let uch = upstream.channel(o);
        for c in 0..ci {
            let xch = x.channel(c);
            let kbase = (o * ci + c) * kh * kw;
            for di in 0..kh {
                let sr = di as isize - pt as isize;
                let rows = valid_range(sr, h);
                for dj in 0..kw {
                    let sc = dj as isize - pl as isize;
                    let cols = valid_range(sc, w);
                    if cols.is_empty() {
                        continue;
                    }
                    let mut acc = 0.0;
                    for i in rows.clone() {
                        let src = ((i as isize + sr) as usize) * w;
                        let dst = i * w;
                        for j in cols.clone() {
                            acc += uch[dst + j] * xch[src + (j as isize + sc) as usize];
                        }
                    }
                    odata[kbase + di * kw + dj] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Per-pixel softmax across the channel axis, computed with max
/// subtraction. Outputs are strictly positive and sum to one per pixel.
pub fn softmax_channels(x: &Tensor) -> Tensor {
    let (c, h, w) = x.chw().expect("softmax needs a [c, h, w] tensor");
    debug_assert!(c >= 2, "softmax over fewer than two classes");
    let n = h * w;
    let mut out = Tensor::zeros(vec![c, h, w]);
    for p in 0..n {
        let mut m = Real::NEG_INFINITY;
        for ch in 0..c {
            m = m.max(x.data()[ch * n + p]);
        }
        let mut sum = 0.0;
        for ch in 0..c {
            let e = (x.data()[ch * n + p] - m).exp();
            out.data_mut()[ch * n + p] = e;
            sum += e;
        }
        for ch in 0..c {
            out.data_mut()[ch * n + p] /= sum;
        }
    }
    out
}

/// Transposed-Jacobian product of the channel softmax: given the softmax
/// output `y` and an upstream gradient, returns per pixel
/// `y_i * (u_i - sum_k y_k u_k)`.
pub fn softmax_channels_backward(y: &Tensor, upstream: &Tensor) -> Tensor {
    assert_eq!(y.shape(), upstream.shape(), "softmax backward shape mismatch");
    let (c, h, w) = y.chw().expect("softmax backward needs [c, h, w]");
    let n = h * w;
    let mut out = Tensor::zeros(vec![c, h, w]);
    for p in 0..n {
        let mut inner = 0.0;
        for ch in 0..c {
            inner += y.data()[ch * n + p] * upstream.data()[ch * n + p];
        }
        for ch in 0..c {
            let yi = y.data()[ch * n + p];
            out.data_mut()[ch * n + p] = yi * (upstream.data()[ch * n + p] - inner);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_gradient, max_rel_error};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bank(shape: [usize; 4], data: Vec<Real>) -> KernelBank {
        KernelBank::new(Tensor::new(shape.to_vec(), data).unwrap()).unwrap()
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    // Naive direct-summation convolution, independent of the tap-shift
    // implementation above; used as the oracle.
    fn conv2d_naive(x: &Tensor, k: &KernelBank) -> Tensor {
        let (ci, h, w) = x.chw().unwrap();
        assert_eq!(ci, k.in_channels());
        let (co, kh, kw) = (k.out_channels(), k.kh(), k.kw());
        let (pt, pl) = ((kh - 1) / 2, (kw - 1) / 2);
        let mut out = Tensor::zeros(vec![co, h, w]);
        for o in 0..co {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for di in 0..kh {
                            for dj in 0..kw {
                                let r = i as isize + di as isize - pt as isize;
                                let q = j as isize + dj as isize - pl as isize;
                                if r >= 0 && (r as usize) < h && q >= 0 && (q as usize) < w {
                                    let kidx = ((o * ci + c) * kh + di) * kw + dj;
                                    acc += x.channel(c)[r as usize * w + q as usize]
                                        * k.weights().data()[kidx];
                                }
                            }
                        }
                    }
                    out.channel_mut(o)[i * w + j] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = Tensor::new(vec![1, 3, 3], (0..9).map(|i| i as Real).collect()).unwrap();
        let k = bank([1, 1, 1, 1], vec![1.0]);
        assert_eq!(conv2d(&x, &k).unwrap(), x);
        assert_eq!(conv2d_transpose(&x, &k).unwrap(), x);
    }

    #[test]
    fn ones_kernel_on_ones_input_counts_window_overlap() {
        // 3x3 all-ones kernel over a 2x2 all-ones image: every output pixel
        // sees exactly the four image pixels once zero padding truncates the
        // window at the borders.
        let x = Tensor::new(vec![1, 2, 2], vec![1.0; 4]).unwrap();
        let k = bank([1, 1, 3, 3], vec![1.0; 9]);
        let y = conv2d(&x, &k).unwrap();
        assert_eq!(y.data(), &[4.0, 4.0, 4.0, 4.0]);
        let oracle = conv2d_naive(&x, &k);
        assert_eq!(y, oracle);
    }

    #[test]
    fn zero_input_maps_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = KernelBank::new(random_tensor(&mut rng, vec![3, 2, 3, 3])).unwrap();
        let x = Tensor::zeros(vec![2, 4, 4]);
        assert!(conv2d(&x, &k).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let x = Tensor::zeros(vec![3, 4, 4]);
        let k = KernelBank::zeros(2, 2, 3, 3);
        assert!(matches!(conv2d(&x, &k), Err(CoreError::Shape(_))));
        let v = Tensor::zeros(vec![3, 4, 4]);
        assert!(matches!(conv2d_transpose(&v, &k), Err(CoreError::Shape(_))));
    }

    #[test]
    fn non_finite_input_is_a_numeric_error() {
        let mut x = Tensor::zeros(vec![1, 2, 2]);
        x.data_mut()[0] = Real::INFINITY;
        let k = bank([1, 1, 1, 1], vec![1.0]);
        assert!(matches!(conv2d(&x, &k), Err(CoreError::Numeric(_))));
    }

    #[test]
    fn matches_naive_convolution_on_even_kernels() {
        // Even kernel sizes exercise the floor/ceil padding split.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (kh, kw) in [(2, 2), (4, 3), (2, 5)] {
            let x = random_tensor(&mut rng, vec![2, 5, 6]);
            let k = KernelBank::new(random_tensor(&mut rng, vec![3, 2, kh, kw])).unwrap();
            let fast = conv2d(&x, &k).unwrap();
            let slow = conv2d_naive(&x, &k);
            let err = max_rel_error(fast.data(), slow.data());
            assert!(err <= 1e-13, "kernel {kh}x{kw}: rel err {err}");
        }
    }

    #[test]
    fn adjoint_dot_test_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let u = random_tensor(&mut rng, vec![2, 4, 4]);
        let k = KernelBank::new(random_tensor(&mut rng, vec![3, 2, 3, 3])).unwrap();
        let v = random_tensor(&mut rng, vec![3, 4, 4]);
        let lhs = conv2d(&u, &k).unwrap().dot(&v);
        let rhs = u.dot(&conv2d_transpose(&v, &k).unwrap());
        let rel = ((lhs - rhs) / lhs.abs().max(1e-30)).abs();
        assert!(rel <= 1e-12, "adjoint mismatch: {lhs} vs {rhs}");
    }

    #[test]
    fn kernel_grad_is_adjoint_in_the_kernel_argument() {
        // <upstream, conv(x, K)> must be linear in K with coefficient
        // conv2d_kernel_grad(x, upstream).
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, vec![2, 5, 4]);
        let upstream = random_tensor(&mut rng, vec![3, 5, 4]);
        let kt = random_tensor(&mut rng, vec![3, 2, 3, 2]);
        let k = KernelBank::new(kt.clone()).unwrap();
        let lhs = conv2d(&x, &k).unwrap().dot(&upstream);
        let g = conv2d_kernel_grad(&x, &upstream, 3, 2).unwrap();
        let rhs = g.dot(&kt);
        assert!(((lhs - rhs) / lhs.abs().max(1e-30)).abs() <= 1e-12);
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let x = Tensor::new(vec![4, 1, 1], vec![2.5; 4]).unwrap();
        let y = softmax_channels(&x);
        for &v in y.data() {
            assert!((v - 0.25).abs() <= 1e-15);
        }
    }

    #[test]
    fn softmax_two_class_analytic_value() {
        let x = Tensor::new(vec![2, 1, 1], vec![0.0, (2.0 as Real).ln()]).unwrap();
        let y = softmax_channels(&x);
        assert!((y.data()[0] - 1.0 / 3.0).abs() <= 1e-15);
        assert!((y.data()[1] - 2.0 / 3.0).abs() <= 1e-15);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&mut rng, vec![3, 2, 2]);
        let shifted = x.map(|v| v + 37.5);
        let a = softmax_channels(&x);
        let b = softmax_channels(&shifted);
        assert!(max_rel_error(a.data(), b.data()) <= 1e-12);
    }

    #[test]
    fn softmax_backward_zero_for_constant_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = softmax_channels(&random_tensor(&mut rng, vec![3, 2, 2]));
        let upstream = Tensor::from_fn(vec![3, 2, 2], |_| 0.7);
        let g = softmax_channels_backward(&y, &upstream);
        assert!(g.data().iter().all(|&v| v.abs() <= 1e-15));
    }

    #[test]
    fn softmax_backward_vanishes_at_one_hot() {
        let mut y = Tensor::zeros(vec![2, 1, 1]);
        y.data_mut()[0] = 1.0 - 1e-12;
        y.data_mut()[1] = 1e-12;
        let upstream = Tensor::new(vec![2, 1, 1], vec![3.0, -2.0]).unwrap();
        let g = softmax_channels_backward(&y, &upstream);
        assert!(g.data().iter().all(|&v| v.abs() <= 1e-10));
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(&mut rng, vec![3, 2, 2]);
        let upstream = random_tensor(&mut rng, vec![3, 2, 2]);
        let analytic = softmax_channels_backward(&softmax_channels(&x), &upstream);
        let f = |flat: &[Real]| {
            let t = Tensor::new(vec![3, 2, 2], flat.to_vec()).unwrap();
            softmax_channels(&t).dot(&upstream)
        };
        let numeric = central_gradient(f, x.data(), 1e-6);
        let err = max_rel_error(analytic.data(), &numeric);
        assert!(err <= 1e-6, "softmax backward FD error {err}");
    }

    #[test]
    fn tanh_values_and_saturation() {
        assert_eq!(Activation::Tanh.eval(0.0), 0.0);
        assert_eq!(Activation::Tanh.deriv(0.0), 1.0);
        assert!((Activation::Tanh.eval(100.0) - 1.0).abs() <= 1e-12);
        assert!((Activation::Tanh.eval(-100.0) + 1.0).abs() <= 1e-12);
    }

    #[test]
    fn activation_deriv_matches_finite_differences() {
        for kind in [Activation::Tanh, Activation::ReluSmooth] {
            for &x in &[-2.0, -0.3, 0.0, 0.4, 1.7] {
                let h = 1e-6;
                let numeric = (kind.eval(x + h) - kind.eval(x - h)) / (2.0 * h);
                let analytic = kind.deriv(x);
                let rel = (numeric - analytic).abs() / analytic.abs().max(1e-12);
                assert!(rel <= 1e-8, "{:?} at {x}: rel {rel}", kind);
            }
        }
    }

    #[test]
    fn unknown_activation_is_a_config_error() {
        assert!(matches!(Activation::parse("gelu"), Err(CoreError::Config(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        // The adjoint identity is the load-bearing property for the
        // hand-derived backward pass; check it across random shapes.
        #[test]
        fn prop_conv_adjoint_identity(seed in 0u64..5000, ci in 1usize..3, co in 1usize..3,
                                      kh in 1usize..4, kw in 1usize..4,
                                      h in 1usize..6, w in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = random_tensor(&mut rng, vec![ci, h, w]);
            let k = KernelBank::new(random_tensor(&mut rng, vec![co, ci, kh, kw])).unwrap();
            let v = random_tensor(&mut rng, vec![co, h, w]);
            let lhs = conv2d(&u, &k).unwrap().dot(&v);
            let rhs = u.dot(&conv2d_transpose(&v, &k).unwrap());
            prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        }

        #[test]
        fn prop_softmax_outputs_live_on_the_simplex(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_tensor(&mut rng, vec![3, 3, 2]);
            let y = softmax_channels(&x.scale(10.0));
            let (c, h, w) = y.chw().unwrap();
            for p in 0..h * w {
                let mut sum = 0.0;
                for ch in 0..c {
                    let v = y.data()[ch * h * w + p];
                    prop_assert!(v > 0.0);
                    sum += v;
                }
                prop_assert!((sum - 1.0).abs() <= 1e-12);
            }
        }
    }
}
