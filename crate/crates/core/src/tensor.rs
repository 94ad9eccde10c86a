//! Dense tensor storage and convolution kernel banks.
//!
//! Tensors are plain contiguous arrays with a shape vector of order <= 4.
//! The canonical interpretation for network states is `[channels, height,
//! width]` in row-major layout; a leading example axis may be carried for
//! storage but the numeric kernels operate on single examples.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use crate::error::{CoreError, Result};

/// Scalar type for all numeric work. Double precision by default so
/// finite-difference gradient checks are meaningful; the
/// `single-precision` feature switches to `f32` for speed runs.
#[cfg(not(feature = "single-precision"))]
pub type Real = f64;
#[cfg(feature = "single-precision")]
pub type Real = f32;

#[cfg(not(feature = "single-precision"))]
const DTYPE_NAME: &str = "f64";
#[cfg(feature = "single-precision")]
const DTYPE_NAME: &str = "f32";

/// Dense multi-dimensional array, immutable by convention once built
/// (mutation happens through explicit `data_mut` during construction or
/// parameter updates, never concurrently).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(CoreError::Shape(format!(
                "tensor order must be 1..=4, got {}",
                shape.len()
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CoreError::Shape(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> Real) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    /// NaN/Inf check, on demand rather than per operation.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Channel count, spatial height and width for a `[c, h, w]` tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [c, h, w] => Ok((*c, *h, *w)),
            s => Err(CoreError::Shape(format!("expected [c, h, w], got {s:?}"))),
        }
    }

    /// Borrow one channel of a `[c, h, w]` tensor as a flat spatial field
    /// (row-major, pixel index = row * w + col).
    pub fn channel(&self, c: usize) -> &[Real] {
        let (nc, h, w) = self.chw().expect("channel() needs a [c, h, w] tensor");
        assert!(c < nc, "channel {c} out of {nc}");
        &self.data[c * h * w..(c + 1) * h * w]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [Real] {
        let (nc, h, w) = self.chw().expect("channel_mut() needs a [c, h, w] tensor");
        assert!(c < nc, "channel {c} out of {nc}");
        &mut self.data[c * h * w..(c + 1) * h * w]
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: Real) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul_elem(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a * b)
    }

    fn zip(&self, other: &Tensor, f: impl Fn(Real, Real) -> Real) -> Tensor {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `self += s * other`, used for SGD updates and gradient accumulation.
    pub fn axpy(&mut self, s: Real, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += s * b;
        }
    }

    pub fn dot(&self, other: &Tensor) -> Real {
        assert_eq!(self.shape, other.shape, "dot shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a * b)
            .sum()
    }

    pub fn norm_sq(&self) -> Real {
        self.data.iter().map(|&x| x * x).sum()
    }
}

/// One bank of 2D convolution kernels with shape `[out, in, kh, kw]`.
/// "Flat" banks with `out < in` are allowed; the hyperbolic architecture
/// composes them as `K^T f(K y)` which maps width to width regardless.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    weights: Tensor,
}

impl KernelBank {
    pub fn new(weights: Tensor) -> Result<Self> {
        match weights.shape() {
            [_, _, kh, kw] if *kh >= 1 && *kw >= 1 => Ok(Self { weights }),
            s => Err(CoreError::Shape(format!(
                "kernel bank needs shape [out, in, kh, kw] with kh, kw >= 1, got {s:?}"
            ))),
        }
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kh: usize, kw: usize) -> Self {
        Self {
            weights: Tensor::zeros(vec![out_channels, in_channels, kh, kw]),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kh(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn kw(&self) -> usize {
        self.weights.shape()[3]
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }
}

/// Write a tensor as a raw little-endian payload plus a sidecar text
/// descriptor (`<path>.desc` with `key=value` lines for dtype and shape).
pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut payload = Vec::with_capacity(t.len() * std::mem::size_of::<Real>());
    for &x in t.data() {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&payload)?;
    let shape_txt = t
        .shape()
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x");
    fs::write(
        desc_path(path),
        format!("dtype={DTYPE_NAME}\nshape={shape_txt}\n"),
    )?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let desc = desc_path(path);
    let text = fs::read_to_string(&desc).map_err(|e| CoreError::Malformed {
        path: desc.display().to_string(),
        what: format!("cannot read descriptor: {e}"),
    })?;
    let mut dtype = None;
    let mut shape: Option<Vec<usize>> = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some(("dtype", v)) => dtype = Some(v.trim().to_string()),
            Some(("shape", v)) => {
                let dims: std::result::Result<Vec<usize>, _> =
                    v.trim().split('x').map(|d| d.parse::<usize>()).collect();
                shape = Some(dims.map_err(|e| CoreError::Malformed {
                    path: desc.display().to_string(),
                    what: format!("bad shape: {e}"),
                })?);
            }
            _ => {
                return Err(CoreError::Malformed {
                    path: desc.display().to_string(),
                    what: format!("unrecognized descriptor line: {line}"),
                })
            }
        }
    }
    let dtype = dtype.ok_or_else(|| CoreError::Malformed {
        path: desc.display().to_string(),
        what: "missing dtype".into(),
    })?;
    if dtype != DTYPE_NAME {
        return Err(CoreError::Malformed {
            path: desc.display().to_string(),
            what: format!("dtype {dtype} does not match this build ({DTYPE_NAME})"),
        });
    }
    let shape = shape.ok_or_else(|| CoreError::Malformed {
        path: desc.display().to_string(),
        what: "missing shape".into(),
    })?;

    let mut payload = Vec::new();
    fs::File::open(path)?.read_to_end(&mut payload)?;
    let elem = std::mem::size_of::<Real>();
    let n: usize = shape.iter().product();
    if payload.len() != n * elem {
        return Err(CoreError::Malformed {
            path: path.display().to_string(),
            what: format!("payload has {} bytes, shape implies {}", payload.len(), n * elem),
        });
    }
    let data = payload
        .chunks_exact(elem)
        .map(|b| Real::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

fn desc_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".desc");
    PathBuf::from(os)
}
