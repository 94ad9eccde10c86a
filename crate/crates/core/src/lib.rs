//! Training of convolutional segmentation networks under constraints on the
//! network output.
//!
//! Instead of translating prior knowledge (class areas, bounding boxes, rank
//! bounds) into bespoke penalty functions, every constraint is represented by
//! its Euclidean projection operator. The squared point-to-set distance
//! `0.5 * ||P(y) - y||^2` is differentiable with gradient `y - P(y)`, so a
//! single training loop handles cardinality, l1-ball, rank, and intersection
//! constraints uniformly, including the case with no labels at all.
//!
//! Module map:
//! - [`tensor`] / [`ops`]: dense tensors and the numeric kernels (2D
//!   convolution, its adjoint, channel softmax, activations).
//! - [`projections`]: projection operators for the supported constraint sets.
//! - [`distance`]: squared distance penalties built from those projections.
//! - [`network`]: residual and reversible hyperbolic architectures with a
//!   hand-derived backward pass.
//! - [`losses`]: masked cross-entropy, bounding-box supervision, and the
//!   sum-of-output baseline penalty.
//! - [`trainer`]: the penalty training loop with adaptive penalty growth.
//! - [`synth`]: synthetic scenes and segmentation metrics.
//! - [`gradcheck`]: finite-difference harness used by tests and the CLI.

pub mod distance;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod network;
pub mod ops;
pub mod projections;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{CoreError, Result};
pub use tensor::{KernelBank, Real, Tensor};
