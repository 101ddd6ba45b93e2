//! Minimal reverse-mode differentiable tensor core.
//!
//! Provides every primitive the adapter chain and the toy backbone need:
//! dense/depthwise convolution, affine maps, elementwise kinds, softmax,
//! reductions, shape ops, a fused anisotropic Gaussian kernel builder and a
//! generic sparse linear-map op. All primitives record onto a [`Tape`] and are
//! verified against central finite differences by [`grad_check`].
//!
//! Two precision modes are supported through the [`Scalar`] type parameter:
//! `f64` for tests and gradient checks, `f32` for training. Forward
//! evaluation is single-threaded and bitwise deterministic per mode.

mod gradcheck;
mod params;
mod tape;
mod tensor;


pub use gradcheck::{
    grad_check, grad_check_multi, grad_check_multi_eps, grad_check_sampled, GradCheckError,
};
pub use params::{Param, ParamSet};
pub use tape::{Gradients, Tape, TensorError, TensorResult, UnaryKind};
pub use tensor::{DiffTensor, Scalar};

/// Max relative error allowed for a single primitive under central finite
/// differences in 64-bit mode.
pub const GRAD_TOL_PRIMITIVE_F64: f64 = 1e-5;

/// Max relative error allowed for the full ISP chain under central finite
/// differences in 64-bit mode.
pub const GRAD_TOL_CHAIN_F64: f64 = 1e-4;

/// Default central-difference step in 64-bit mode.
pub const GRAD_CHECK_EPS_F64: f64 = 1e-5;

/// Central-difference step for deep compositions (full predictors, the
/// I1→I5 chain). Coordinates deep in a network can carry true gradients
/// near 1e-7 while the function itself is O(1); the f64 rounding noise of
/// the two function evaluations, divided by 2·eps, must stay below
/// tolerance · |gradient|, which needs a larger step than the per-primitive
/// default. Truncation error stays negligible for these smooth paths.
pub const GRAD_CHECK_EPS_COMPOSITE_F64: f64 = 1e-3;

/// Step ladder for [`grad_check_multi_eps`] on compositions that mix tiny
/// gradients with subgradient kinks.
pub const GRAD_CHECK_EPS_LADDER_F64: [f64; 3] = [1e-5, 1e-4, 1e-3];
