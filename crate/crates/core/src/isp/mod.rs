//! Input-level adapters: the learnable ISP chain I1 → I5.
//!
//! Two query-adaptive predictors emit the stage parameters (gain, denoise
//! kernel radii, sharpen blend; Minkowski exponent and color matrix), and a
//! neural implicit 3D LUT performs the final color manipulation. The whole
//! chain is differentiable end to end.

mod chain;
mod qal;
mod stages;
mod weights;

pub use chain::{
    input_adapter_forward, input_adapter_forward_from_i1, AdapterToggles, IspTrace,
};
pub use qal::{qal_forward, qal_from_tokens};
pub use stages::{
    apply_ccm, build_gaussian_kernel, constrain_color_params, constrain_kernel_params,
    constrain_params, gain_denoise_sharpen, gain_denoise_sharpen_with_kernel, gain_init,
    kernel_window_size, nilut_apply, sog_white_balance, ColorParams, KernelParams, GAIN_MIN,
    KERNEL_SIZE_CAP, RHO_EPS, RHO_MAX,
};
pub use weights::{
    AdapterBound, AdapterWeights, NilutBound, NilutWeights, QalBound, QalWeights, EMBED_DIM,
    NILUT_DEFAULT_DIM, PK_QUERIES, PM_QUERIES, TOKEN_DIM,
};

use std::fmt;

/// Errors raised by the adapter chain.
#[derive(Debug)]
pub enum IspError {
    /// Input too small for the two stride-2 reductions.
    ImageTooSmall { height: usize, width: usize },
    BadInput(String),
    Tensor(crate::numerics::TensorError),
    Raw(crate::rawio::RawIoError),
}

impl fmt::Display for IspError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IspError::ImageTooSmall { height, width } => {
                write!(f, "image {height}x{width} too small, need at least 4x4")
            }
            IspError::BadInput(s) => write!(f, "bad input: {s}"),
            IspError::Tensor(e) => write!(f, "tensor error: {e}"),
            IspError::Raw(e) => write!(f, "raw error: {e}"),
        }
    }
}

impl std::error::Error for IspError {}

impl From<crate::numerics::TensorError> for IspError {
    fn from(e: crate::numerics::TensorError) -> Self {
        IspError::Tensor(e)
    }
}

impl From<crate::rawio::RawIoError> for IspError {
    fn from(e: crate::rawio::RawIoError) -> Self {
        IspError::Raw(e)
    }
}
