//! RAW container reading/writing, level normalization, bilinear
//! demosaicing, re-mosaicking and display rendering.

mod bayer;
mod cfa;
mod demosaic;
mod linear;

pub use bayer::{
    read_pgm_with_sidecar, read_rawdesk, read_rawdesk_bytes, write_pgm_with_sidecar,
    write_rawdesk, BayerImage, PgmSidecar,
};
pub use cfa::{CfaPattern, Channel};
pub use demosaic::{
    demosaic_bilinear, demosaic_bilinear_op, demosaic_triples, image_to_tensor, mosaic_from_rgb,
    mosaic_tensor, tensor_to_image,
};
pub use linear::{render_display, render_montage, LinearImage};

use std::fmt;

/// Errors raised by RAW ingestion and rendering.
#[derive(Debug)]
pub enum RawIoError {
    Io(std::io::Error),
    /// File does not start with the expected magic.
    BadMagic(Vec<u8>),
    /// Payload shorter than the header promises.
    Truncated { expected: usize, got: usize },
    /// Structurally valid but semantically bad header fields.
    BadHeader(String),
    /// A sample exceeds what the declared bit depth allows.
    SampleOutOfRange { index: usize, value: u16, max: u16 },
    /// CFA operations need even dimensions (full 2×2 tiles).
    OddDimensions { width: usize, height: usize },
}

impl fmt::Display for RawIoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RawIoError::Io(e) => write!(f, "i/o error: {e}"),
            RawIoError::BadMagic(m) => write!(f, "bad magic {m:?}, expected \"RWDK\""),
            RawIoError::Truncated { expected, got } => {
                write!(f, "truncated payload: expected {expected} bytes, got {got}")
            }
            RawIoError::BadHeader(s) => write!(f, "bad header: {s}"),
            RawIoError::SampleOutOfRange { index, value, max } => {
                write!(f, "sample {index} has value {value}, above bit-depth max {max}")
            }
            RawIoError::OddDimensions { width, height } => {
                write!(f, "dimensions {width}x{height} must be even and positive")
            }
        }
    }
}

impl std::error::Error for RawIoError {}

impl From<std::io::Error> for RawIoError {
    fn from(e: std::io::Error) -> Self {
        RawIoError::Io(e)
    }
}
