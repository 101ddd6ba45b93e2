//! Low-light / over-exposure RAW degradation synthesis with a fully
//! pinned deterministic PRNG.

mod dataset;
mod model;
mod rng;

pub use dataset::{degrade_bayer, degrade_dataset, per_image_seed, ManifestEntry};
pub use model::{
    degrade_raw, degrade_raw_unclamped, sample_light_intensity, DegradeConfig, DegradeError,
    LightingMode,
};
pub use rng::{splitmix64, DeterministicRng};
