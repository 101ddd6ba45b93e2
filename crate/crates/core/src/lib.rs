//! rawdesk-core: a differentiable camera-ISP adapter toolkit.
//!
//! The crate is organized around a small reverse-mode autodiff core
//! ([`numerics`]) on top of which the learnable ISP chain ([`isp`]), the
//! model-level adapters ([`adapters`]), RAW container handling ([`rawio`]),
//! low-light degradation synthesis ([`degrade`]), a synthetic segmentation
//! task ([`tasks`]) and the training/evaluation harness ([`train`]) are built.

pub mod adapters;
pub mod degrade;
pub mod isp;
pub mod numerics;
pub mod rawio;
pub mod tasks;
pub mod train;
