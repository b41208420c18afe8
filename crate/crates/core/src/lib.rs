//! Conditional pixel-space diffusion nowcasting with metric-preference
//! post-training.
//!
//! The crate covers the full desk-scale workflow: synthetic radar data,
//! forecast verification metrics, a small conditional denoising UNet with
//! its own reverse-mode autodiff, DDPM/DDIM/flow samplers, metric-ranked
//! preference pair construction, and the two-stage preference alignment
//! (FAR first, then CSI under a FAR-preservation constraint).

pub mod align;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod prefs;
pub mod testkit;
pub mod train;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod util;

pub use error::{Error, Result};
