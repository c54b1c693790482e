//! Inverse rendering of Gaussian-splatting scenes with a hybrid shading model.
//!
//! Each Gaussian carries a learned radiance field (order-4 spherical harmonics)
//! and physically based shading parameters (albedo, roughness, metallic). A
//! per-Gaussian distillation progress value `alpha` blends the two:
//!
//! ```text
//! I = alpha * I_phy + (1 - alpha) * I_raw
//! I_phy = (1 - m) * I_diff + I_spec
//! ```
//!
//! `I_diff` uses an SH triple product of light and a baked visibility field with
//! a clamped-cosine lobe; `I_spec` uses the split-sum approximation with a
//! prefiltered cubemap and a GGX integration table. Training moves appearance
//! from the radiance field into the physical model in four stages
//! (see [`train::Stage`]).
//!
//! SH "order" counts bands throughout: order 3 has 9 coefficients (l <= 2),
//! order 4 has 16 (l <= 3).

pub mod brdf;
pub mod config;
pub mod dataset;
pub mod envlight;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod math;
pub mod oracle;
pub mod pipeline;
pub mod scene;
pub mod sh;
pub mod shading;
pub mod splat;
pub mod train;
pub mod visibility;

pub use error::{Error, Result};
