//! Dual-pixel defocus toolkit.
//!
//! Simulates dual-pixel (DP) image formation from a thin-lens model,
//! estimates a signed circle-of-confusion (COC) map from a DP pair, learns
//! defocus-mask thresholds with a nested search and deblurs with a set of
//! mask-gated branches of increasing strength.
//!
//! All numeric code is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the scalar to the types used by the file formats and the CLI.

pub mod branches;
pub mod cocest;
pub mod dppsf;
pub mod error;
pub mod imgcore;
pub mod kv;
pub mod maskgen;
pub mod metrics;
pub mod scalar;
pub mod scenes;
pub mod thinlens;

pub use error::{Error, Result};
pub use scalar::Real;

/// Working image type: 32-bit samples in `[0, 1]`.
pub type Image32 = imgcore::Image<f32>;
/// Double precision image, used by oracles and reference computations.
pub type Image64 = imgcore::Image<f64>;
pub type FloatMap32 = imgcore::FloatMap<f32>;
pub type FloatMap64 = imgcore::FloatMap<f64>;
/// Signed COC radius in pixels per pixel.
pub type CocMap = imgcore::FloatMap<f32>;
pub type Kernel32 = imgcore::Kernel<f32>;
pub type Kernel64 = imgcore::Kernel<f64>;
pub type CameraModel32 = thinlens::CameraModel<f32>;
pub type CameraModel64 = thinlens::CameraModel<f64>;
pub type DpPair32 = dppsf::DpPair<f32>;
pub type DpKernelPair64 = dppsf::DpKernelPair<f64>;

