//! Event-driven dynamic Gaussian splatting.
//!
//! The pipeline: a simulator renders analytic dynamic scenes from moving
//! cameras and converts the frame sequences into contrast-threshold event
//! streams; a trainer fits a canonical Gaussian cloud plus a small
//! deformation MLP directly to those events (optionally fused with RGB
//! frames); evaluation renders held-out views, applies a per-channel
//! gain/offset correction in log space, and reports PSNR/SSIM.

pub mod error;
pub mod events;
pub mod gaussians;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod render;
pub mod sim;
pub mod train;

pub use error::E4dgsError;
