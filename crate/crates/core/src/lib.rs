//! Differentiable X-ray rendering and rigid 2D/3D C-arm pose registration.
//!
//! The crate renders line-integral radiographs from attenuation volumes
//! under a pinhole C-arm model ([`geometry`], [`volume`], [`render`]),
//! scores them against a target image ([`similarity`]) and recovers the
//! C-arm pose by multiscale gradient ascent ([`registration`]). Pose errors
//! are quantified with [`metrics`], and [`acquisition`] adapts clinical
//! images and metadata to the renderer's conventions.

pub mod acquisition;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod registration;
pub mod render;
pub mod similarity;
pub mod volume;

pub use error::{Error, Result};
pub use geometry::{EulerPose, Intrinsics, Pose};
pub use render::Image;
pub use volume::Volume;
