//! Sound source localization by back-propagating beamformed signals along ray paths.

// Validation uses `!(x > 0.0)` so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backprop;
pub mod beamform;
pub mod config;
pub mod error;
pub mod forward_sim;
pub mod geometry;
pub mod localizer;
pub mod pipeline;
pub mod presets;
pub mod raytrace;
pub mod signal;
pub mod sphharm;

pub use error::{Error, Result};

/// Speed of sound in m/s.
pub const SPEED_OF_SOUND: f64 = 343.0;
/// Samples per analysis frame.
pub const FRAME_LENGTH: usize = 3840;
/// Zero-padded transform length; the difference to the frame holds back-propagation delay.
pub const PADDED_LENGTH: usize = 8192;
