//! Integral (soft-argmax) pose regression: heatmap decoding by expectation,
//! analytic gradients, heatmap and joint losses, pose metrics, a seeded
//! synthetic data generator and a small training harness.
//!
//! Numeric code in [`decode`], [`losses`] and [`metrics`] is generic over
//! [`Scalar`] (`f32` or `f64`); the aliases below fix the precision.

pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod scalar;
pub mod synth;
pub mod table;
pub mod train;

pub use error::{Error, Result};
pub use grid::{Axis, GridSpec};
pub use scalar::Scalar;

pub type Heatmap = grid::Heatmap<f64>;
pub type HeatmapF32 = grid::Heatmap<f32>;
pub type NormalizedHeatmap = grid::NormalizedHeatmap<f64>;
pub type NormalizedHeatmapF32 = grid::NormalizedHeatmap<f32>;
pub type JointSet = grid::JointSet<f64>;
pub type JointSetF32 = grid::JointSet<f32>;
pub type HeatVector = grid::HeatVector<f64>;
pub type HeatVectorF32 = grid::HeatVector<f32>;
pub type DecodeGradient = decode::DecodeGradient<f64>;
pub type DecodeGradientF32 = decode::DecodeGradient<f32>;
