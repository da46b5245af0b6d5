//! Radiance-field reconstruction for outdoor scan rigs.
//!
//! Trains a neural radiance field from posed images plus lidar sweeps,
//! models the sky with a direction-only network, compensates per-image
//! exposure with a decoded affine color transform, and extracts depth maps,
//! point clouds, and meshes from the trained field.
//!
//! Everything is CPU-only and deterministic: the same scene, config, and
//! seed produce bitwise-identical checkpoints and reports.

pub mod error;
pub mod eval;
pub mod field;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod math;
pub mod render;
pub mod synth;
pub mod tape;
pub mod train;

pub use error::Error;
pub use eval::MetricReport;
pub use field::{ExposureMode, ExposureTransform, FieldConfig, FieldOutput, FieldParams};
pub use geometry::{Camera, EncodedPoint, LidarSample, Ray};
pub use losses::{EpsilonSchedule, LosKernel, LossReport, LossWeights};
pub use math::Real;
pub use render::{RaySamples, RenderedPixel};
pub use synth::{SceneBundle, SceneSpec};
pub use train::{TrainConfig, TrainOutput};

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
