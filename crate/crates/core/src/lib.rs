//! Guidewire shape reconstruction from orthogonal binary masks.
//!
//! The crate is organised as a pipeline:
//!
//! 1. [`skeleton`] thins a segmented mask, extracts the backbone path and
//!    samples equally spaced points from the distal tip.
//! 2. [`geometry`] models pinhole cameras and triangulates corresponded
//!    points from the top and side views with a linear (DLT) solve.
//! 3. [`spline`] fits a cubic spline through the triangulated points and
//!    resamples it at equal arc length.
//! 4. [`fgrn`] is a small convolutional regressor that predicts the same
//!    3D shape from a single view.
//! 5. [`metrics`] compares curves (MaxED, METE, MERS, per-segment profile).
//!
//! [`synth`] produces seeded synthetic datasets for all of the above, and
//! [`pipeline`] wires the stages together for the command-line tool.

pub mod curve;
pub mod fgrn;
pub mod geometry;
pub mod metrics;
pub mod pgm;
pub mod pipeline;
pub mod skeleton;
pub mod spline;
pub mod synth;

pub use curve::{Curve3D, CurveError};
pub use geometry::{CameraExtrinsics, CameraIntrinsics, CameraModel, CameraRig, GeometryError, View};
pub use skeleton::{BinaryMask, PixelPath, SkeletonError};
pub use spline::{SplineError, SplineModel};

/// Millimetres per metre, used where metrics and losses switch units.
pub const MM_PER_M: f64 = 1000.0;
