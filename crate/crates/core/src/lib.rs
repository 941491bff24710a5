//! Degradation-aware odometry fusion.
//!
//! The crate switches a fused pose output between a LiDAR-inertial (LIO) and
//! a visual-inertial (VIO) pose stream. LiDAR degradation is detected from
//! consecutive-scan ICP residuals and feature counts, the VIO frame is aligned
//! to the output frame with a robust SE(3) solve, and hand-offs are smoothed on
//! the group manifold. A deterministic scenario simulator and trajectory
//! metrics close the loop.

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod cli;
pub mod degeneracy;
pub mod error;
pub mod eval;
pub mod format;
pub mod geom;
pub mod pose;
pub mod scan;
pub mod sim;
pub mod supervisor;
pub mod tum;

pub use error::{Error, Result};
pub use geom::{Covariance6, Rotation, Transform, Twist};
pub use pose::Pose;
