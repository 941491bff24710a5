use crate::geom::{Covariance6, Transform};

/// Timestamped pose estimate with its 6x6 uncertainty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub timestamp: f64,
    pub transform: Transform,
    pub covariance: Covariance6,
}

impl Pose {
    pub fn new(timestamp: f64, transform: Transform, covariance: Covariance6) -> Self {
        Pose {
            timestamp,
            transform,
            covariance,
        }
    }

    pub fn with_default_covariance(timestamp: f64, transform: Transform) -> Self {
        Pose::new(timestamp, transform, Covariance6::default_pose())
    }
}
