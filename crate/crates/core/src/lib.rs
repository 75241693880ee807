//! Hybrid under-canopy navigation for row-crop robots.
//!
//! The crate is organised along the data flow of the stack:
//!
//! * [`model`]: kinodynamic vehicle model with traction coefficients, shared by
//!   every other module.
//! * [`world`] and [`sim`]: ground-truth field, plant physics and sensor synthesis.
//! * [`estimator`]: moving-horizon estimation of pose and traction, followed by
//!   an IMU-rate EKF.
//! * [`perception`]: LiDAR crop-row fitting, lane filter and the in-row classifier.
//! * [`supervisor`]: failure detection, mode arbitration and reference generation.
//! * [`control`]: the MPC path tracker.
//! * [`harness`]: scenarios, metrics, logs and plots.

// Validation uses `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod error;
pub mod estimator;
pub mod geometry;
pub mod harness;
pub mod model;
pub mod perception;
pub mod rng;
pub mod sim;
pub mod supervisor;
pub mod world;

pub use error::{Error, Result};
