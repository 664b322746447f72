//! Inverse kinematics for scalable articulated skeletons.
//!
//! The crate fits a kinematic-tree skeleton to externally supplied targets
//! with a staged, damped Levenberg-Marquardt solver. Two objectives are
//! supported: 3D marker positions with per-marker offset regularization
//! (monocular pipeline) and multi-camera 2D reprojection (multiview
//! pipeline). Supporting machinery covers robust consensus triangulation,
//! marker-correspondence discovery and EM site refinement, Procrustes-based
//! evaluation metrics, a deterministic synthetic-scene generator, and the
//! text file formats shared with the `ikfit` CLI.

pub mod cameras;
pub mod error;
pub mod formats;
pub mod lm;
pub mod mapping;
pub mod math;
pub mod metrics;
pub mod residuals;
pub mod skeleton;
pub mod synth;

pub use error::{Error, Result};
