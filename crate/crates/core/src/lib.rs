//! Guided mesh lifting at desk scale.
//!
//! The pipeline fits a deformable tetrahedral SDF field to an analytic
//! coarse prior, extracts a triangle surface with differentiable marching
//! tetrahedra, and refines the field with score-distillation gradients on
//! rendered normal maps, regularized by structural and semantic guidance
//! derived from the frozen prior. Everything is deterministic given seeds
//! and runs on plain f64 CPU arithmetic.

pub mod cli;
pub mod error;
pub mod field;
pub mod guidance;
pub mod image;
pub mod io;
pub mod optimize;
pub mod render;
pub mod score;
pub mod tessellate;
pub mod verify;

pub use error::{Error, Result};

/// 3D vector alias used across the crate.
pub type Vec3 = nalgebra::Vector3<f64>;
