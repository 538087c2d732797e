//! Geometry-aware caption augmentation and loss reweighting for a small
//! text-conditioned diffusion model, together with the synthetic dataset,
//! concept detectors and evaluation metrics needed to measure how well
//! implicit concepts are erased.

pub mod dataset;
pub mod detector;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod runner;
pub mod vocab;

pub use error::{GeomError, Result};
