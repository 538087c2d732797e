//! A deliberately small tensor engine: dense row-major tensors, a tape that
//! records a fixed set of differentiable ops, Adam, and a binary checkpoint
//! format.
//!
//! The engine is generic over [`Element`] so the same graph code runs in
//! `f32` for training and `f64` for finite-difference gradient checks.
//! There is no general broadcasting. Besides same-shape elementwise ops the
//! only mixed-shape rules are the named bias ops ([`Graph::add_bias`],
//! [`Graph::add_channel_bias`]) and multiplication by a constant scalar.

mod adam;
mod checkpoint;
mod element;
mod error;
mod gradcheck;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, MAGIC};
pub use element::{DType, Element};
pub use error::{NumericsError, Result};
pub use gradcheck::{check_against, grad_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{Graph, Var};
pub use params::ParamSet;
pub use tensor::Tensor;
