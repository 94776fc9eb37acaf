//! Detecting knowledge distillation between classifiers without access to
//! training data.
//!
//! The crate trains desk-scale batch-normalized MLP teachers, distills
//! students from them, synthesizes probe inputs from a student's own
//! batch-norm statistics, and ranks candidate teachers by how closely their
//! outputs align with the student's.

pub mod baselines;
pub mod distill;
pub mod error;
pub mod models;
pub mod numerics;
pub mod pipeline;
pub mod scores;
pub mod synthesis;

pub use error::{Error, Result};
pub use numerics::{Matrix, RngStream};
