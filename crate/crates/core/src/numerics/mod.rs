//! Deterministic numerical building blocks shared by every other module.

pub mod io;
pub mod kernel;
pub mod linalg;
pub mod matrix;
pub mod rng;
pub mod special;
pub mod tape;

pub use kernel::{median_heuristic, rbf_kernel, KernelMatrix};
pub use linalg::{center, center_columns, procrustes, svd, AlignmentSolution, Centering, Svd};
pub use matrix::Matrix;
pub use rng::{dirichlet_sample, RngStream};
pub use tape::{Gradients, Tape, Var};
