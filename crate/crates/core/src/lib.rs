//! Sparse conditional Gaussian graphical models fitted by alternating Newton coordinate
//! descent, with a memory-bounded block variant.

pub mod active;
pub mod block;
pub mod datagen;
pub mod error;
pub mod lambda_step;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod solver;
pub mod theta_step;

pub use error::{CggmError, Result};
pub use linalg::{DenseMatrix, SparseMatrix, Vector};
pub use model::{CggmModel, Dataset, DerivedState, Hyperparams, SufficientStats};
