//! Numeric kernels: sparse storage, Cholesky, conjugate gradient and covariance products.

pub mod cg;
pub mod cholesky;
pub mod kernels;
mod sparse;

pub use cg::{cg_solve, CgOutcome, LinearOperator};
pub use cholesky::{sparse_cholesky_logdet, CholeskyFactor, LogDet, SymbolicCholesky};
pub use kernels::{dot, implicit_sxx_apply, soft_threshold, sxx_row, ReductionMode, SxxRow};
pub use sparse::SparseMatrix;

/// Dense column-major matrix.
pub type DenseMatrix = nalgebra::DMatrix<f64>;
/// Dense column vector.
pub type Vector = nalgebra::DVector<f64>;
