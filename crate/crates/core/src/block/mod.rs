//! Memory-bounded block coordinate descent.

pub mod budget;
pub mod columns;
pub mod engine;
pub mod partition;

pub use budget::{parse_byte_size, BlockPlan, CacheStats, MemoryBudget};
pub use columns::{CgColumns, ColumnSource, DenseColumns};
pub use engine::{active_theta_rows, block_cd_theta, block_gradient_pass, block_newton_lambda, BlockLambdaResult, BlockThetaResult, GradientPass};
pub use partition::{lambda_offdiag_count, partition_lambda, partition_theta, random_balanced_partition, theta_row_block_count, BlockPartition};
