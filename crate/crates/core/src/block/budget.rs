//! Memory budget to block-count planning, and cache instrumentation.

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

/// Byte budget for cached dense columns, with optional explicit block counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBudget {
    pub bytes: Option<u64>,
    pub k_lambda: Option<usize>,
    pub k_theta: Option<usize>,
}

/// Block counts and column capacities for both phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPlan {
    pub k_lambda: usize,
    pub k_theta: usize,
    /// Column indices whose `Σ` and `Ψ` columns may be resident at once in the `Λ` phase.
    pub lambda_capacity: usize,
    /// `Σ` columns that may be resident at once in the `Θ` phase.
    pub theta_capacity: usize,
}

impl MemoryBudget {
    pub fn bytes(bytes: u64) -> Self {
        MemoryBudget { bytes: Some(bytes), ..Default::default() }
    }

    pub fn blocks(k_lambda: usize, k_theta: usize) -> Self {
        MemoryBudget { bytes: None, k_lambda: Some(k_lambda), k_theta: Some(k_theta) }
    }

    /// Resolves block counts for a `p × q` problem.
    ///
    /// A `Λ` block pair needs `2⌈q/k⌉` resident indices of `16q` bytes each (one `Σ` and one
    /// `Ψ` column); a `Θ` block needs `⌈q/k⌉` columns of `8q` bytes besides one `S_xx` row of
    /// `8p` bytes.
    pub fn plan(&self, p: usize, q: usize) -> Result<BlockPlan> {
        if q == 0 {
            return config("empty output dimension");
        }
        let check_k = |k: usize, name: &str| -> Result<usize> {
            if k == 0 || k > q {
                return config(format!("{name} = {k} must lie in 1..={q}"));
            }
            Ok(k)
        };
        let (k_lambda, lambda_capacity) = match (self.bytes, self.k_lambda) {
            (Some(b), k) => {
                let cap = (b / (16 * q as u64)).min(usize::MAX as u64) as usize;
                if cap < 2 {
                    return config(format!("memory budget of {b} bytes holds fewer than 2 columns at q = {q}"));
                }
                let k = match k {
                    Some(k) => {
                        let k = check_k(k, "k_lambda")?;
                        if 2 * q.div_ceil(k) > cap {
                            return config(format!("k_lambda = {k} needs {} columns, budget holds {cap}", 2 * q.div_ceil(k)));
                        }
                        k
                    }
                    None => (1..=q).find(|&k| 2 * q.div_ceil(k) <= cap).unwrap_or(q),
                };
                (k, cap)
            }
            (None, Some(k)) => {
                let k = check_k(k, "k_lambda")?;
                (k, 2 * q.div_ceil(k))
            }
            (None, None) => return config("block mode needs a memory budget or explicit block counts"),
        };
        let (k_theta, theta_capacity) = match (self.bytes, self.k_theta) {
            (Some(b), k) => {
                let avail = b.saturating_sub(8 * p as u64);
                let cap = (avail / (8 * q as u64)).min(usize::MAX as u64) as usize;
                if cap < 1 {
                    return config(format!("memory budget of {b} bytes cannot hold one Σ column and one S_xx row"));
                }
                let k = match k {
                    Some(k) => {
                        let k = check_k(k, "k_theta")?;
                        if q.div_ceil(k) > cap {
                            return config(format!("k_theta = {k} needs {} columns, budget holds {cap}", q.div_ceil(k)));
                        }
                        k
                    }
                    None => (1..=q).find(|&k| q.div_ceil(k) <= cap).unwrap_or(q),
                };
                (k, cap)
            }
            (None, k) => {
                let k = check_k(k.unwrap_or(k_lambda), "k_theta")?;
                (k, q.div_ceil(k))
            }
        };
        Ok(BlockPlan { k_lambda, k_theta, lambda_capacity, theta_capacity })
    }
}

/// Parses sizes such as `64MB`, `1.5GB`, `512KiB` or a plain byte count.
pub fn parse_byte_size(s: &str) -> Result<u64> {
    let t = s.trim();
    let split = t.find(|c: char| c.is_ascii_alphabetic()).unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let value: f64 = num.trim().parse().map_err(|_| crate::CggmError::Config(format!("bad size '{s}'")))?;
    let mult: f64 = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 1.0,
        "k" | "kb" => 1e3,
        "m" | "mb" => 1e6,
        "g" | "gb" => 1e9,
        "kib" => 1024.0,
        "mib" => 1024.0 * 1024.0,
        "gib" => 1024.0 * 1024.0 * 1024.0,
        other => return config(format!("unknown size unit '{other}'")),
    };
    if !(value >= 0.0) || !value.is_finite() {
        return config(format!("bad size '{s}'"));
    }
    Ok((value * mult).round() as u64)
}

/// Column and row computations performed by the coordinate-descent phases.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    /// `Σ` columns computed in the `Λ` phase.
    pub lambda_sigma_cols: usize,
    /// `Ψ` columns computed in the `Λ` phase.
    pub lambda_psi_cols: usize,
    /// Of `lambda_sigma_cols`, those loaded for off-diagonal blocks.
    pub lambda_offdiag_cols: usize,
    /// `Σ` columns computed in the `Θ` phase.
    pub theta_sigma_cols: usize,
    pub sxx_rows: usize,
    pub sxx_dots: usize,
    /// Distinct `Θ` rows holding active coordinates, once per sweep.
    pub theta_rows: usize,
    /// Peak resident column indices in the `Λ` phase.
    pub lambda_high_water: usize,
    /// Peak resident `Σ` columns in the `Θ` phase.
    pub theta_high_water: usize,
    pub flagged: usize,
}

impl CacheStats {
    pub fn merge(&mut self, other: &CacheStats) {
        self.lambda_sigma_cols += other.lambda_sigma_cols;
        self.lambda_psi_cols += other.lambda_psi_cols;
        self.lambda_offdiag_cols += other.lambda_offdiag_cols;
        self.theta_sigma_cols += other.theta_sigma_cols;
        self.sxx_rows += other.sxx_rows;
        self.sxx_dots += other.sxx_dots;
        self.theta_rows += other.theta_rows;
        self.lambda_high_water = self.lambda_high_water.max(other.lambda_high_water);
        self.theta_high_water = self.theta_high_water.max(other.theta_high_water);
        self.flagged += other.flagged;
    }
}
