use cggm::CggmError;
use thiserror::Error;

/// Process exit codes of the `cggm` binary.
pub mod exit {
    pub const SUCCESS: u8 = 0;
    pub const USAGE: u8 = 2;
    pub const NOT_CONVERGED: u8 = 3;
    pub const DATA: u8 = 4;
    pub const NUMERICAL: u8 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or parameter values.
    #[error("{0}")]
    Usage(String),
    /// Unreadable, malformed or inconsistent input files.
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Data(_) | CliError::Io { .. } => exit::DATA,
            CliError::Numerical(_) => exit::NUMERICAL,
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }
}

impl From<CggmError> for CliError {
    fn from(e: CggmError) -> Self {
        let msg = e.to_string();
        match e {
            CggmError::Config(_) => CliError::Usage(msg),
            CggmError::Data(_) | CggmError::Structural(_) => CliError::Data(msg),
            CggmError::NotPositiveDefinite | CggmError::Numerical(_) | CggmError::StaleState => CliError::Numerical(msg),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(CliError::from(CggmError::Config("k".into())).exit_code(), exit::USAGE);
        assert_eq!(CliError::from(CggmError::Data("rows".into())).exit_code(), exit::DATA);
        assert_eq!(CliError::from(CggmError::Structural("shape".into())).exit_code(), exit::DATA);
        assert_eq!(CliError::from(CggmError::NotPositiveDefinite).exit_code(), exit::NUMERICAL);
        assert_eq!(CliError::from(CggmError::Numerical("cg".into())).exit_code(), exit::NUMERICAL);
        let io = CliError::io(std::path::Path::new("x"), std::io::Error::other("gone"));
        assert_eq!(io.exit_code(), exit::DATA);
    }
}
