use thiserror::Error;

/// Failures grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("tuning failed: {0}")]
    Tuning(String),
    #[error("solver failed: {0}")]
    Solver(String),
    #[error("simulation failed: {0}")]
    Simulation(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) | Self::Data(_) | Self::Io { .. } => 2,
            Self::Tuning(_) => 3,
            Self::Solver(_) => 4,
            Self::Simulation(_) => 5,
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn data(e: kom_core::Error) -> Self {
        Self::Data(e.to_string())
    }

    pub fn tuning(e: kom_core::Error) -> Self {
        Self::Tuning(e.to_string())
    }

    /// Solver-stage errors; malformed inputs still count as data errors.
    pub fn solver(e: kom_core::Error) -> Self {
        use kom_core::Error as E;
        match e {
            E::AllDegreesFailed(_) | E::InvalidProblem(_) | E::NotPositiveDefinite { .. } => Self::Solver(e.to_string()),
            other => Self::Data(other.to_string()),
        }
    }
}
