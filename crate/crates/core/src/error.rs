use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("bad checkpoint format: {0}")]
    Format(String),
    #[error("infeasible pruning plan: {0}")]
    InfeasiblePlan(String),
    #[error("training diverged at step {step}{}", .checkpoint.as_ref().map(|p| format!(" (last finite state saved to {})", p.display())).unwrap_or_default())]
    Divergence { step: usize, checkpoint: Option<PathBuf> },
    #[error("analysis failed: {0}")]
    Analysis(String),
    #[error("export failed: {0}")]
    Export(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-parsable category used in CLI error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Validation(_) => "validation",
            Error::Input(_) => "input",
            Error::Numeric(_) => "numeric",
            Error::Format(_) => "format",
            Error::InfeasiblePlan(_) => "infeasible-plan",
            Error::Divergence { .. } => "divergence",
            Error::Analysis(_) => "analysis",
            Error::Export(_) => "export",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
