use std::path::PathBuf;

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] mvemu::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}:{column}: {message}", file.display())]
    Parse {
        file: PathBuf,
        line: u64,
        column: usize,
        message: String,
    },
    #[error("{}: invalid JSON: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Mismatch(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Machine-readable error body printed with `--error-json`.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub kind: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub column: Option<usize>,
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => match e {
                mvemu::Error::Schema(_) | mvemu::Error::Dimension(_) => "schema",
                mvemu::Error::OutOfRange(_) => "out-of-range",
                mvemu::Error::Propriety { .. } | mvemu::Error::RankDeficient { .. } | mvemu::Error::ImproperPrior(_) => {
                    "prior"
                }
                mvemu::Error::NotPositiveDefinite(_) => "numerical",
                mvemu::Error::Optimisation { .. } => "optimisation",
                mvemu::Error::DegenerateSurface(_) => "degenerate-surface",
                mvemu::Error::Design(_) => "design",
                mvemu::Error::UnknownSimulator(_) => "unknown-simulator",
                _ => "invalid-parameter",
            },
            CliError::Io { .. } => "io",
            CliError::Parse { .. } => "parse",
            CliError::Json { .. } => "json",
            CliError::Usage(_) => "usage",
            CliError::Mismatch(_) => "mismatch",
        }
    }

    pub fn report(&self) -> ErrorReport {
        let (file, line, column) = match self {
            CliError::Parse { file, line, column, .. } => (Some(file.display().to_string()), Some(*line), Some(*column)),
            CliError::Io { path, .. } | CliError::Json { path, .. } => (Some(path.display().to_string()), None, None),
            _ => (None, None, None),
        };
        ErrorReport {
            kind: self.kind(),
            message: self.to_string(),
            file,
            line,
            column,
        }
    }
}
