use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
///
/// The variants map onto the process exit codes used by the command line
/// front end (see [`Error::exit_code`]).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("parameter not found: {0}")]
    Lookup(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty scene: every slot is masked")]
    EmptyScene,

    #[error("degenerate scene: pooled descriptor has zero norm")]
    DegenerateScene,

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 training, 5 evaluation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Generation(_) | Error::Parse { .. } | Error::Io { .. } => 3,
            Error::Format(_) | Error::Lookup(_) => 5,
            _ => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
