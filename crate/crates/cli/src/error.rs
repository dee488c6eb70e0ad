use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Training,
    Evaluation,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Pipeline(#[from] placerec::Error),

    /// Failure inside a training or evaluation run. Config and data errors
    /// keep their own codes; anything else takes the phase code.
    #[error("{phase:?} failed: {source}")]
    Failed {
        phase: Phase,
        #[source]
        source: placerec::Error,
    },

    #[error("{path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Pipeline(e) => e.exit_code(),
            CliError::Failed { phase, source } => match source.exit_code() {
                c @ (2 | 3) => c,
                _ if *phase == Phase::Training => 4,
                _ => 5,
            },
            CliError::Output { .. } => 3,
            CliError::GradCheck(_) => 4,
        }
    }

    pub fn training(source: placerec::Error) -> Self {
        CliError::Failed {
            phase: Phase::Training,
            source,
        }
    }

    pub fn evaluation(source: placerec::Error) -> Self {
        CliError::Failed {
            phase: Phase::Evaluation,
            source,
        }
    }

    pub fn output(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Output {
            path: path.into(),
            source,
        }
    }
}
