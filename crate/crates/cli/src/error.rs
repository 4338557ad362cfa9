use thiserror::Error;

/// Failure of a CLI invocation, split by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Exit code 2.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// Exit code 3.
    #[error("{phase} failed: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: profed_core::Error,
    },
}

impl CliError {
    pub fn phase(phase: &'static str) -> impl FnOnce(profed_core::Error) -> CliError {
        move |source| match source {
            profed_core::Error::Phase { phase, source } => CliError::Phase {
                phase,
                source: *source,
            },
            source => CliError::Phase { phase, source },
        }
    }

    pub fn io(phase: &'static str) -> impl FnOnce(std::io::Error) -> CliError {
        move |e| CliError::Phase {
            phase,
            source: e.into(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Phase { .. } => 3,
        }
    }
}
