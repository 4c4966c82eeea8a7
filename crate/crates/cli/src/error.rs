use std::path::PathBuf;

use mrilab::Error;

/// Command failure with the exit code it maps to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: Error,
    },

    #[error("missing prerequisite {}: {hint}", artifact.display())]
    Dependency { artifact: PathBuf, hint: String },
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DEPENDENCY: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Dependency { .. } => EXIT_DEPENDENCY,
            CliError::Core { source, .. } => match source {
                Error::Config(_) => EXIT_CONFIG,
                Error::Dataset { .. } | Error::Format { .. } => EXIT_DEPENDENCY,
                Error::Numeric(_)
                | Error::NoConvergence { .. }
                | Error::Factorization { .. }
                | Error::Degenerate(_)
                | Error::Domain(_)
                | Error::Training { .. }
                | Error::Statistics(_) => EXIT_NUMERIC,
                Error::Shape(_) | Error::Contract(_) | Error::Io { .. } => EXIT_OTHER,
            },
        }
    }
}

/// Attaches command context to library errors.
pub trait Context<T> {
    fn ctx(self, context: impl Into<String>) -> Result<T, CliError>;
}

impl<T> Context<T> for Result<T, Error> {
    fn ctx(self, context: impl Into<String>) -> Result<T, CliError> {
        self.map_err(|source| CliError::Core { context: context.into(), source })
    }
}
