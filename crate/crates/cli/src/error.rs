use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Core(#[from] pgdeblur::Error),

    #[error("solver failed: {0}")]
    Solver(String),
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io { context: context.into(), source }
    }
}
