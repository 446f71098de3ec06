use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    /// Invalid configuration or command line input.
    #[error("{0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Module {
        stage: &'static str,
        #[source]
        source: stopbound_core::Error,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RunError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Module { source: stopbound_core::Error::Parameter(_), stage: "setup" } => 2,
            _ => 1,
        }
    }

    pub(crate) fn at(stage: &'static str) -> impl FnOnce(stopbound_core::Error) -> RunError {
        move |source| RunError::Module { stage, source }
    }
}
