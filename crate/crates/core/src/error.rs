use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("no parse found for generic {0:?}")]
    UnparsableGeneric(String),

    #[error("logical form has kind {found}, expected {expected}")]
    InvalidKind { expected: &'static str, found: &'static str },

    #[error("subtype provider failed: {0}")]
    SubtypeProvider(String),

    #[error("template {template} produced no prompts: {reason}")]
    NoPromptsForTemplate { template: String, reason: String },

    #[error("constraint compilation failed: {0}")]
    ConstraintCompile(String),

    #[error("scorer mismatch: {0}")]
    ScorerMismatch(String),

    #[error("ranking failed: {0}")]
    Ranking(String),

    #[error("provider failed: {0}")]
    Provider(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("missing gold labels for {} exemplar(s): {}", .0.len(), .0.join(", "))]
    MissingLabel(Vec<String>),

    #[error("input mismatch: {0}")]
    InputMismatch(String),

    #[error("bridge protocol error: {0}")]
    Bridge(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

pub(crate) trait IoContext<T> {
    fn io_context(self, path: &Path) -> Result<T>;
}

impl<T> IoContext<T> for std::result::Result<T, std::io::Error> {
    fn io_context(self, path: &Path) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

pub(crate) trait JsonContext<T> {
    fn json_context(self, context: impl FnOnce() -> String) -> Result<T>;
}

impl<T> JsonContext<T> for std::result::Result<T, serde_json::Error> {
    fn json_context(self, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| Error::Json {
            context: context(),
            source,
        })
    }
}
