//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Ingestion matched zero edges for the requested relation.
    #[error("no `{relation}` edges found in {path}")]
    EmptyOntology { relation: String, path: PathBuf },

    /// The graph contains a directed cycle. The payload holds one witness
    /// cycle as concept names, in traversal order.
    #[error("hierarchy contains a cycle: {}", .0.join(" -> "))]
    CycleDetected(Vec<String>),

    /// Negative sampling kept drawing pairs that are true under the closure.
    #[error("negative sampling gave up after {retries} draws; the hierarchy is too dense")]
    NegativeSamplingExhausted { retries: usize },

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    /// A phrase resolved to zero embeddable tokens.
    #[error("phrase has no embeddable tokens")]
    EmptyPhrase,

    #[error("non-finite gradient for row {row}")]
    NonFiniteGradient { row: u32 },

    /// Training produced a NaN or infinite loss term.
    #[error("non-finite {component} loss at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        component: &'static str,
        epoch: usize,
        step: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A line in an input file could not be parsed.
    #[error("{path}:{line}: {reason}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    /// A term in an auxiliary file does not exist in the hierarchy.
    #[error("unknown concept `{term}` in {path}")]
    UnknownConcept { term: String, path: PathBuf },

    #[error("bad model file {path}: {reason}")]
    ModelFormat { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
