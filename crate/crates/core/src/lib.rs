//! Training-free scoring of untrained RNN and BERT-style transformer
//! architectures, plus the rank statistics used to evaluate how well those
//! scores predict trained performance.
//!
//! The crate is organized along the evaluation pipeline:
//!
//! - [`autodiff`] — a minimal reverse-mode engine over dense `f64` tensors,
//!   with the small dense eigen/SVD routines the metrics need.
//! - [`genome`] — architecture descriptions for both search spaces: cell-DAG
//!   RNNs and a grid of BERT-style encoders, with sampling, validation, a
//!   stable text format, and closed-form parameter counts.
//! - [`netbuild`] — turns a genome into an executable network at random
//!   initialization and exposes the intermediate quantities (hidden states,
//!   attention maps, activation codes) the metrics consume.
//! - [`metrics`] — the training-free metrics themselves.
//! - [`stats`] — Kendall/Spearman rank correlation and report assembly.

pub mod autodiff;
pub mod genome;
pub mod metrics;
pub mod netbuild;
pub mod stats;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A value outside an operation's mathematical domain (e.g. log of a
    /// non-positive number).
    #[error("domain error: {0}")]
    Domain(String),
    /// An index out of range (targets, node ids, token ids).
    #[error("index error: {0}")]
    Index(String),
    /// A caller-side contract violation (preconditions on arguments).
    #[error("contract error: {0}")]
    Contract(String),
    /// Numerical failure: NaN/Inf in a forward pass, iteration cap reached.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A genome that violates its structural invariants.
    #[error("invalid genome: {0}")]
    Validation(String),
    /// Malformed text in a serialized genome or benchmark record.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    /// Random generation failed to produce a valid artifact within the
    /// retry budget.
    #[error("generation error: {0}")]
    Generation(String),
}

impl Error {
    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse { location: location.into(), message: message.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
