//! Crate-wide error type and result alias.

use thiserror::Error;

/// Errors produced by tensor operations, model construction, training and IO.
#[derive(Error, Debug)]
pub enum Error {
    /// Two operands (or an operand and an expected layout) disagree on shape.
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },

    /// An operation received a tensor whose rank or dimensions are unusable.
    #[error("invalid shape for {op}: {shape} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: String,
        reason: String,
    },

    /// `log` evaluated on a non-positive value without the epsilon guard.
    #[error("log domain violation at flat index {index}: value {value}")]
    LogDomain { index: usize, value: f32 },

    /// Backward was started from a tensor that is not a scalar.
    #[error("backward requires a scalar loss, got shape {shape}")]
    NonScalarLoss { shape: String },

    /// A caller broke a documented API contract (e.g. passed a tensor that
    /// still tracks gradients where a detached one is required).
    #[error("contract violation in {op}: {reason}")]
    ContractViolation { op: &'static str, reason: String },

    /// Configuration value outside its documented range, or unparseable input.
    #[error("configuration error: {0}")]
    Config(String),

    /// A label map contained a class id outside the known range.
    #[error("unknown class id {id} at pixel ({y}, {x}); {known} classes known")]
    UnknownClass {
        id: u16,
        y: usize,
        x: usize,
        known: u16,
    },

    /// A metric group contained no scorable classes.
    #[error("metric group '{group}' has no scorable classes")]
    EmptyGroup { group: &'static str },

    /// A loss component evaluated to a non-finite value.
    #[error("non-finite value in loss component '{component}': {value}")]
    NonFiniteLoss { component: &'static str, value: f32 },

    /// A model archive or checkpoint could not be read or failed validation.
    #[error("archive error: {0}")]
    Archive(String),

    /// A dataset file could not be read or failed validation.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// The gradient audit found a non-zero gradient on a parameter that must
    /// stay untouched by the restricted loss set.
    #[error("gradient audit failure: {0}")]
    AuditFailure(String),

    /// A finite-difference verification case exceeded its tolerance.
    #[error("gradient verification failed: {0}")]
    GradCheck(String),

    /// An ablation variant id is not in the registry.
    #[error("unknown ablation variant '{0}'")]
    UnknownVariant(String),

    /// Underlying filesystem failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
