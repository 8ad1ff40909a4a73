//! Crate-wide error type.
//!
//! Every fallible operation in the crate returns [`Result`]. Tensor and graph
//! construction errors carry the name of the offending operation so a failure
//! deep inside a model build points at the exact op that rejected its inputs.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands disagree on shape where the op requires agreement.
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An op received a shape it does not support (wrong rank, bad axis, ...).
    #[error("{op}: unsupported shape {shape:?}: {detail}")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },

    /// Mixed f32/f64 operands.
    #[error("{op}: dtype mismatch: {lhs:?} vs {rhs:?}")]
    DtypeMismatch {
        op: &'static str,
        lhs: crate::tensor::Dtype,
        rhs: crate::tensor::Dtype,
    },

    /// Input outside the mathematical domain of the op (log of a
    /// non-positive value, sqrt of a negative value, ...).
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },

    /// Gradients are only defined for scalar-valued roots.
    #[error("gradient root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    /// A computed quantity stopped being finite.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// An editor step produced a non-finite gradient or parameter.
    #[error("edit step {step}: non-finite {what}")]
    NonFiniteInEdit { step: usize, what: &'static str },

    /// Structurally valid but semantically rejected configuration.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// An editable-group name that the model does not define.
    #[error("unknown parameter group: {0:?}")]
    UnknownGroup(String),

    /// A collection that must be non-empty was empty.
    #[error("{0} must not be empty")]
    Empty(&'static str),

    /// The normalized-gradient editor cannot divide by a zero first-step norm.
    #[error("scaled_gd: gradient norm is zero on the first edit step")]
    ZeroGradientNorm,

    /// The constraint value must be comparable against zero.
    #[error("constraint value is NaN")]
    NanConstraint,

    /// Outer-loop training produced a non-finite loss or parameter.
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    /// No candidate in a tuning grid met the required success rate.
    #[error("no tuning candidate reached the success threshold (best rate {best_rate:.4})")]
    InfeasibleGrid { best_rate: f64 },

    /// Malformed on-disk data; `offset` is the byte position of the problem.
    #[error("{path}: {detail} (at byte {offset})")]
    Format {
        path: String,
        offset: u64,
        detail: String,
    },

    /// Index out of bounds for a gather/scatter or dataset access.
    #[error("{op}: index {index} out of bounds for length {len}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        len: usize,
    },

    /// A descriptor matrix with zero total variance cannot be decomposed
    /// into explained-variance ratios.
    #[error("descriptor matrix has zero total variance after centering")]
    DegenerateMatrix,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
