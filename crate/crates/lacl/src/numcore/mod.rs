//! Dense f64 kernels and a reverse-mode differentiation tape.
//!
//! Everything downstream (encoder, losses, scorers) computes through this
//! module. All math is 64-bit; normalizations are guarded by [`EPS_NORM`] and
//! report a typed error instead of producing NaN.

mod oracle;
mod tape;
mod tensor;

pub use oracle::{finite_diff_gradient, max_rel_err, FD_STEP, REL_ERR_FLOOR};
pub use tape::{NodeId, Tape};
pub use tensor::{cosine_between, cosine_similarity, dot, l2_norm, l2_normalize, mean_pool, Tensor};

/// Norm guard threshold for every normalization in the crate.
pub const EPS_NORM: f64 = 1e-12;

/// Variance ridge inside layer norm.
pub const EPS_LN: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum NumError {
    #[error("empty-sequence: pooling over zero positions")]
    EmptySequence,
    #[error("degenerate-vector: norm at or below {EPS_NORM:e}")]
    DegenerateVector,
    #[error("non-scalar-loss: backward root has shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward-consumed: tape already ran backward; build a fresh tape")]
    BackwardConsumed,
    #[error("non-finite-objective: {0}")]
    NonFiniteObjective(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape-mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid argument to {op}: {detail}")]
    InvalidArg { op: &'static str, detail: String },
}

impl NumError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        NumError::ShapeMismatch { op, detail: detail.into() }
    }

    pub(crate) fn arg(op: &'static str, detail: impl Into<String>) -> Self {
        NumError::InvalidArg { op, detail: detail.into() }
    }
}
