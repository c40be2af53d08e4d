//! Minimal dense-array engine with define-by-run reverse-mode differentiation.
//!
//! Values are plain [`Tensor`]s. A [`Tape`] records every operation applied to
//! its [`Var`] handles; [`Tape::backward`] replays the record in reverse and
//! accumulates gradients on the leaves that asked for them. Only the handful
//! of primitives the forecaster needs are provided, all in `f64`.

mod check;
mod tape;
mod tensor;

pub use check::{check_gradients, check_gradients_at, relative_error, GradCheckReport, FD_STEP};
pub use tape::{Tape, Var};
pub use tensor::{broadcast_shape, Tensor};
pub(crate) use tape::{ema_forward, mean_std};

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum NdError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
}

impl NdError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        NdError::Shape { op, detail: detail.into() }
    }

    pub(crate) fn contract(detail: impl Into<String>) -> Self {
        NdError::Contract(detail.into())
    }
}
