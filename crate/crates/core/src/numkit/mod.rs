//! Dense tensors, a reverse-mode gradient tape, finite-difference checking,
//! Adam, and the seeded generator every stochastic step draws from.

mod adam;
mod gradcheck;
mod rng;
mod tape;
mod tensor;

use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport, FD_STEP};
pub use rng::{SeedRng, RngState};
pub use tape::{softmax_rows_plain, CustomOp, ElementwiseKind, Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tensor::gemm_nt;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: numeric domain error: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
}

impl NumError {
    pub(crate) fn shape_pair(op: &'static str, a: &[usize], b: &[usize]) -> Self {
        NumError::Shape { op, detail: format!("{a:?} vs {b:?}") }
    }
}
