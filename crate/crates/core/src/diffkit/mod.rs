//! Minimal reverse-mode automatic differentiation over float64 tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Leaves are created with
//! [`Tape::param`] (gradient tracked) or [`Tape::constant`]; each operation
//! records its own backward rule, and [`Tape::backward`] walks the nodes in
//! reverse insertion order.

mod tape;
mod tensor;


pub use tape::{Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0}: empty input")]
    Empty(&'static str),
}

impl DiffError {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        Self::Shape { op, detail }
    }
}
