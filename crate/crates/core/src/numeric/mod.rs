//! Dense tensors with hand-written forward and backward passes, the Adam
//! optimizer, seeded random streams and finite-difference oracles.

mod finite_diff;
mod optim;
mod rng;
mod tape;
mod tensor;

pub mod ops;

pub use finite_diff::{central_difference, central_difference_at, max_relative_error, relative_error, FD_STEP, REL_FLOOR};
pub use optim::{Adam, Parameter};
pub use rng::{mix64, RngStream};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Tensor, MAX_RANK};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("{op}: shape mismatch, expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{op}: {what}, found shape {found:?}")]
    InvalidShape {
        op: &'static str,
        what: &'static str,
        found: Vec<usize>,
    },
    #[error("shape {shape:?} needs {} values, got {len}", .shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("tensor rank {0} exceeds the maximum of 4")]
    RankTooHigh(usize),
    #[error("backward requested for a value with no forward record on this tape")]
    MissingForwardRecord,
    #[error("non-finite gradient in parameter {index}; optimizer step aborted")]
    NonFiniteGradient { index: usize },
}
