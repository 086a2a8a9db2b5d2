//! Training engine that keeps the backward pass honest while storing
//! activations as bit-packed stochastic quantizations.
//!
//! The forward pass always runs in full precision; compression only decides
//! what gets *saved* for backward. Saved tensors are split into fixed-size
//! groups, each group normalized by its own range and quantized with
//! stochastic rounding, so dequantized values are unbiased estimates of the
//! originals. Everything downstream (layer backward rules, bit allocation,
//! variance profiling) builds on that contract.

#![forbid(unsafe_code)]

pub mod alloc;
pub mod graph;
pub mod layers;
pub mod loss;
pub mod profile;
pub mod quantize;
pub mod rng;
pub mod tensor;

use std::fmt;

/// Crate-wide error type. Variants carry enough context to be actionable
/// from a CLI without string matching.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shapes disagree with what an operation requires.
    ShapeMismatch { expected: String, got: String },
    /// A scalar argument is outside its documented range.
    BadArgument { what: &'static str, detail: String },
    /// A serialized context is malformed; offset is the first bad byte.
    Corrupt { offset: usize, what: String },
    /// An allocation problem admits no feasible assignment.
    Infeasible { need: u64, budget: u64 },
    /// Numeric degeneracy that the caller must handle (e.g. zero spread).
    Degenerate { what: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { expected, got } => {
                write!(f, "shape mismatch: expected {expected}, got {got}")
            }
            Error::BadArgument { what, detail } => write!(f, "bad argument {what}: {detail}"),
            Error::Corrupt { offset, what } => {
                write!(f, "corrupt stream at byte {offset}: {what}")
            }
            Error::Infeasible { need, budget } => {
                write!(f, "infeasible bit budget: need at least {need}, have {budget}")
            }
            Error::Degenerate { what } => write!(f, "degenerate input: {what}"),
        }
    }
}

impl std::error::Error for Error {}

pub type Result<T> = std::result::Result<T, Error>;
