//! Minimal reverse-mode automatic differentiation over dense arrays.
//!
//! A [`Tape`] is rebuilt for every forward pass: each primitive appends a
//! node holding its output, and [`Tape::backward`] walks the nodes in reverse
//! to accumulate adjoints. Trainable tensors live in a [`ParamStore`] and are
//! bound to a tape with [`Tape::param`]; [`ParamStore::adam_step`] applies the
//! optimizer update.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{check_all_primitives, check_gradients, GradCheck, REL_ERR_FLOOR};
pub use params::{AdamConfig, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NdiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward seed must be a scalar, got shape {shape:?}")]
    NonScalarSeed { shape: Vec<usize> },
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("malformed parameter file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
