//! Dense reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles during the
//! forward pass. [`Tape::backward`] then replays the record in reverse and
//! applies each primitive's vector-Jacobian product exactly once.
//!
//! ```
//! use pacbayes::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
//! let y = x.square().unwrap().sum().unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[2.0, 4.0]);
//! ```

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::{logsumexp, Tensor};

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum AdError {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
}
