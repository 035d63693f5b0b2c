//! Tape-based reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Operations evaluate eagerly on a [`Tape`] and return [`Var`] handles.
//! [`Tape::backward`] replays the tape in reverse and accumulates gradients
//! into every leaf that requires one.
//!
//! ```
//! use elp_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(&Tensor::scalar(3.0).unwrap());
//! let y = tape.mul(x, x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), Some(&[6.0][..]));
//! ```

mod error;
pub mod gradcheck;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{finite_difference_check, finite_difference_check_sampled, GradCheckReport};
pub use tape::{OpKind, OpTag, Tape, Var};
pub use tensor::Tensor;
