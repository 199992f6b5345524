//! Reverse-mode automatic differentiation over dense row-major arrays.
//!
//! A [`Tape`] records every forward operation; [`Tape::backward`] walks the
//! record in reverse and returns [`Gradients`] for the trainable leaves.
//!
//! ```
//! use nerfcodec_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::<f32>::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.square(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(tape.value(y).item(), 9.0);
//! assert_eq!(grads.wrt(x).item(), 6.0);
//! ```

mod error;
mod kernels;
mod real;
mod tape;
mod tensor;

#[cfg(any(test, feature = "oracle"))]
pub mod fd;

pub use error::{AutodiffError, Result};
pub use kernels::Boundary;
pub use real::Real;
pub use tape::{sigmoid, softplus, Gradients, Tape, Var};
pub use tensor::Tensor;
