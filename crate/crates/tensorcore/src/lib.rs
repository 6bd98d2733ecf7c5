//! Minimal reverse-mode automatic differentiation over dense row-major
//! tensors.
//!
//! The primitive set covers exactly what the Dyck and SCAN transformers
//! need: matrix multiply, elementwise add/multiply/scale, row-broadcast
//! bias, GELU, embedding lookup, layer normalization, multi-head attention
//! scores, masked softmax, head mixing, and cross-entropy with ignored rows.
//!
//! ```
//! use grokwatch_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let sq = tape.mul(x, x).unwrap();
//! let grads = tape.backward(sq).unwrap();
//! assert_eq!(grads.get(x).item(), 6.0);
//! ```

mod error;
pub mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use scalar::Scalar;
pub use tape::{AttnMask, Gradients, HeadLayout, Tape, Var, MASK_PENALTY};
pub use tensor::Tensor;
