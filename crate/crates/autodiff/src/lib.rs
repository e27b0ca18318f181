//! Dense `f64` tensors with tape-based reverse-mode differentiation, an Adam
//! optimizer, and a flat checkpoint container.
//!
//! ```
//! use fsgan_autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let grads = tape.backward(x.square()).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod error;
pub mod kernels;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use error::{Result, TensorError};
pub use tape::{BatchNormMode, BatchStats, Gradients, Padding, Tape, Var};
pub use tensor::{standard_normal, Tensor};
