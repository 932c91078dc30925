//! Small dense-tensor engine: a reverse-mode autodiff tape, the layer
//! primitives a transformer encoder needs, Adam, and a cosine schedule with
//! warm restarts.
//!
//! ```
//! use pianoform_numerics::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::new([2], vec![1.0, 2.0]).unwrap());
//! let loss = x.mul(x).unwrap().sum().unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
//! ```

mod error;
mod optim;
mod scalar;
mod schedule;
mod tape;
mod tensor;

pub use error::{NumericsError, Result};
pub use optim::{adam_step, AdamState};
pub use scalar::Float;
pub use schedule::{lr_at, LrSchedule};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
