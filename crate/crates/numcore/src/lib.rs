//! Minimal dense-tensor engine: a reverse-mode tape, an Adam optimizer,
//! finite-difference gradient checking and a binary checkpoint format.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use params::{Param, ParamStore};
pub use tape::{AttentionLayout, Gradients, Segments, Tape, Trainable, Unary, Var, PROB_EPS};
pub use tensor::{Real, Tensor};
