//! Reverse-mode automatic differentiation over dense CPU tensors.
//!
//! A [`Tape`] records operations on [`Var`]s; [`Tape::backward`] returns
//! gradients for the trainable [`ParamStore`] entries that took part.
//! Everything is single-threaded and deterministic.

mod float;
pub mod gradcheck;
mod ops;
pub mod optim;
mod params;
mod tape;
mod tensor;

pub use float::Float;
pub use ops::basic::broadcast_shape;
pub use ops::nn::mask_split;
pub use optim::{Adam, AdamConfig};
pub use params::{Group, Init, ParamId, ParamStore};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
