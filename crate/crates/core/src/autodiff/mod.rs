//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records operations as they run; [`Tape::backward`] walks the
//! record in reverse and accumulates gradients. Parameters live outside the
//! tape in a [`ParamStore`] and are bound as leaves for each forward pass.

mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use params::{Binding, ParamId, ParamStore};
pub use tape::{window_pairs, Tape, Var};
pub use tensor::Tensor;

