//! Minimal dense-tensor autodiff used by the tokenizer and the transformer.

pub mod params;
pub mod tape;
pub mod tensor;

pub use params::{Grads, ParamId, ParamStore};
pub use tape::{Tape, Var, IGNORE, NO_BUCKET};
pub use tensor::Tensor;
