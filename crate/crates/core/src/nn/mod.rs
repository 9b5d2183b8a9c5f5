//! Dense reverse-mode autodiff and the GF / LGF / LLGF back ends.

mod backend;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use backend::{
    blstm_layer, cross_entropy, forward_backend, forward_batch, score_from_logits, ForwardOutput, Logits,
};
pub use params::{BackendKind, ModelParams, ParamVars, BN_MOMENTUM};
pub use tape::{BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use params::Initializer;
pub(crate) use tape::softmax;
