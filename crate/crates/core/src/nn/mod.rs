//! Toy-scale dual-branch embedding network with reverse-mode gradients.

pub mod checkpoint;
pub mod model;
pub mod tape;
pub mod tensor;

pub use model::{
    analytic_parameter_count, conv_stem, cross_attention_block, grad, mha, projection_head, Bound, Embedding,
    Encoder, EncoderConfig, Fusion, Mode, ModelInput, ParamGrads, Params,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
