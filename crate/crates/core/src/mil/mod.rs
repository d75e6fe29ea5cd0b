//! Gated-attention MIL network with hand-written backpropagation.
//!
//! Shapes follow the row convention: a bag is a `J x K` matrix `H`, the
//! adapter output `Z` is `J x 256`, and the attention hidden layer is
//! `J x 64`.

mod model;
mod optim;
mod train;

pub use model::{
    attention_scores, bce_with_logit, DropoutMasks, ForwardCache, Gradients, MilError, MilModel, Nonlinearity,
    Params, Prediction, ATTENTION_DIM, PARAM_NAMES,
};
pub use optim::{cosine_lr, AdamW};
pub use train::{
    config_hash, from_checkpoint, predict, stratified_subsample, to_checkpoint, train, TrainConfig, TrainLog,
};

pub use crate::encoder::ADAPTER_DIM;

pub type Result<T> = std::result::Result<T, MilError>;
