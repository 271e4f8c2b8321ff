//! Toy pre-norm transformer with bidirectional or causal attention,
//! attention capture, logit overrides and hand-written backprop.

mod checkpoint;
mod config;
mod forward;
mod params;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
};
pub use config::{AttentionMode, ModelConfig};
pub use forward::{
    forward, loss, loss_and_grads, AttentionTensor, ForwardOutput, KeepOneFallback, LogitOverride,
    OverrideRule, TrainExample,
};
pub use params::{LayerParams, Parameters};

use crate::error::Result;
use crate::numerics::{RngState, Scalar};

pub fn init_params<T: Scalar>(config: &ModelConfig, rng: &RngState) -> Result<Parameters<T>> {
    Parameters::init(config, rng)
}

#[cfg(test)]
mod tests;
