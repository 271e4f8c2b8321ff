//! `DLMW` parameter checkpoints.
//!
//! Layout (little-endian): magic `DLMW`, version `u32`, then the model
//! config as `vocab_size, d_model, n_layers, n_heads, d_head, max_seq,
//! mlp_hidden` (`u32` each), `attention` (`u8`, 0 bidirectional / 1 causal),
//! `tie_embeddings` (`u8`), `rope_base` (`f32`), followed by every parameter
//! tensor as raw `f32` in declaration order.

use std::path::Path;

use super::config::{AttentionMode, ModelConfig};
use super::params::Parameters;
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DLMW";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &Parameters<f32>) -> Vec<u8> {
    let c = &params.config;
    let mut w = Writer::default();
    w.buf.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    for v in [
        c.vocab_size,
        c.d_model,
        c.n_layers,
        c.n_heads,
        c.d_head,
        c.max_seq,
        c.mlp_hidden,
    ] {
        w.u32(v as u32);
    }
    w.u8(match c.attention {
        AttentionMode::Bidirectional => 0,
        AttentionMode::Causal => 1,
    });
    w.u8(c.tie_embeddings as u8);
    w.f32(c.rope_base);
    for t in params.tensors() {
        w.f32s(t.data());
    }
    w.buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Parameters<f32>> {
    let mut r = Reader::new(bytes);
    if r.bytes(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a DLMW checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = r.u32("model config")? as usize;
    }
    let attention = match r.u8("attention mode")? {
        0 => AttentionMode::Bidirectional,
        1 => AttentionMode::Causal,
        x => return Err(Error::Format(format!("unknown attention mode tag {x}"))),
    };
    let tie = match r.u8("tie flag")? {
        0 => false,
        1 => true,
        x => return Err(Error::Format(format!("bad tie flag {x}"))),
    };
    let config = ModelConfig {
        vocab_size: dims[0],
        d_model: dims[1],
        n_layers: dims[2],
        n_heads: dims[3],
        d_head: dims[4],
        max_seq: dims[5],
        mlp_hidden: dims[6],
        attention,
        rope_base: r.f32("rope base")?,
        tie_embeddings: tie,
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("checkpoint carries an invalid config: {e}")))?;
    // shapes only; values are overwritten below
    let mut params = Parameters::<f32>::init(&config, &crate::numerics::RngState::new(0))?;
    for t in params.tensors_mut() {
        let n = t.data().len();
        let vals = r.f32s(n, "parameter block")?;
        t.data_mut().copy_from_slice(&vals);
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!(
            "{} trailing bytes after parameters",
            r.remaining()
        )));
    }
    if !params.is_finite() {
        return Err(Error::Format(
            "checkpoint contains non-finite parameters".into(),
        ));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &Parameters<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Parameters<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
