use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Every position attends to every position (diffusion models).
    Bidirectional,
    /// Position `i` attends to `j <= i` only (autoregressive models).
    Causal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub max_seq: usize,
    pub mlp_hidden: usize,
    pub attention: AttentionMode,
    pub rope_base: f32,
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: vocab::vocab_size(),
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_head: 16,
            max_seq: 64,
            mlp_hidden: 128,
            attention: AttentionMode::Bidirectional,
            rope_base: 10000.0,
            tie_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size < vocab::N_RESERVED {
            return fail(format!(
                "vocab_size {} leaves no room for the {} reserved ids",
                self.vocab_size,
                vocab::N_RESERVED
            ));
        }
        if self.n_heads == 0 || self.d_head == 0 || self.n_layers == 0 || self.mlp_hidden == 0 {
            return fail("n_heads, d_head, n_layers and mlp_hidden must be positive".into());
        }
        if self.d_model != self.n_heads * self.d_head {
            return fail(format!(
                "d_model {} != n_heads {} x d_head {}",
                self.d_model, self.n_heads, self.d_head
            ));
        }
        if self.d_head % 2 != 0 {
            return fail(format!(
                "d_head {} must be even for rotary embeddings",
                self.d_head
            ));
        }
        if self.max_seq < 2 {
            return fail(format!("max_seq {} must be at least 2", self.max_seq));
        }
        if !(self.rope_base > 1.0) || !self.rope_base.is_finite() {
            return fail(format!(
                "rope_base {} must be finite and > 1",
                self.rope_base
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn inconsistent_heads_rejected() {
        let c = ModelConfig {
            d_model: 30,
            ..ModelConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn tiny_vocab_and_seq_rejected() {
        let c = ModelConfig {
            vocab_size: 3,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            max_seq: 1,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
