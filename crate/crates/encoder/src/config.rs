use serde::{Deserialize, Serialize};

use crate::error::{EncoderError, Result};

/// Shape of the toy encoder. Defaults are scaled down from the usual base
/// configuration so full sweeps run in seconds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub pad_id: u32,
}

impl EncoderConfig {
    /// Toy defaults: 4 layers, width 64, 4 heads, FFN width 256,
    /// sequences up to 32 tokens, vocab 1000.
    pub fn toy() -> Self {
        EncoderConfig {
            num_layers: 4,
            d_model: 64,
            num_heads: 4,
            d_ff: 256,
            max_seq_len: 32,
            vocab_size: 1000,
            num_classes: 2,
            pad_id: 0,
        }
    }

    /// Base-model shape (12 layers, width 768) used for parameter-count
    /// accounting; far too large to run forward passes in tests.
    pub fn base_shape() -> Self {
        EncoderConfig {
            num_layers: 12,
            d_model: 768,
            num_heads: 12,
            d_ff: 3072,
            max_seq_len: 128,
            vocab_size: 30522,
            num_classes: 2,
            pad_id: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0
            || self.d_model == 0
            || self.num_heads == 0
            || self.d_ff == 0
            || self.max_seq_len == 0
            || self.vocab_size == 0
            || self.num_classes == 0
        {
            return Err(EncoderError::InvalidConfig(
                "all extents must be positive".into(),
            ));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(EncoderError::InvalidConfig(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if (self.pad_id as usize) >= self.vocab_size {
            return Err(EncoderError::InvalidConfig(format!(
                "pad id {} outside vocab {}",
                self.pad_id, self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}
