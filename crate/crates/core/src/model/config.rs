use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_blocks_phoneme: usize,
    pub n_blocks_mel: usize,
    pub n_heads: usize,
    pub conv_kernel: usize,
    pub conv_filter: usize,
    pub mel_dim: usize,
    pub dropout: f64,
    /// Stops the duration loss from reaching the phoneme-side blocks.
    #[serde(default = "default_true")]
    pub duration_stop_gradient: bool,
    #[serde(default = "default_duration_kernel")]
    pub duration_kernel: usize,
    /// Channel count of the duration predictor's convolutions.
    pub duration_filter: usize,
}

fn default_true() -> bool {
    true
}

fn default_duration_kernel() -> usize {
    3
}

impl ModelConfig {
    /// Minutes-on-a-CPU configuration used for the toy corpus.
    pub fn desk() -> Self {
        ModelConfig {
            vocab_size: 51,
            d_model: 64,
            n_blocks_phoneme: 2,
            n_blocks_mel: 2,
            n_heads: 2,
            conv_kernel: 3,
            conv_filter: 256,
            mel_dim: 80,
            dropout: 0.1,
            duration_stop_gradient: true,
            duration_kernel: 3,
            duration_filter: 64,
        }
    }

    /// Full-size FastSpeech hyperparameters.
    pub fn paper() -> Self {
        ModelConfig {
            vocab_size: 51,
            d_model: 384,
            n_blocks_phoneme: 6,
            n_blocks_mel: 6,
            n_heads: 2,
            conv_kernel: 3,
            conv_filter: 1536,
            mel_dim: 80,
            dropout: 0.1,
            duration_stop_gradient: true,
            duration_kernel: 3,
            duration_filter: 256,
        }
    }

    /// Smallest configuration that still exercises every layer type.
    pub fn tiny() -> Self {
        ModelConfig {
            vocab_size: 10,
            d_model: 8,
            n_blocks_phoneme: 1,
            n_blocks_mel: 1,
            n_heads: 2,
            conv_kernel: 3,
            conv_filter: 12,
            mel_dim: 4,
            dropout: 0.1,
            duration_stop_gradient: true,
            duration_kernel: 3,
            duration_filter: 8,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Checks every invariant, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("conv_kernel", self.conv_kernel),
            ("conv_filter", self.conv_filter),
            ("mel_dim", self.mel_dim),
            ("duration_kernel", self.duration_kernel),
            ("duration_filter", self.duration_filter),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::config(format!("model.conv_kernel must be odd, got {}", self.conv_kernel)));
        }
        if self.duration_kernel.is_multiple_of(2) {
            return Err(Error::config(format!(
                "model.duration_kernel must be odd, got {}",
                self.duration_kernel
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("model.dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}
