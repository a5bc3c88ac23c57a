use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub conv_layers: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Width of the hidden conv stages; the last stage emits `d_model`.
    pub conv_channels: usize,
    pub bottleneck_rank: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { conv_layers: 3, kernel: 3, stride: 2, pad: 1, conv_channels: 32, bottleneck_rank: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: 16.0, dropout: 0.05 }
    }
}

impl LoraConfig {
    /// `alpha / rank`, the multiplier on the low-rank path.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub n_mels: usize,
    pub speech_enc_dim: usize,
    /// Conv stages of the frozen speech encoder (kernel 3, stride 2, pad 1).
    pub encoder_conv_layers: usize,
    pub adapter: AdapterConfig,
    pub lora: LoraConfig,
    pub max_seq_len: usize,
    /// Divide the loss by the number of target tokens instead of the
    /// number of sequences.
    pub per_token_mean: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 256,
            vocab_size: 0,
            n_mels: crate::audio::N_MELS,
            speech_enc_dim: 64,
            encoder_conv_layers: 2,
            adapter: AdapterConfig::default(),
            lora: LoraConfig::default(),
            max_seq_len: 160,
            per_token_mean: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("d_model {0} is not divisible by n_heads {1}")]
    HeadSplit(usize, usize),
    #[error("lora rank must be at least 1")]
    LoraRank,
    #[error("{0} must be positive")]
    Zero(&'static str),
}

impl ModelConfig {
    pub fn with_vocab(vocab_size: usize) -> Self {
        Self { vocab_size, ..Default::default() }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("adapter.kernel", self.adapter.kernel),
            ("adapter.stride", self.adapter.stride),
            ("adapter.conv_channels", self.adapter.conv_channels),
            ("adapter.bottleneck_rank", self.adapter.bottleneck_rank),
        ] {
            if v == 0 {
                return Err(ConfigError::Zero(name));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ConfigError::HeadSplit(self.d_model, self.n_heads));
        }
        if self.lora.rank == 0 {
            return Err(ConfigError::LoraRank);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_scale() {
        let c = ModelConfig::with_vocab(100);
        c.validate().unwrap();
        assert_eq!(c.head_dim(), 16);
        assert_eq!(c.lora.scale(), 2.0);
        let bad = ModelConfig { n_heads: 5, ..c.clone() };
        assert_eq!(bad.validate(), Err(ConfigError::HeadSplit(64, 5)));
        let bad = ModelConfig { lora: LoraConfig { rank: 0, ..Default::default() }, ..c };
        assert_eq!(bad.validate(), Err(ConfigError::LoraRank));
    }
}
