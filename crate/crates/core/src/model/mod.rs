//! Frozen speech encoder, trainable adapter, and a small pre-LN decoder
//! with LoRA on the query/value projections.

pub mod config;
pub mod net;
pub mod ops;
pub mod params;
pub mod vocab;

pub use config::{AdapterConfig, ConfigError, LoraConfig, ModelConfig};
pub use net::{
    adapt, embed_text, encode_speech, forward, forward_with, fuse, fused_prefix, generate, lora_apply, loss,
    sample_grad, FusedSequence, Logits, ModelError, RunOptions, Sample, SpeechFeatures,
};
pub use params::{Group, ModelParams};
pub use vocab::Vocab;
