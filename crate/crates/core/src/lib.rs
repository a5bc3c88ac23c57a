//! Speech+text opinion expression identification.
//!
//! The crate covers the whole desk-scale pipeline: the inline-tag output
//! template, exact-match span scoring, synthetic speech/text corpora, and a
//! small speech-encoder → adapter → decoder LM with LoRA that is trained to
//! emit tagged sentences.

pub mod audio;
pub mod checkpoint;
pub mod dataset;
pub mod model;
pub mod oei;
pub mod par;
pub mod scorer;
pub mod template;
pub mod trainer;

pub use oei::{tokenize, validate_spans, Example, OpinionSpan, Polarity, SpanError, SpanSet, TokenSeq};
