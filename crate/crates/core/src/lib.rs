//! Trimodal embedding alignment for audio.
//!
//! This crate trains small adapters and attention poolers that map frozen
//! audio-encoder tokens into frozen text and vision-text embedding spaces,
//! so that an audio clip can stand in for a caption in downstream
//! conditioning. Everything is seeded and 64-bit: the same configuration and
//! corpus reproduce training byte-for-byte.
//!
//! Module map:
//!
//! * [`tensor`] / [`graph`]: dense f64 tensors and reverse-mode autodiff over
//!   a per-forward tape;
//! * [`mel`] / [`encoders`]: deterministic frozen encoders (log-mel audio
//!   frontend, hashed text embeddings, rotated vision-text embeddings);
//! * [`archive`]: precomputed embedding archives (`SSEA`);
//! * [`alignment`]: adapters, attention poolers, the alignment model and its
//!   training loss;
//! * [`augment`]: audio transforms, caption rewriting and clip mixing;
//! * [`corpus`]: corpora, train/validation splits, synthetic corpus
//!   generation;
//! * [`training`]: batches, AdamW, the training loop, checkpoints (`SSCK`);
//! * [`evaluation`]: retrieval metrics and the volume/mix probes;
//! * [`export`]: conditioning-pair export (`SSCP`);
//! * [`config`]: the TOML configuration shared by the CLI tools.

pub mod alignment;
pub mod archive;
pub mod audio;
pub mod augment;
pub mod config;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod export;
pub mod graph;
pub mod ioutil;
pub mod mel;
pub mod rng;
pub mod service;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
