//! Core library of the `mmh` multimodal sequence-to-sequence harness.
//!
//! The crate is organized around the experiment lifecycle: standardized
//! TSV metadata ([`metadata`]), signal containers and temporal ops
//! ([`signal`]), modality-aware processors that turn records into model
//! inputs ([`processors`]), a small trainable encoder-decoder model
//! ([`model`]), reference-based metrics ([`metrics`]), the setup / train /
//! generate pipeline ([`pipeline`]), and the mixed-modality meta processor
//! ([`metaproc`]).

pub mod config;
pub mod metadata;
pub mod metaproc;
pub mod metrics;
pub mod modality;
pub mod model;
pub mod pipeline;
pub mod processors;
pub mod signal;

pub use modality::{Modality, SignalExtensions};

/// Token id type used across vocabularies, processors and the model.
pub type TokenId = u32;
