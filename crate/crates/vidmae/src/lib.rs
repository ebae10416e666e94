//! Masked video autoencoding with region-prior-guided token masking.
//!
//! The crate covers the full desk-scale pipeline: synthetic ultrasound-like
//! corpus generation, clip extraction and augmentation, cube tokenization,
//! region priors and probability boosting, adaptive mask sampling, the
//! encoder/decoder model with its two loss paths, training/evaluation
//! orchestration, and the CLI glue.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod model;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod priors;
pub mod sampler;
pub mod tokenizer;
pub mod train;
pub mod vision;
pub mod viz;

pub use error::{Result, VidmaeError};
