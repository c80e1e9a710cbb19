//! Temporal adaptation of a small transformer classifier by steering its
//! hidden representations with mean-difference vectors.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense matrices, means, softmax, truncated SVD, seeded RNG.
//! - [`model`]: a pre-layernorm transformer classifier with hook sites that
//!   capture pooled sublayer outputs and apply additive interventions.
//! - [`trainer`]: cross-entropy + Adam fine-tuning and a finite-difference
//!   gradient check.
//! - [`corpus`]: synthetic temporally drifting corpora (label shift and
//!   vocabulary shift), JSONL ingestion and prior resampling.
//! - [`steering`]: extraction, low-rank denoising, timeline arithmetic,
//!   application and serialization of steering vectors.
//! - [`dynamic`]: period estimation and probability-weighted steering.

#![forbid(unsafe_code)]

pub mod corpus;
pub mod dynamic;
pub mod error;
pub mod model;
pub mod numerics;
pub mod steering;
pub mod trainer;

pub use error::{Error, Result};
