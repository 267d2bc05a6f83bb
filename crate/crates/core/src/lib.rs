//! Measure a language model's gender distribution per profession, score its
//! KL divergence from a desired distribution, and fine-tune the model toward
//! that distribution.
//!
//! The pipeline runs on a toy masked (or autoregressive) language model
//! trained on a synthetic corpus with a controlled gender skew, so the whole
//! detect, mitigate and verify loop is reproducible on a laptop.

pub mod bias;
pub mod corpus;
pub mod error;
pub mod mitigation;
pub mod scoring;
pub mod toymodel;

pub use error::{Error, Result};
