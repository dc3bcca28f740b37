//! Cross-lead ECG alignment.
//!
//! Pre-trains a single-lead ECG encoder by aligning its embeddings with a
//! frozen multi-lead encoder over self-cut positive pairs and a pairwise
//! sigmoid loss, then measures the result with 1-lead -> 12-lead retrieval,
//! linear probing (macro ROC-AUC), and the Fréchet distance between
//! embedding distributions.

pub mod ablation;
pub mod config;
pub mod ecg;
pub mod eval;
pub mod encoder;
pub mod error;
pub mod loss;
pub mod nn;
pub mod opt;
pub mod pairs;
pub mod tensorio;
pub mod train;

pub use error::{Error, Result};
