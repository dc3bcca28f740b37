//! Downstream measurement: 1-lead -> 12-lead retrieval, linear probing with
//! macro ROC-AUC, and the latent-gap Fréchet distance.

pub mod auc;
pub mod fid;
pub mod probe;
pub mod retrieval;

pub use auc::{binary_auc, macro_auc, AucReport};
pub use fid::latent_gap_fid;
pub use probe::{
    extract_embeddings, label_matrix, linear_probe, ProbeConfig, ProbeInput, ProbeReport,
};
pub use retrieval::{retrieval_eval, RetrievalReport, DEFAULT_KS};
