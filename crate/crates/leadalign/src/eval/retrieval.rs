//! 1-lead -> 12-lead retrieval: rank every multi-lead embedding against each
//! single-lead query by inner product and report R@k plus the alignment loss
//! on the same batch.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::encoder::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::loss::{loss_from_sims, similarity_matrix, LossConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// k -> fraction of queries whose true match ranks in the top k.
    pub r_at: BTreeMap<usize, f64>,
    pub valid_loss: f64,
    pub n: usize,
}

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// Rank all `m` rows for each `s` row by descending inner product, ties
/// broken by ascending index. Query i's true match is row i.
pub fn retrieval_eval(
    s: &EmbeddingBatch,
    m: &EmbeddingBatch,
    ks: &[usize],
    loss_cfg: &LossConfig,
) -> Result<RetrievalReport> {
    let mut seen = HashSet::new();
    for id in &s.record_ids {
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    let sims = similarity_matrix(s, m)?;
    let n = sims.nrows();
    let max_k = ks.iter().copied().max().unwrap_or(1);
    if n < max_k {
        return Err(Error::TooFewSamples {
            needed: max_k,
            actual: n,
        });
    }
    let mut ranks = Vec::with_capacity(n);
    for i in 0..n {
        let own = sims[[i, i]];
        // rank = number of candidates ordered strictly ahead of the match
        let mut rank = 0usize;
        for j in 0..n {
            let sij = sims[[i, j]];
            if sij > own || (sij == own && j < i) {
                rank += 1;
            }
        }
        ranks.push(rank);
    }
    let mut r_at = BTreeMap::new();
    for &k in ks {
        let hits = ranks.iter().filter(|&&r| r < k).count();
        r_at.insert(k, hits as f64 / n as f64);
    }
    Ok(RetrievalReport {
        r_at,
        valid_loss: loss_from_sims(&sims, loss_cfg),
        n,
    })
}
