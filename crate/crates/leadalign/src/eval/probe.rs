//! Linear probing on frozen embeddings, plus the embedding-extraction
//! plumbing shared by probing and retrieval evaluation.
//!
//! The probe trains one linear layer (embed_dim -> num_classes) with
//! per-class sigmoid + binary cross-entropy (multi-label), Adam and a cosine
//! schedule, early-stops on validation macro AUC, and reports the test AUC of
//! the checkpoint that was best on validation.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use super::auc::macro_auc;
use crate::ecg::{zscore, ECGRecord};
use crate::encoder::{forward_stopgrad, EmbeddingBatch, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::loss::{sigmoid, softplus};
use crate::opt::{adamw_update, cosine_lr, AdamHyper};
use crate::pairs::{self_cut, zero_mask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch_size() -> usize {
    64
}
fn default_epochs() -> usize {
    20
}
fn default_peak_lr() -> f64 {
    5e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_patience() -> usize {
    5
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            peak_lr: default_peak_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            patience: default_patience(),
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: 0.0,
        }
    }
}

/// How downstream records are fed to an encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ProbeInput {
    /// Self-cut single lead (for single-lead encoders).
    SingleLead { cut_lead: String },
    /// Full-shape record with every other lead zeroed (for multi-lead
    /// encoders that cannot take single-lead input).
    ZeroMask { keep_lead: String },
}

impl Default for ProbeInput {
    fn default() -> Self {
        ProbeInput::SingleLead {
            cut_lead: "I".to_string(),
        }
    }
}

/// Extract frozen embeddings for `records`. Downstream data is z-scored
/// before encoding; pre-training works on raw millivolts.
pub fn extract_embeddings(
    params: &EncoderParams<f64>,
    enc_cfg: &EncoderConfig,
    records: &[&ECGRecord],
    input: &ProbeInput,
    apply_zscore: bool,
) -> Result<EmbeddingBatch> {
    let mut vectors = Array2::<f64>::zeros((records.len(), enc_cfg.embed_dim));
    let mut ids = Vec::with_capacity(records.len());
    const CHUNK: usize = 32;
    for (chunk_idx, chunk) in records.chunks(CHUNK).enumerate() {
        let prepared: Vec<Array2<f32>> = chunk
            .iter()
            .map(|&r| {
                let rec = if apply_zscore { zscore(r.clone()) } else { r.clone() };
                match input {
                    ProbeInput::SingleLead { cut_lead } => {
                        Ok(self_cut(&rec, cut_lead)?.single_view)
                    }
                    ProbeInput::ZeroMask { keep_lead } => {
                        Ok(zero_mask(&rec, keep_lead)?.samples)
                    }
                }
            })
            .collect::<Result<_>>()?;
        let views: Vec<ArrayView2<f32>> = prepared.iter().map(|m| m.view()).collect();
        let chunk_ids: Vec<String> = chunk.iter().map(|r| r.id.clone()).collect();
        let emb = forward_stopgrad(params, enc_cfg, &views, &chunk_ids)?;
        for (k, row) in emb.vectors.rows().into_iter().enumerate() {
            vectors.row_mut(chunk_idx * CHUNK + k).assign(&row);
        }
        ids.extend(chunk_ids);
    }
    Ok(EmbeddingBatch {
        vectors,
        record_ids: ids,
    })
}

/// Multi-hot label matrix `[n x K]` for the given class vocabulary.
pub fn label_matrix(records: &[&ECGRecord], classes: &[String]) -> Array2<u8> {
    Array2::from_shape_fn((records.len(), classes.len()), |(i, k)| {
        u8::from(records[i].labels.contains(&classes[k]))
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub per_class_auc: BTreeMap<String, f64>,
    pub macro_auc: f64,
    /// 1-based epoch whose head scored best on validation.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub degenerate_classes: Vec<String>,
}

/// Mean-over-everything binary cross-entropy with logits and its gradient.
fn bce_with_logits(logits: &Array2<f64>, targets: &Array2<u8>) -> (f64, Array2<f64>) {
    let scale = 1.0 / (logits.nrows() * logits.ncols()) as f64;
    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros(logits.dim());
    for ((i, j), &x) in logits.indexed_iter() {
        let y = f64::from(targets[[i, j]]);
        loss += softplus(x) - x * y;
        grad[[i, j]] = (sigmoid(x) - y) * scale;
    }
    (loss * scale, grad)
}

struct Head {
    weight: Array2<f64>,
    bias: Array1<f64>,
}

impl Head {
    fn logits(&self, emb: &Array2<f64>) -> Array2<f64> {
        let mut out = emb.dot(&self.weight.t());
        out += &self.bias;
        out
    }
}

/// Train the probe head on frozen train embeddings; early-stop on validation
/// macro AUC; report test macro AUC from the best-on-validation head.
pub fn linear_probe(
    train: (&EmbeddingBatch, &Array2<u8>),
    valid: (&EmbeddingBatch, &Array2<u8>),
    test: (&EmbeddingBatch, &Array2<u8>),
    classes: &[String],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let d = train.0.vectors.ncols();
    let k = classes.len();
    let n = train.0.vectors.nrows();
    if n == 0 {
        return Err(Error::MissingSplit("train".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Small random init: AUC is scale-invariant, so the head's ranking must
    // be driven by the accumulated gradient direction rather than the draw.
    let normal = Normal::new(0.0, 0.01 / (d as f64).sqrt()).unwrap();
    let mut head = Head {
        weight: Array2::from_shape_fn((k, d), |_| normal.sample(&mut rng)),
        bias: Array1::zeros(k),
    };
    let mut m_w = vec![0.0; k * d];
    let mut v_w = vec![0.0; k * d];
    let mut m_b = vec![0.0; k];
    let mut v_b = vec![0.0; k];
    let hyper = cfg.adam();

    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch) as u64;
    let mut step = 0u64;
    let mut adam_t = 0u64;

    let mut best: Option<(f64, Array2<f64>, Array1<f64>, usize)> = None;
    let mut since_improvement = 0usize;
    let mut epochs_run = 0usize;
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=cfg.epochs {
        epochs_run = epoch;
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let emb = train.0.vectors.select(Axis(0), chunk);
            let lab = train.1.select(Axis(0), chunk);
            let logits = head.logits(&emb);
            let (_, d_logits) = bce_with_logits(&logits, &lab);
            // d_w = d_logits^T . emb ; d_b = column sums ; chain to Adam
            let d_w = d_logits.t().dot(&emb);
            let d_b = d_logits.sum_axis(Axis(0));
            let lr = cosine_lr(cfg.peak_lr, step, total_steps);
            adam_t += 1;
            adamw_update(
                head.weight.as_slice_mut().unwrap(),
                d_w.as_standard_layout().as_slice().unwrap(),
                &mut m_w,
                &mut v_w,
                adam_t,
                lr,
                &hyper,
            );
            adamw_update(
                head.bias.as_slice_mut().unwrap(),
                d_b.as_slice().unwrap(),
                &mut m_b,
                &mut v_b,
                adam_t,
                lr,
                &hyper,
            );
            step += 1;
        }
        let valid_scores = head.logits(&valid.0.vectors);
        let report = macro_auc(&valid_scores, valid.1, classes)?;
        let improved = best
            .as_ref()
            .map_or(true, |(b, _, _, _)| report.macro_auc > *b);
        if improved {
            best = Some((
                report.macro_auc,
                head.weight.clone(),
                head.bias.clone(),
                epoch,
            ));
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if since_improvement >= cfg.patience {
                break;
            }
        }
    }

    let (_, best_w, best_b, best_epoch) = best.expect("at least one epoch ran");
    let best_head = Head {
        weight: best_w,
        bias: best_b,
    };
    let test_scores = best_head.logits(&test.0.vectors);
    let report = macro_auc(&test_scores, test.1, classes)?;
    Ok(ProbeReport {
        per_class_auc: report.per_class_auc,
        macro_auc: report.macro_auc,
        best_epoch,
        epochs_run,
        degenerate_classes: report.degenerate_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    fn one_hot_batch(n: usize, k: usize, seed: u64) -> (EmbeddingBatch, Array2<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vectors = Array2::<f64>::zeros((n, k + 2));
        let mut labels = Array2::<u8>::zeros((n, k));
        for i in 0..n {
            let class = rng.gen_range(0..k);
            vectors[[i, class]] = 1.0;
            vectors[[i, k]] = rng.gen_range(-0.1..0.1);
            labels[[i, class]] = 1;
        }
        let ids = (0..n).map(|i| format!("r{i}")).collect();
        (
            EmbeddingBatch {
                vectors,
                record_ids: ids,
            },
            labels,
        )
    }

    #[test]
    fn separable_embeddings_reach_perfect_auc() {
        let classes: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let (tr_e, tr_l) = one_hot_batch(120, 3, 0);
        let (va_e, va_l) = one_hot_batch(40, 3, 1);
        let (te_e, te_l) = one_hot_batch(40, 3, 2);
        let cfg = ProbeConfig {
            epochs: 20,
            batch_size: 16,
            seed: 3,
            ..ProbeConfig::default()
        };
        let report =
            linear_probe((&tr_e, &tr_l), (&va_e, &va_l), (&te_e, &te_l), &classes, &cfg).unwrap();
        assert!(report.macro_auc > 0.999, "{}", report.macro_auc);
    }

    #[test]
    fn early_stopping_waits_exactly_patience_epochs() {
        // zero learning rate: the first epoch sets the best and nothing ever
        // improves, so training stops after 1 + patience epochs
        let classes: Vec<String> = vec!["a".into(), "b".into()];
        let (tr_e, tr_l) = one_hot_batch(60, 2, 4);
        let (va_e, va_l) = one_hot_batch(30, 2, 5);
        let cfg = ProbeConfig {
            peak_lr: 0.0,
            epochs: 20,
            patience: 5,
            seed: 0,
            ..ProbeConfig::default()
        };
        let report =
            linear_probe((&tr_e, &tr_l), (&va_e, &va_l), (&va_e, &va_l), &classes, &cfg).unwrap();
        assert_eq!(report.best_epoch, 1);
        assert_eq!(report.epochs_run, 6);
    }

    #[test]
    fn probe_is_deterministic_per_seed() {
        let classes: Vec<String> = vec!["a".into(), "b".into()];
        let (tr_e, tr_l) = one_hot_batch(80, 2, 6);
        let (va_e, va_l) = one_hot_batch(30, 2, 7);
        let (te_e, te_l) = one_hot_batch(30, 2, 8);
        let cfg = ProbeConfig {
            epochs: 5,
            seed: 9,
            ..ProbeConfig::default()
        };
        let a = linear_probe((&tr_e, &tr_l), (&va_e, &va_l), (&te_e, &te_l), &classes, &cfg)
            .unwrap();
        let b = linear_probe((&tr_e, &tr_l), (&va_e, &va_l), (&te_e, &te_l), &classes, &cfg)
            .unwrap();
        assert_eq!(a.macro_auc.to_bits(), b.macro_auc.to_bits());
        assert_eq!(a.best_epoch, b.best_epoch);
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let logits = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-2.0..2.0));
        let targets = Array2::from_shape_fn((4, 3), |_| u8::from(rng.gen_bool(0.5)));
        let (_, grad) = bce_with_logits(&logits, &targets);
        let h = 1e-6;
        for idx in 0..logits.len() {
            let mut lp = logits.clone();
            lp.as_slice_mut().unwrap()[idx] += h;
            let mut lm = logits.clone();
            lm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (bce_with_logits(&lp, &targets).0 - bce_with_logits(&lm, &targets).0)
                / (2.0 * h);
            let a = grad.as_slice().unwrap()[idx];
            assert!((a - fd).abs() < 1e-8, "{a} vs {fd}");
        }
    }
}
