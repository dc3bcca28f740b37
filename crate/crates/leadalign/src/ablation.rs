//! Ablation driver: alignment pre-training under different tower
//! initializations versus a supervised no-alignment baseline, probed under
//! one shared protocol and reported side by side.
//!
//! The no-alignment arm trains the same single-lead encoder plus a linear
//! head directly on labels with the downstream optimizer settings, so the
//! comparison isolates the alignment mechanism. It has no retrieval columns.

use std::path::PathBuf;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ecg::{zscore, ECGRecord, Split};
use crate::encoder::{
    backward, forward, load_params, EncoderConfig,
    EncoderParams,
};
use crate::error::{Error, Result};
use crate::eval::{
    extract_embeddings, label_matrix, linear_probe, macro_auc, ProbeConfig, ProbeInput,
    ProbeReport,
};
use crate::loss::{sigmoid, softplus, LossConfig};
use crate::opt::{adamw_update, cosine_lr, AdamState};
use crate::pairs::self_cut;
use crate::train::{subseed, PretrainConfig, Pretrainer, TowerInit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum InitSource {
    #[default]
    Random,
    Checkpoint {
        path: PathBuf,
    },
}

impl InitSource {
    fn label(&self) -> &'static str {
        match self {
            InitSource::Random => "random",
            InitSource::Checkpoint { .. } => "checkpoint",
        }
    }

    fn to_tower(&self, cfg: &EncoderConfig) -> Result<TowerInit> {
        Ok(match self {
            InitSource::Random => TowerInit::Random,
            InitSource::Checkpoint { path } => {
                TowerInit::Checkpoint(load_params(path, cfg)?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    /// Run the supervised no-alignment baseline arm.
    #[serde(default = "default_true")]
    pub no_align: bool,
    /// Run the alignment arm with these tower initializations.
    #[serde(default = "default_true")]
    pub align: bool,
    #[serde(default)]
    pub init_s: InitSource,
    #[serde(default)]
    pub init_m: InitSource,
    /// One full repetition per seed; the report carries per-seed values and
    /// the median.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_true() -> bool {
    true
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            no_align: true,
            align: true,
            init_s: InitSource::Random,
            init_m: InitSource::Random,
            seeds: default_seeds(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub r1: Option<f64>,
    pub r5: Option<f64>,
    pub r10: Option<f64>,
    pub valid_loss: Option<f64>,
    pub test_macro_auc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub per_seed: Vec<SeedOutcome>,
    pub median_r1: Option<f64>,
    pub median_r5: Option<f64>,
    pub median_r10: Option<f64>,
    pub median_valid_loss: Option<f64>,
    pub median_test_macro_auc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn median_opt(values: Vec<Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.into_iter().flatten().collect();
    if present.is_empty() {
        None
    } else {
        Some(median(present))
    }
}

fn summarize(arm: String, per_seed: Vec<SeedOutcome>) -> AblationRow {
    AblationRow {
        arm,
        median_r1: median_opt(per_seed.iter().map(|o| o.r1).collect()),
        median_r5: median_opt(per_seed.iter().map(|o| o.r5).collect()),
        median_r10: median_opt(per_seed.iter().map(|o| o.r10).collect()),
        median_valid_loss: median_opt(per_seed.iter().map(|o| o.valid_loss).collect()),
        median_test_macro_auc: median(per_seed.iter().map(|o| o.test_macro_auc).collect()),
        per_seed,
    }
}

impl AblationReport {
    pub fn render_text(&self) -> String {
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{x:7.4}"),
            None => format!("{:>7}", "-"),
        };
        let mut out = String::new();
        out.push_str(&format!(
            "{:<38} {:>7} {:>7} {:>7} {:>7} {:>9}\n",
            "arm", "R@1", "R@5", "R@10", "Loss", "Avg AUC"
        ));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<38} {} {} {} {} {:9.4}\n",
                row.arm,
                fmt(row.median_r1),
                fmt(row.median_r5),
                fmt(row.median_r10),
                fmt(row.median_valid_loss),
                row.median_test_macro_auc
            ));
        }
        out
    }

    pub fn row(&self, arm: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.arm == arm)
    }
}

pub const ARM_NO_ALIGN: &str = "supervised (no alignment)";

pub fn arm_align_name(init_s: &InitSource, init_m: &InitSource) -> String {
    format!("aligned (s: {}, m: {})", init_s.label(), init_m.label())
}

/// Everything the driver needs besides the dataset.
pub struct AblationContext {
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub pretrain: PretrainConfig,
    pub probe: ProbeConfig,
    pub cut_lead: String,
}

/// Run the configured arms over each seed and assemble the comparison table.
pub fn run_ablation(
    ctx: &AblationContext,
    cfg: &AblationConfig,
    train: &[&ECGRecord],
    valid: &[&ECGRecord],
    test: &[&ECGRecord],
    classes: &[String],
) -> Result<AblationReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::InvalidValue {
            key: "ablation.seeds".into(),
            message: "need at least one seed".into(),
        });
    }
    let mut rows = Vec::new();
    if cfg.align {
        let mut per_seed = Vec::new();
        for &seed in &cfg.seeds {
            log::info!("ablation: aligned arm, seed {seed}");
            per_seed.push(run_aligned_arm(ctx, cfg, seed, train, valid, test, classes)?);
        }
        rows.push(summarize(arm_align_name(&cfg.init_s, &cfg.init_m), per_seed));
    }
    if cfg.no_align {
        let mut per_seed = Vec::new();
        for &seed in &cfg.seeds {
            log::info!("ablation: supervised no-alignment arm, seed {seed}");
            let report = train_supervised(
                &ctx.encoder.for_leads(1),
                &ctx.probe,
                train,
                valid,
                test,
                classes,
                &ctx.cut_lead,
                seed,
            )?;
            per_seed.push(SeedOutcome {
                seed,
                r1: None,
                r5: None,
                r10: None,
                valid_loss: None,
                test_macro_auc: report.macro_auc,
            });
        }
        rows.push(summarize(ARM_NO_ALIGN.to_string(), per_seed));
    }
    Ok(AblationReport { rows })
}

#[allow(clippy::too_many_arguments)]
fn run_aligned_arm(
    ctx: &AblationContext,
    cfg: &AblationConfig,
    seed: u64,
    train: &[&ECGRecord],
    valid: &[&ECGRecord],
    test: &[&ECGRecord],
    classes: &[String],
) -> Result<SeedOutcome> {
    let pretrain_cfg = PretrainConfig {
        seed,
        ..ctx.pretrain.clone()
    };
    let trainer = Pretrainer::new(pretrain_cfg, &ctx.encoder, ctx.loss, &ctx.cut_lead);
    let init_s = cfg.init_s.to_tower(&trainer.enc_cfg_s)?;
    let init_m = cfg.init_m.to_tower(&trainer.enc_cfg_m)?;
    let outcome = trainer.fit(train, init_s, init_m, None, None)?;
    let (state, metrics) = outcome;
    let best = metrics
        .iter()
        .min_by(|a, b| a.valid_loss.partial_cmp(&b.valid_loss).unwrap())
        .expect("at least one epoch");

    let enc_cfg = trainer.enc_cfg_s.clone();
    let input = ProbeInput::SingleLead {
        cut_lead: ctx.cut_lead.clone(),
    };
    let probe_cfg = ProbeConfig {
        seed: subseed(seed, 21),
        ..ctx.probe
    };
    let embed = |records: &[&ECGRecord]| {
        extract_embeddings(&state.best_params_s, &enc_cfg, records, &input, true)
    };
    let report = linear_probe(
        (&embed(train)?, &label_matrix(train, classes)),
        (&embed(valid)?, &label_matrix(valid, classes)),
        (&embed(test)?, &label_matrix(test, classes)),
        classes,
        &probe_cfg,
    )?;
    Ok(SeedOutcome {
        seed,
        r1: Some(best.r1),
        r5: best.r5,
        r10: best.r10,
        valid_loss: Some(best.valid_loss),
        test_macro_auc: report.macro_auc,
    })
}

// ── supervised no-alignment baseline ─────────────────────────────────────────

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

/// Train the single-lead encoder plus a linear head directly on labels with
/// the downstream protocol (Adam, cosine, early stop on validation macro
/// AUC); report test macro AUC from the best-on-validation snapshot.
#[allow(clippy::too_many_arguments)]
pub fn train_supervised(
    enc_cfg: &EncoderConfig,
    cfg: &ProbeConfig,
    train: &[&ECGRecord],
    valid: &[&ECGRecord],
    test: &[&ECGRecord],
    classes: &[String],
    cut_lead: &str,
    seed: u64,
) -> Result<ProbeReport> {
    if train.is_empty() {
        return Err(Error::MissingSplit("train".into()));
    }
    if valid.is_empty() {
        return Err(Error::MissingSplit("valid".into()));
    }
    if test.is_empty() {
        return Err(Error::MissingSplit("test".into()));
    }
    let prepare = |records: &[&ECGRecord]| -> Result<(Vec<Array2<f32>>, Vec<String>)> {
        let mut views = Vec::with_capacity(records.len());
        let mut ids = Vec::with_capacity(records.len());
        for &r in records {
            let z = zscore(r.clone());
            views.push(self_cut(&z, cut_lead)?.single_view);
            ids.push(r.id.clone());
        }
        Ok((views, ids))
    };
    let (train_views, train_ids) = prepare(train)?;
    let train_labels = label_matrix(train, classes);
    let valid_labels = label_matrix(valid, classes);
    let test_labels = label_matrix(test, classes);

    let n = train.len();
    let k = classes.len();
    let d = enc_cfg.embed_dim;
    let mut params = EncoderParams::<f64>::init(enc_cfg, subseed(seed, 31));
    let mut opt = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, 32));
    let normal = Normal::new(0.0, 0.01 / (d as f64).sqrt()).unwrap();
    let mut head_w = Array2::from_shape_fn((k, d), |_| normal.sample(&mut rng));
    let mut head_b = Array1::<f64>::zeros(k);
    let (mut m_w, mut v_w) = (vec![0.0; k * d], vec![0.0; k * d]);
    let (mut m_b, mut v_b) = (vec![0.0; k], vec![0.0; k]);
    let hyper = cfg.adam();

    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch) as u64;
    let mut step = 0u64;
    let mut adam_t = 0u64;

    let score_split = |params: &EncoderParams<f64>,
                       head_w: &Array2<f64>,
                       head_b: &Array1<f64>,
                       records: &[&ECGRecord]|
     -> Result<Array2<f64>> {
        let emb = extract_embeddings(
            params,
            enc_cfg,
            records,
            &ProbeInput::SingleLead {
                cut_lead: cut_lead.to_string(),
            },
            true,
        )?;
        let mut logits = emb.vectors.dot(&head_w.t());
        logits += head_b;
        Ok(logits)
    };

    let mut best: Option<(f64, EncoderParams<f64>, Array2<f64>, Array1<f64>, usize)> = None;
    let mut since_improvement = 0usize;
    let mut epochs_run = 0usize;
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=cfg.epochs {
        epochs_run = epoch;
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let views: Vec<ArrayView2<f32>> =
                chunk.iter().map(|&i| train_views[i].view()).collect();
            let ids: Vec<String> = chunk.iter().map(|&i| train_ids[i].clone()).collect();
            let labels = train_labels.select(Axis(0), chunk);
            let (emb, trace) = forward(&params, enc_cfg, &views, &ids)?;
            let mut logits = emb.vectors.dot(&head_w.t());
            logits += &head_b;
            let (loss, d_logits) = bce_with_logits(&logits, &labels);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step, loss });
            }
            let d_w = d_logits.t().dot(&emb.vectors);
            let d_b = d_logits.sum_axis(Axis(0));
            let d_emb = d_logits.dot(&head_w);
            let grads = backward(&params, enc_cfg, &trace, &d_emb);
            let lr = cosine_lr(cfg.peak_lr, step, total_steps);
            adam_t += 1;
            opt.step(&mut params, &grads, lr, &hyper);
            adamw_update(
                head_w.as_slice_mut().unwrap(),
                d_w.as_standard_layout().as_slice().unwrap(),
                &mut m_w,
                &mut v_w,
                adam_t,
                lr,
                &hyper,
            );
            adamw_update(
                head_b.as_slice_mut().unwrap(),
                d_b.as_slice().unwrap(),
                &mut m_b,
                &mut v_b,
                adam_t,
                lr,
                &hyper,
            );
            step += 1;
        }
        let valid_scores = score_split(&params, &head_w, &head_b, valid)?;
        let report = macro_auc(&valid_scores, &valid_labels, classes)?;
        let improved = best
            .as_ref()
            .map_or(true, |(b, _, _, _, _)| report.macro_auc > *b);
        if improved {
            best = Some((
                report.macro_auc,
                params.clone(),
                head_w.clone(),
                head_b.clone(),
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

    let (_, best_params, best_w, best_b, best_epoch) = best.expect("at least one epoch ran");
    let test_scores = score_split(&best_params, &best_w, &best_b, test)?;
    let report = macro_auc(&test_scores, &test_labels, classes)?;
    Ok(ProbeReport {
        per_class_auc: report.per_class_auc,
        macro_auc: report.macro_auc,
        best_epoch,
        epochs_run,
        degenerate_classes: report.degenerate_classes,
    })
}

/// Split a dataset's records by manifest split tags.
pub type SplitRefs<'a> = (Vec<&'a ECGRecord>, Vec<&'a ECGRecord>, Vec<&'a ECGRecord>);

pub fn split_refs<'a>(records: &'a [ECGRecord], tags: &[Split]) -> SplitRefs<'a> {
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    for (r, t) in records.iter().zip(tags) {
        match t {
            Split::Train => train.push(r),
            Split::Valid => valid.push(r),
            Split::Test => test.push(r),
        }
    }
    (train, valid, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ecg::synth::{generate_records, SynthSpec};

    fn corpus() -> (Vec<ECGRecord>, Vec<Split>) {
        let spec = SynthSpec {
            num_records: 48,
            duration_s: 1.0,
            sampling_rate_hz: 64.0,
            noise_std: 0.01,
            seed: 9,
            train_frac: 0.5,
            valid_frac: 0.25,
            ..SynthSpec::default()
        };
        generate_records(&spec).unwrap().into_iter().unzip()
    }

    fn tiny_ctx() -> AblationContext {
        AblationContext {
            encoder: EncoderConfig {
                in_leads: 1,
                stem_kernel: 7,
                stage_widths: vec![4, 8],
                blocks_per_stage: 1,
                embed_dim: 8,
                normalize_embeddings: true,
            },
            loss: LossConfig::default(),
            pretrain: PretrainConfig {
                batch_size: 8,
                epochs: 2,
                valid_size: 8,
                ..PretrainConfig::default()
            },
            probe: ProbeConfig {
                epochs: 3,
                batch_size: 8,
                ..ProbeConfig::default()
            },
            cut_lead: "I".to_string(),
        }
    }

    #[test]
    fn ablation_report_shape_and_no_align_dashes() {
        let (records, tags) = corpus();
        let (train, valid, test) = split_refs(&records, &tags);
        let classes: Vec<String> = ["st_elev", "q_deep", "t_inv"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let ctx = tiny_ctx();
        let cfg = AblationConfig {
            seeds: vec![0],
            ..AblationConfig::default()
        };
        let report = run_ablation(&ctx, &cfg, &train, &valid, &test, &classes).unwrap();
        assert_eq!(report.rows.len(), 2);
        let aligned = report.row("aligned (s: random, m: random)").unwrap();
        assert!(aligned.median_r1.is_some());
        assert!(aligned.median_valid_loss.is_some());
        let no_align = report.row(ARM_NO_ALIGN).unwrap();
        assert!(no_align.median_r1.is_none(), "no retrieval for no-align arm");
        assert!(no_align.median_test_macro_auc.is_finite());
        let text = report.render_text();
        assert!(text.contains("Avg AUC"));
        assert!(text.contains('-'));
    }

    #[test]
    fn supervised_baseline_is_deterministic() {
        let (records, tags) = corpus();
        let (train, valid, test) = split_refs(&records, &tags);
        let classes: Vec<String> = vec!["st_elev".into(), "q_deep".into(), "t_inv".into()];
        let ctx = tiny_ctx();
        let run = || {
            train_supervised(
                &ctx.encoder.for_leads(1),
                &ctx.probe,
                &train,
                &valid,
                &test,
                &classes,
                "I",
                7,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.macro_auc.to_bits(), b.macro_auc.to_bits());
        assert_eq!(a.best_epoch, b.best_epoch);
    }
}
