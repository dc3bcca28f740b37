//! The alignment pre-training loop.
//!
//! Each step: collate self-cut pairs -> trainable single-lead tower (with
//! trace) and frozen multi-lead tower (stop-gradient, no trace) -> pairwise
//! sigmoid loss -> backprop through the single-lead tower only -> global-norm
//! clip -> AdamW with cosine annealing. The multi-lead tower is never handed
//! to the optimizer, so its parameter hash is constant across a run.
//!
//! At initialization both towers get their pooled-feature whitening
//! calibrated on the training split (unless a loaded checkpoint already
//! carries one); see the encoder module docs for why a fresh tower needs
//! this. The frozen tower's calibration, like its weights, never changes
//! afterwards.
//!
//! After each epoch the held-out tail of the dataset is scored with
//! retrieval R@{1,5,10} plus the validation loss, and checkpoints are
//! written (`last` every epoch, `best` by validation loss).

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ecg::ECGRecord;
use crate::encoder::{
    archive_tensors, backward, estimate_calib, forward, forward_stopgrad, params_from_tensors,
    EncoderConfig, EncoderParams,
};
use crate::error::{Error, Result};
use crate::loss::{siglip_grad, LossConfig};
use crate::opt::{adamw_update, cosine_lr, AdamHyper, AdamState};
use crate::pairs::{collate, PairBatch};
use crate::tensorio::{read_archive, write_archive, Tensor, TensorArchive};
use crate::{eval, nn::Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_grad_clip_norm")]
    pub grad_clip_norm: f64,
    #[serde(default)]
    pub mixed_precision: bool,
    #[serde(default)]
    pub seed: u64,
    /// Records held out from the end of the dataset for retrieval validation.
    #[serde(default = "default_valid_size")]
    pub valid_size: usize,
}

fn default_batch_size() -> usize {
    128
}
fn default_epochs() -> usize {
    20
}
fn default_peak_lr() -> f64 {
    1e-4
}
fn default_weight_decay() -> f64 {
    0.1
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
fn default_grad_clip_norm() -> f64 {
    1.0
}
fn default_valid_size() -> usize {
    64
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            peak_lr: default_peak_lr(),
            weight_decay: default_weight_decay(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            grad_clip_norm: default_grad_clip_norm(),
            mixed_precision: false,
            seed: 0,
            valid_size: default_valid_size(),
        }
    }
}

impl PretrainConfig {
    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// splitmix64: derive independent sub-seeds from one experiment seed.
pub fn subseed(seed: u64, tag: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SEED_TAG_INIT_S: u64 = 1;
const SEED_TAG_INIT_M: u64 = 2;
const SEED_TAG_SHUFFLE: u64 = 3;

/// Serializable ChaCha8 state: base seed plus stream/word position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// Word position, split to stay JSON-safe.
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            stream: 0,
            word_pos_hi: 0,
            word_pos_lo: 0,
        }
    }

    pub fn to_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }

    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        RngState {
            seed,
            stream: rng.get_stream(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }
}

/// Scalar Adam state for the learnable log-temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TempState {
    pub log_t: f64,
    pub m: f64,
    pub v: f64,
}

/// Complete resumable training state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub epoch: usize,
    pub total_steps: u64,
    pub params_s: EncoderParams<f64>,
    pub params_m: EncoderParams<f64>,
    pub opt_s: AdamState,
    pub temp: Option<TempState>,
    pub rng: RngState,
    pub best_valid_loss: f64,
    /// Single-lead weights at the best-validation-loss epoch so far.
    pub best_params_s: EncoderParams<f64>,
}

/// One line of the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub r1: f64,
    pub r5: Option<f64>,
    pub r10: Option<f64>,
    pub lr: f64,
    pub wall_s: f64,
}

impl EpochMetrics {
    /// Everything except wall time, for determinism comparisons.
    pub fn numeric_key(&self) -> (usize, u64, u64, u64, Option<u64>, Option<u64>, u64) {
        (
            self.epoch,
            self.train_loss.to_bits(),
            self.valid_loss.to_bits(),
            self.r1.to_bits(),
            self.r5.map(f64::to_bits),
            self.r10.map(f64::to_bits),
            self.lr.to_bits(),
        )
    }
}

pub struct Pretrainer {
    pub cfg: PretrainConfig,
    pub enc_cfg_s: EncoderConfig,
    pub enc_cfg_m: EncoderConfig,
    pub loss_cfg: LossConfig,
    pub cut_lead: String,
}

/// Initial tower weights: fresh random or a loaded checkpoint.
pub enum TowerInit {
    Random,
    Checkpoint(EncoderParams<f64>),
}

impl Pretrainer {
    pub fn new(
        cfg: PretrainConfig,
        encoder: &EncoderConfig,
        loss_cfg: LossConfig,
        cut_lead: &str,
    ) -> Self {
        Pretrainer {
            cfg,
            enc_cfg_s: encoder.for_leads(1),
            enc_cfg_m: encoder.for_leads(12),
            loss_cfg,
            cut_lead: cut_lead.to_string(),
        }
    }

    /// Fresh state: single-lead tower trainable, multi-lead tower frozen.
    /// Towers without a calibration (fresh random inits) get one estimated
    /// on the training records.
    pub fn init_state(
        &self,
        train: &[&ECGRecord],
        init_s: TowerInit,
        init_m: TowerInit,
    ) -> Result<TrainState> {
        let mut params_s = match init_s {
            TowerInit::Random => EncoderParams::init(&self.enc_cfg_s, subseed(self.cfg.seed, SEED_TAG_INIT_S)),
            TowerInit::Checkpoint(p) => p,
        };
        let mut params_m = match init_m {
            TowerInit::Random => EncoderParams::init(&self.enc_cfg_m, subseed(self.cfg.seed, SEED_TAG_INIT_M)),
            TowerInit::Checkpoint(p) => p,
        };
        params_m.trainable = false;
        let ids: Vec<String> = train.iter().map(|r| r.id.clone()).collect();
        if params_s.calib.is_none() {
            let batch = collate(train, &self.cut_lead)?;
            let single: Vec<ArrayView2<f32>> =
                batch.pairs.iter().map(|p| p.single_view.view()).collect();
            params_s.calib = Some(estimate_calib(&params_s, &self.enc_cfg_s, &single, &ids)?);
        }
        if params_m.calib.is_none() {
            let multi: Vec<ArrayView2<f32>> = train.iter().map(|r| r.samples.view()).collect();
            params_m.calib = Some(estimate_calib(&params_m, &self.enc_cfg_m, &multi, &ids)?);
        }
        let steps_per_epoch = (train.len() / self.cfg.batch_size) as u64;
        let opt_s = AdamState::new(&params_s);
        let temp = self.loss_cfg.learnable_temperature.then(|| TempState {
            log_t: self.loss_cfg.temperature.ln(),
            m: 0.0,
            v: 0.0,
        });
        Ok(TrainState {
            step: 0,
            epoch: 0,
            total_steps: steps_per_epoch * self.cfg.epochs as u64,
            best_params_s: params_s.clone(),
            params_s,
            params_m,
            opt_s,
            temp,
            rng: RngState::new(subseed(self.cfg.seed, SEED_TAG_SHUFFLE)),
            best_valid_loss: f64::INFINITY,
        })
    }

    /// Frozen-tower embeddings under the configured precision.
    pub fn m_embeddings(
        &self,
        state: &TrainState,
        views: &[ArrayView2<f32>],
        ids: &[String],
    ) -> Result<crate::encoder::EmbeddingBatch> {
        if self.cfg.mixed_precision {
            let pm: EncoderParams<f32> = state.params_m.cast();
            forward_stopgrad(&pm, &self.enc_cfg_m, views, ids)
        } else {
            forward_stopgrad(&state.params_m, &self.enc_cfg_m, views, ids)
        }
    }

    fn effective_loss_cfg(&self, state: &TrainState) -> LossConfig {
        match &state.temp {
            Some(t) => LossConfig {
                temperature: t.log_t.exp(),
                ..self.loss_cfg
            },
            None => self.loss_cfg,
        }
    }

    /// One optimizer step on one batch. Returns the batch loss.
    pub fn train_step(&self, state: &mut TrainState, batch: &PairBatch) -> Result<f64> {
        if batch.size() == 1 {
            log::warn!(
                "degenerate batch of size 1 at step {}: no in-batch negatives",
                state.step
            );
        }
        let loss_cfg = self.effective_loss_cfg(state);
        let (loss, mut grads, d_log_t) = if self.cfg.mixed_precision {
            self.step_grads::<f32>(state, batch, &loss_cfg)?
        } else {
            self.step_grads::<f64>(state, batch, &loss_cfg)?
        };
        if !loss.is_finite() {
            log::error!(
                "non-finite loss at step {}: lr={} grad_norm={} batch={}",
                state.step,
                cosine_lr(self.cfg.peak_lr, state.step, state.total_steps),
                grads.sq_norm().sqrt(),
                batch.size()
            );
            return Err(Error::NonFiniteLoss {
                step: state.step,
                loss,
            });
        }

        // global-norm clip over every trainable gradient, temperature included
        let mut sq = grads.sq_norm();
        if let Some(g) = d_log_t {
            sq += g * g;
        }
        let norm = sq.sqrt();
        let scale = if norm > self.cfg.grad_clip_norm && norm > 0.0 {
            self.cfg.grad_clip_norm / norm
        } else {
            1.0
        };
        if scale != 1.0 {
            grads.scale(scale);
        }

        let lr = cosine_lr(self.cfg.peak_lr, state.step, state.total_steps);
        state
            .opt_s
            .step(&mut state.params_s, &grads, lr, &self.cfg.adam());
        if let (Some(temp), Some(g)) = (&mut state.temp, d_log_t) {
            // plain Adam for the scalar: decaying a temperature toward
            // exp(0) = 1 would be meaningless
            let mut p = [temp.log_t];
            let mut m = [temp.m];
            let mut v = [temp.v];
            let hyper = AdamHyper {
                weight_decay: 0.0,
                ..self.cfg.adam()
            };
            adamw_update(&mut p, &[g * scale], &mut m, &mut v, state.opt_s.t, lr, &hyper);
            *temp = TempState {
                log_t: p[0],
                m: m[0],
                v: v[0],
            };
        }
        state.step += 1;
        Ok(loss)
    }

    fn step_grads<T: Scalar>(
        &self,
        state: &TrainState,
        batch: &PairBatch,
        loss_cfg: &LossConfig,
    ) -> Result<(f64, EncoderParams<f64>, Option<f64>)> {
        let params_s: EncoderParams<T> = state.params_s.cast();
        let ids = batch.record_ids();
        let single: Vec<ArrayView2<f32>> = batch.pairs.iter().map(|p| p.single_view.view()).collect();
        let multi: Vec<ArrayView2<f32>> = batch.pairs.iter().map(|p| p.multi_view.view()).collect();
        let (s_emb, trace) = forward(&params_s, &self.enc_cfg_s, &single, &ids)?;
        let m_emb = self.m_embeddings(state, &multi, &ids)?;
        let g = siglip_grad(&s_emb, &m_emb, loss_cfg)?;
        // d_m is discarded: the multi-lead branch is stop-gradient
        let grads = backward(&params_s, &self.enc_cfg_s, &trace, &g.d_s);
        Ok((g.loss, grads.cast::<f64>(), g.d_log_t))
    }

    /// Retrieval + loss on the held-out records.
    pub fn validate(&self, state: &TrainState, valid: &[&ECGRecord]) -> Result<(f64, Vec<(usize, f64)>)> {
        let batch = collate(valid, &self.cut_lead)?;
        let ids = batch.record_ids();
        let single: Vec<ArrayView2<f32>> = batch.pairs.iter().map(|p| p.single_view.view()).collect();
        let multi: Vec<ArrayView2<f32>> = batch.pairs.iter().map(|p| p.multi_view.view()).collect();
        let loss_cfg = self.effective_loss_cfg(state);
        let s_emb = if self.cfg.mixed_precision {
            let ps: EncoderParams<f32> = state.params_s.cast();
            forward_stopgrad(&ps, &self.enc_cfg_s, &single, &ids)?
        } else {
            forward_stopgrad(&state.params_s, &self.enc_cfg_s, &single, &ids)?
        };
        let m_emb = self.m_embeddings(state, &multi, &ids)?;
        let ks: Vec<usize> = eval::DEFAULT_KS
            .iter()
            .copied()
            .filter(|&k| k <= valid.len())
            .collect();
        let report = eval::retrieval_eval(&s_emb, &m_emb, &ks, &loss_cfg)?;
        let r_at = ks.iter().map(|&k| (k, report.r_at[&k])).collect();
        Ok((report.valid_loss, r_at))
    }

    /// Run (or resume) pre-training over `records` in dataset order: the
    /// last `valid_size` records are held out for validation, the rest are
    /// shuffled into training batches with `drop_last` semantics.
    pub fn fit(
        &self,
        records: &[&ECGRecord],
        init_s: TowerInit,
        init_m: TowerInit,
        run_dir: Option<&Path>,
        resume: Option<TrainState>,
    ) -> Result<(TrainState, Vec<EpochMetrics>)> {
        let needed = self.cfg.valid_size + self.cfg.batch_size;
        if records.len() < needed {
            return Err(Error::DatasetTooSmall {
                needed,
                actual: records.len(),
            });
        }
        let split_at = records.len() - self.cfg.valid_size;
        let train = &records[..split_at];
        let valid = &records[split_at..];
        let mut state = match resume {
            Some(s) => s,
            None => self.init_state(train, init_s, init_m)?,
        };
        let frozen_hash = state.params_m.hash_hex();
        let mut rng = state.rng.to_rng();
        let mut metrics = Vec::new();
        let steps_per_epoch = train.len() / self.cfg.batch_size;

        for epoch in state.epoch + 1..=self.cfg.epochs {
            let started = Instant::now();
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            let mut last_lr = 0.0;
            for chunk in order.chunks_exact(self.cfg.batch_size) {
                let batch_records: Vec<&ECGRecord> = chunk.iter().map(|&i| train[i]).collect();
                let batch = collate(&batch_records, &self.cut_lead)?;
                last_lr = cosine_lr(self.cfg.peak_lr, state.step, state.total_steps);
                loss_sum += self.train_step(&mut state, &batch)?;
            }
            let (valid_loss, r_at) = self.validate(&state, &valid.to_vec())?;
            debug_assert_eq!(state.params_m.hash_hex(), frozen_hash);
            state.epoch = epoch;
            state.rng = RngState::capture(state.rng.seed, &rng);
            let entry = EpochMetrics {
                epoch,
                train_loss: loss_sum / steps_per_epoch.max(1) as f64,
                valid_loss,
                r1: r_at.iter().find(|(k, _)| *k == 1).map(|(_, v)| *v).unwrap_or(0.0),
                r5: r_at.iter().find(|(k, _)| *k == 5).map(|(_, v)| *v),
                r10: r_at.iter().find(|(k, _)| *k == 10).map(|(_, v)| *v),
                lr: last_lr,
                wall_s: started.elapsed().as_secs_f64(),
            };
            log::info!(
                "epoch {epoch}: train_loss={:.4} valid_loss={:.4} r1={:.3}",
                entry.train_loss,
                entry.valid_loss,
                entry.r1
            );
            if let Some(dir) = run_dir {
                append_metrics(&dir.join("metrics.jsonl"), &entry)?;
                self.save_state(&state, &dir.join("checkpoint_last"))?;
            }
            if valid_loss < state.best_valid_loss {
                state.best_valid_loss = valid_loss;
                state.best_params_s = state.params_s.clone();
                if let Some(dir) = run_dir {
                    save_dual_checkpoint(
                        &state.params_s,
                        &state.params_m,
                        &self.enc_cfg_s,
                        &self.enc_cfg_m,
                        &self.effective_loss_cfg(&state),
                        &dir.join("checkpoint_best.ckpt"),
                    )?;
                }
            }
            metrics.push(entry);
        }
        assert_eq!(
            state.params_m.hash_hex(),
            frozen_hash,
            "frozen tower changed during training"
        );
        Ok((state, metrics))
    }

    /// Save resumable state as `<stem>.ckpt` (both towers, eval-loadable)
    /// plus `<stem>.opt` (optimizer moments, rng, counters).
    pub fn save_state(&self, state: &TrainState, stem: &Path) -> Result<()> {
        save_dual_checkpoint(
            &state.params_s,
            &state.params_m,
            &self.enc_cfg_s,
            &self.enc_cfg_m,
            &self.effective_loss_cfg(state),
            &stem.with_extension("ckpt"),
        )?;
        let mut tensors = archive_tensors(&state.opt_s.m, "adam_m.");
        tensors.extend(archive_tensors(&state.opt_s.v, "adam_v."));
        tensors.extend(archive_tensors(&state.best_params_s, "best_s."));
        let meta = serde_json::json!({
            "kind": "optimizer",
            "version": "1",
            "step": state.step,
            "epoch": state.epoch,
            "total_steps": state.total_steps,
            "adam_t": state.opt_s.t,
            "rng": state.rng,
            "best_valid_loss": state.best_valid_loss,
            "temp": state.temp,
        });
        write_archive(&stem.with_extension("opt"), &TensorArchive { meta, tensors })
    }

    pub fn load_state(&self, stem: &Path) -> Result<TrainState> {
        let ckpt = load_dual_checkpoint(&stem.with_extension("ckpt"))?;
        let (params_s, params_m) = (ckpt.params_s, ckpt.params_m);
        let opt_path = stem.with_extension("opt");
        let archive = read_archive(&opt_path)?;
        let meta = &archive.meta;
        let m = params_from_prefixed(&archive.tensors, &self.enc_cfg_s, "adam_m.")?;
        let v = params_from_prefixed(&archive.tensors, &self.enc_cfg_s, "adam_v.")?;
        let best_params_s = params_from_prefixed(&archive.tensors, &self.enc_cfg_s, "best_s.")?;
        let get_u64 = |key: &str| -> Result<u64> {
            meta[key].as_u64().ok_or_else(|| {
                Error::IncompatibleCheckpoint(format!("{}: missing {key}", opt_path.display()))
            })
        };
        let rng: RngState = serde_json::from_value(meta["rng"].clone())?;
        let temp: Option<TempState> = serde_json::from_value(meta["temp"].clone())?;
        Ok(TrainState {
            step: get_u64("step")?,
            epoch: get_u64("epoch")? as usize,
            total_steps: get_u64("total_steps")?,
            opt_s: AdamState {
                m,
                v,
                t: get_u64("adam_t")?,
            },
            params_s,
            params_m,
            temp,
            rng,
            best_valid_loss: meta["best_valid_loss"].as_f64().unwrap_or(f64::INFINITY),
            best_params_s,
        })
    }
}

fn params_from_prefixed(
    tensors: &[Tensor],
    cfg: &EncoderConfig,
    prefix: &str,
) -> Result<EncoderParams<f64>> {
    params_from_tensors(tensors, cfg, prefix)
}

fn append_metrics(path: &Path, entry: &EpochMetrics) -> Result<()> {
    use std::io::Write;
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    writeln!(file, "{}", serde_json::to_string(entry)?)?;
    Ok(())
}

/// Both towers in one archive, names prefixed `s.` / `m.` (calibration
/// constants included); loadable by the evaluation commands.
pub fn save_dual_checkpoint(
    params_s: &EncoderParams<f64>,
    params_m: &EncoderParams<f64>,
    cfg_s: &EncoderConfig,
    cfg_m: &EncoderConfig,
    loss_cfg: &LossConfig,
    path: &Path,
) -> Result<()> {
    let mut tensors = archive_tensors(params_s, "s.");
    tensors.extend(archive_tensors(params_m, "m."));
    let meta = serde_json::json!({
        "kind": "dual_encoder",
        "version": "1",
        "config_s": cfg_s,
        "config_m": cfg_m,
        "loss": loss_cfg,
    });
    write_archive(path, &TensorArchive { meta, tensors })
}

pub struct DualCheckpoint {
    pub params_s: EncoderParams<f64>,
    pub params_m: EncoderParams<f64>,
    pub cfg_s: EncoderConfig,
    pub cfg_m: EncoderConfig,
    pub loss_cfg: LossConfig,
}

pub fn load_dual_checkpoint(path: &Path) -> Result<DualCheckpoint> {
    let archive = read_archive(path)?;
    let cfg_s: EncoderConfig = serde_json::from_value(archive.meta["config_s"].clone())
        .map_err(|e| Error::IncompatibleCheckpoint(format!("{}: {e}", path.display())))?;
    let cfg_m: EncoderConfig = serde_json::from_value(archive.meta["config_m"].clone())
        .map_err(|e| Error::IncompatibleCheckpoint(format!("{}: {e}", path.display())))?;
    let loss_cfg: LossConfig = serde_json::from_value(archive.meta["loss"].clone())
        .unwrap_or_default();
    let params_s = params_from_tensors(&archive.tensors, &cfg_s, "s.")?;
    let mut params_m = params_from_tensors(&archive.tensors, &cfg_m, "m.")?;
    params_m.trainable = false;
    Ok(DualCheckpoint {
        params_s,
        params_m,
        cfg_s,
        cfg_m,
        loss_cfg,
    })
}

/// Output paths of a pre-training run directory.
pub fn run_paths(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join("metrics.jsonl"),
        dir.join("checkpoint_last.ckpt"),
        dir.join("checkpoint_best.ckpt"),
    )
}
