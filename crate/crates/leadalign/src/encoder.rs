//! Residual 1-D convolutional encoders with an explicit backward pass.
//!
//! Architecture (fixed up to the config knobs): stem conv (configurable odd
//! kernel, stride 2) -> one stage per entry of `stage_widths`, each holding
//! pre-activation residual blocks (kernel 7, stride 2 on the first block of
//! a stage) -> channel norm + relu -> global average pooling over time ->
//! fixed feature whitening -> linear projection to the embedding dimension,
//! optionally L2-normalized.
//!
//! The whitening ([`Calib`]) is a per-channel affine whose statistics are
//! estimated once from data ([`estimate_calib`]) and then frozen; it is the
//! moral equivalent of a batch-norm layer's running statistics. Without it,
//! pooled relu features share a large record-independent component, so a
//! freshly initialized tower maps every record to nearly the same embedding
//! direction and neither alignment targets nor alignment gradients carry
//! usable per-record signal. It is a constant of the function, not a
//! trainable parameter: the optimizer never sees it.
//!
//! The single-lead and multi-lead towers are this same network; they differ
//! only in the stem's input-channel count. The multi-lead tower is used
//! through [`forward_stopgrad`], which produces numerically identical
//! embeddings to [`forward`] but no trace, so no gradient can ever flow to
//! its parameters.

use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{
    conv_backward, conv_forward, gap, gap_backward, l2_normalize, l2_normalize_backward,
    linear_backward, linear_forward, norm_backward, norm_forward, relu, relu_backward,
    ConvParams, LinearParams, NormCache, NormParams, Scalar,
};
use crate::tensorio::{read_archive, write_archive, Tensor, TensorArchive};

/// Residual block kernel width.
pub const BLOCK_KERNEL: usize = 7;
/// Stem stride; every stage entry also halves time.
pub const STEM_STRIDE: usize = 2;

/// Architecture hyperparameters of one encoder tower.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    #[serde(default = "default_in_leads")]
    pub in_leads: usize,
    #[serde(default = "default_stem_kernel")]
    pub stem_kernel: usize,
    #[serde(default = "default_stage_widths")]
    pub stage_widths: Vec<usize>,
    #[serde(default = "default_blocks_per_stage")]
    pub blocks_per_stage: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_normalize")]
    pub normalize_embeddings: bool,
}

fn default_in_leads() -> usize {
    1
}
fn default_stem_kernel() -> usize {
    15
}
fn default_stage_widths() -> Vec<usize> {
    vec![64, 128, 256, 512]
}
fn default_blocks_per_stage() -> usize {
    2
}
fn default_embed_dim() -> usize {
    512
}
fn default_normalize() -> bool {
    true
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_leads: default_in_leads(),
            stem_kernel: default_stem_kernel(),
            stage_widths: default_stage_widths(),
            blocks_per_stage: default_blocks_per_stage(),
            embed_dim: default_embed_dim(),
            normalize_embeddings: default_normalize(),
        }
    }
}

impl EncoderConfig {
    /// Same architecture, different stem input-channel count.
    pub fn for_leads(&self, in_leads: usize) -> Self {
        EncoderConfig {
            in_leads,
            ..self.clone()
        }
    }

    /// Shortest accepted input: every downsampling layer must keep at least
    /// one time step (stem /2, then /2 per stage).
    pub fn min_input_len(&self) -> usize {
        1 << (1 + self.stage_widths.len())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Error::InvalidValue {
            key: "encoder".into(),
            message: m,
        };
        if self.in_leads == 0 {
            return Err(bad("in_leads must be positive".into()));
        }
        if self.stem_kernel == 0 || self.stem_kernel % 2 == 0 {
            return Err(bad(format!("stem_kernel must be odd, got {}", self.stem_kernel)));
        }
        if self.stage_widths.is_empty() || self.stage_widths.iter().any(|&w| w == 0) {
            return Err(bad(format!("bad stage_widths {:?}", self.stage_widths)));
        }
        if self.blocks_per_stage == 0 {
            return Err(bad("blocks_per_stage must be positive".into()));
        }
        if self.embed_dim == 0 {
            return Err(bad("embed_dim must be positive".into()));
        }
        Ok(())
    }
}

// ── parameter tree ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub norm1: NormParams<T>,
    pub conv1: ConvParams<T>,
    pub norm2: NormParams<T>,
    pub conv2: ConvParams<T>,
    /// 1x1 projection when channels or stride change; `None` = identity.
    pub skip: Option<ConvParams<T>>,
}

/// Fixed per-channel whitening of the pooled features: data statistics
/// estimated once, then constant (see module docs).
#[derive(Debug, Clone, PartialEq)]
pub struct Calib<T> {
    pub mean: Array1<T>,
    pub scale: Array1<T>,
}

/// All weights of one encoder tower. Also reused as the gradient/optimizer-
/// moment container, since gradients share the tree shape. `calib` is a
/// constant of the function, deliberately absent from [`Self::tensors`] /
/// [`Self::tensors_mut`] so the optimizer and gradient arithmetic never
/// touch it; checkpoints carry it separately.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub stem: ConvParams<T>,
    pub stages: Vec<Vec<BlockParams<T>>>,
    pub final_norm: NormParams<T>,
    pub head: LinearParams<T>,
    pub calib: Option<Calib<T>>,
    /// Frozen sets must stay bit-identical across training; the optimizer
    /// refuses to touch them.
    pub trainable: bool,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let w0 = cfg.stage_widths[0];
        let stem = ConvParams::zeros(cfg.in_leads, w0, cfg.stem_kernel, STEM_STRIDE);
        let mut stages = Vec::with_capacity(cfg.stage_widths.len());
        let mut in_ch = w0;
        for &width in &cfg.stage_widths {
            let mut blocks = Vec::with_capacity(cfg.blocks_per_stage);
            for b in 0..cfg.blocks_per_stage {
                let stride = if b == 0 { 2 } else { 1 };
                let block_in = if b == 0 { in_ch } else { width };
                let skip = if stride != 1 || block_in != width {
                    Some(ConvParams::zeros(block_in, width, 1, stride))
                } else {
                    None
                };
                blocks.push(BlockParams {
                    norm1: NormParams::identity(block_in),
                    conv1: ConvParams::zeros(block_in, width, BLOCK_KERNEL, stride),
                    norm2: NormParams::identity(width),
                    conv2: ConvParams::zeros(width, width, BLOCK_KERNEL, 1),
                    skip,
                });
            }
            stages.push(blocks);
            in_ch = width;
        }
        EncoderParams {
            stem,
            stages,
            final_norm: NormParams::identity(in_ch),
            head: LinearParams::zeros(in_ch, cfg.embed_dim),
            calib: None,
            trainable: true,
        }
    }

    /// Zero tree of the same shape, for gradients and optimizer moments.
    /// Gradient trees carry no calibration: it is not a parameter.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.calib = None;
        for (_, t) in z.tensors_mut() {
            t.fill(T::zero());
        }
        z
    }

    /// Deterministic random init: He-normal convs, identity norms, 1/sqrt(n)
    /// head. Tensors are drawn in enumeration order.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Self {
        let mut p = Self::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 1.0).unwrap();
        let fill_conv = |c: &mut ConvParams<T>, rng: &mut ChaCha8Rng| {
            let std = (2.0 / (c.in_ch * c.kernel) as f64).sqrt();
            for v in c.weight.iter_mut() {
                *v = T::from_f64(normal.sample(rng) * std);
            }
        };
        fill_conv(&mut p.stem, &mut rng);
        for stage in &mut p.stages {
            for block in stage {
                fill_conv(&mut block.conv1, &mut rng);
                fill_conv(&mut block.conv2, &mut rng);
                if let Some(skip) = &mut block.skip {
                    fill_conv(skip, &mut rng);
                }
            }
        }
        let head_std = 1.0 / (p.head.weight.ncols() as f64).sqrt();
        for v in p.head.weight.iter_mut() {
            *v = T::from_f64(normal.sample(&mut rng) * head_std);
        }
        p
    }

    pub fn cast<U: Scalar>(&self) -> EncoderParams<U> {
        let conv = |c: &ConvParams<T>| ConvParams::<U> {
            weight: c.weight.mapv(|v| U::from_f64(v.to_f64())),
            bias: c.bias.mapv(|v| U::from_f64(v.to_f64())),
            in_ch: c.in_ch,
            kernel: c.kernel,
            stride: c.stride,
        };
        let norm = |n: &NormParams<T>| NormParams::<U> {
            gamma: n.gamma.mapv(|v| U::from_f64(v.to_f64())),
            beta: n.beta.mapv(|v| U::from_f64(v.to_f64())),
        };
        EncoderParams {
            stem: conv(&self.stem),
            stages: self
                .stages
                .iter()
                .map(|blocks| {
                    blocks
                        .iter()
                        .map(|b| BlockParams {
                            norm1: norm(&b.norm1),
                            conv1: conv(&b.conv1),
                            norm2: norm(&b.norm2),
                            conv2: conv(&b.conv2),
                            skip: b.skip.as_ref().map(conv),
                        })
                        .collect()
                })
                .collect(),
            final_norm: norm(&self.final_norm),
            head: LinearParams {
                weight: self.head.weight.mapv(|v| U::from_f64(v.to_f64())),
                bias: self.head.bias.mapv(|v| U::from_f64(v.to_f64())),
            },
            calib: self.calib.as_ref().map(|c| Calib {
                mean: c.mean.mapv(|v| U::from_f64(v.to_f64())),
                scale: c.scale.mapv(|v| U::from_f64(v.to_f64())),
            }),
            trainable: self.trainable,
        }
    }

    /// Named tensors in fixed enumeration order, as (name, shape, values).
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        fn conv<'a, T: Scalar>(
            out: &mut Vec<(String, Vec<usize>, &'a [T])>,
            prefix: String,
            c: &'a ConvParams<T>,
        ) {
            out.push((
                format!("{prefix}.weight"),
                c.weight.shape().to_vec(),
                c.weight.as_slice().expect("standard layout"),
            ));
            out.push((
                format!("{prefix}.bias"),
                vec![c.bias.len()],
                c.bias.as_slice().expect("standard layout"),
            ));
        }
        fn norm<'a, T: Scalar>(
            out: &mut Vec<(String, Vec<usize>, &'a [T])>,
            prefix: String,
            n: &'a NormParams<T>,
        ) {
            out.push((
                format!("{prefix}.gamma"),
                vec![n.gamma.len()],
                n.gamma.as_slice().expect("standard layout"),
            ));
            out.push((
                format!("{prefix}.beta"),
                vec![n.beta.len()],
                n.beta.as_slice().expect("standard layout"),
            ));
        }
        let mut out = Vec::new();
        conv(&mut out, "stem".into(), &self.stem);
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, b) in stage.iter().enumerate() {
                let p = format!("stage{i}.block{j}");
                norm(&mut out, format!("{p}.norm1"), &b.norm1);
                conv(&mut out, format!("{p}.conv1"), &b.conv1);
                norm(&mut out, format!("{p}.norm2"), &b.norm2);
                conv(&mut out, format!("{p}.conv2"), &b.conv2);
                if let Some(skip) = &b.skip {
                    conv(&mut out, format!("{p}.skip"), skip);
                }
            }
        }
        norm(&mut out, "final_norm".into(), &self.final_norm);
        out.push((
            "head.weight".into(),
            self.head.weight.shape().to_vec(),
            self.head.weight.as_slice().expect("standard layout"),
        ));
        out.push((
            "head.bias".into(),
            vec![self.head.bias.len()],
            self.head.bias.as_slice().expect("standard layout"),
        ));
        out
    }

    /// Mutable flat views in the same order as [`tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out: Vec<(String, &mut [T])> = Vec::new();
        out.push(("stem.weight".into(), self.stem.weight.as_slice_mut().unwrap()));
        out.push(("stem.bias".into(), self.stem.bias.as_slice_mut().unwrap()));
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (j, b) in stage.iter_mut().enumerate() {
                let p = format!("stage{i}.block{j}");
                out.push((format!("{p}.norm1.gamma"), b.norm1.gamma.as_slice_mut().unwrap()));
                out.push((format!("{p}.norm1.beta"), b.norm1.beta.as_slice_mut().unwrap()));
                out.push((format!("{p}.conv1.weight"), b.conv1.weight.as_slice_mut().unwrap()));
                out.push((format!("{p}.conv1.bias"), b.conv1.bias.as_slice_mut().unwrap()));
                out.push((format!("{p}.norm2.gamma"), b.norm2.gamma.as_slice_mut().unwrap()));
                out.push((format!("{p}.norm2.beta"), b.norm2.beta.as_slice_mut().unwrap()));
                out.push((format!("{p}.conv2.weight"), b.conv2.weight.as_slice_mut().unwrap()));
                out.push((format!("{p}.conv2.bias"), b.conv2.bias.as_slice_mut().unwrap()));
                if let Some(skip) = &mut b.skip {
                    out.push((format!("{p}.skip.weight"), skip.weight.as_slice_mut().unwrap()));
                    out.push((format!("{p}.skip.bias"), skip.bias.as_slice_mut().unwrap()));
                }
            }
        }
        out.push(("final_norm.gamma".into(), self.final_norm.gamma.as_slice_mut().unwrap()));
        out.push(("final_norm.beta".into(), self.final_norm.beta.as_slice_mut().unwrap()));
        out.push(("head.weight".into(), self.head.weight.as_slice_mut().unwrap()));
        out.push(("head.bias".into(), self.head.bias.as_slice_mut().unwrap()));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    /// `self += other * scale`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        let theirs = other.tensors();
        for ((_, mine), (_, _, t)) in self.tensors_mut().into_iter().zip(theirs) {
            for (a, &b) in mine.iter_mut().zip(t.iter()) {
                *a = *a + b * scale;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for (_, t) in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = *v * s;
            }
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, _, d)| d.iter())
            .map(|&v| v.to_f64() * v.to_f64())
            .sum()
    }
}

impl EncoderParams<f64> {
    /// SHA-256 over names, shapes, and raw f64 bytes — calibration included,
    /// so the freeze contract covers every constant of the function.
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        for (name, shape, data) in self.tensors() {
            h.update(name.as_bytes());
            for d in shape {
                h.update((d as u64).to_le_bytes());
            }
            for &v in data {
                h.update(v.to_le_bytes());
            }
        }
        if let Some(c) = &self.calib {
            h.update(b"calib");
            for v in c.mean.iter().chain(c.scale.iter()) {
                h.update(v.to_le_bytes());
            }
        }
        hex_string(&h.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ── checkpoint io ───────────────────────────────────────────────────────────

/// Named tensors of a parameter set including the calibration constants,
/// the full on-disk form.
pub fn archive_tensors(params: &EncoderParams<f64>, prefix: &str) -> Vec<Tensor> {
    let mut tensors: Vec<Tensor> = params
        .tensors()
        .into_iter()
        .map(|(name, dims, data)| Tensor {
            name: format!("{prefix}{name}"),
            dims,
            data: data.to_vec(),
        })
        .collect();
    if let Some(c) = &params.calib {
        tensors.push(Tensor {
            name: format!("{prefix}calib.mean"),
            dims: vec![c.mean.len()],
            data: c.mean.to_vec(),
        });
        tensors.push(Tensor {
            name: format!("{prefix}calib.scale"),
            dims: vec![c.scale.len()],
            data: c.scale.to_vec(),
        });
    }
    tensors
}

pub fn save_params(
    params: &EncoderParams<f64>,
    cfg: &EncoderConfig,
    meta_extra: serde_json::Value,
    path: &Path,
) -> Result<()> {
    let tensors = archive_tensors(params, "");
    let meta = serde_json::json!({
        "kind": "encoder",
        "version": "1",
        "config": cfg,
        "extra": meta_extra,
    });
    write_archive(path, &TensorArchive { meta, tensors })
}

/// Load a checkpoint written by [`save_params`]; every tensor must match the
/// shape implied by `cfg` exactly.
pub fn load_params(path: &Path, cfg: &EncoderConfig) -> Result<EncoderParams<f64>> {
    let archive = read_archive(path)?;
    params_from_tensors(&archive.tensors, cfg, "")
        .map_err(|e| prefix_path(e, path))
}

fn prefix_path(e: Error, path: &Path) -> Error {
    match e {
        Error::IncompatibleCheckpoint(m) => {
            Error::IncompatibleCheckpoint(format!("{}: {m}", path.display()))
        }
        other => other,
    }
}

/// Rebuild an [`EncoderParams`] from named tensors, optionally selecting only
/// names under `prefix` (used when several towers share one archive).
pub fn params_from_tensors(
    tensors: &[Tensor],
    cfg: &EncoderConfig,
    prefix: &str,
) -> Result<EncoderParams<f64>> {
    cfg.validate()?;
    let mut params = EncoderParams::<f64>::zeros(cfg);
    let selected: Vec<(&str, &Tensor)> = tensors
        .iter()
        .filter_map(|t| t.name.strip_prefix(prefix).map(|n| (n, t)))
        .collect();
    let width = *cfg.stage_widths.last().expect("validated");
    let mut calib_count = 0usize;
    let calib_part = |name: &str| -> Result<Array1<f64>> {
        let t = selected
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing tensor {name:?}")))?
            .1;
        if t.data.len() != width {
            return Err(Error::IncompatibleCheckpoint(format!(
                "tensor {name:?} has {} values, config expects {width}",
                t.data.len()
            )));
        }
        Ok(Array1::from_vec(t.data.clone()))
    };
    if selected.iter().any(|(n, _)| *n == "calib.mean") {
        params.calib = Some(Calib {
            mean: calib_part("calib.mean")?,
            scale: calib_part("calib.scale")?,
        });
        calib_count = 2;
    }
    let mut expected = calib_count;
    for (name, slot) in params.tensors_mut() {
        expected += 1;
        let found = selected
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing tensor {name:?}")))?;
        let n: usize = found.1.dims.iter().product();
        if n != slot.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "tensor {name:?} has {} values, config expects {}",
                n,
                slot.len()
            )));
        }
        slot.copy_from_slice(&found.1.data);
    }
    if selected.len() != expected {
        return Err(Error::IncompatibleCheckpoint(format!(
            "archive holds {} tensors under {prefix:?}, config expects {expected}",
            selected.len()
        )));
    }
    Ok(params)
}

// ── forward / backward ──────────────────────────────────────────────────────

/// Matrix of embeddings with record-identity metadata.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    /// `[batch x embed_dim]`.
    pub vectors: Array2<f64>,
    pub record_ids: Vec<String>,
}

impl EmbeddingBatch {
    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "embeddings",
            "version": "1",
            "record_ids": self.record_ids,
        });
        let tensors = vec![Tensor {
            name: "vectors".into(),
            dims: self.vectors.shape().to_vec(),
            data: self.vectors.iter().copied().collect(),
        }];
        write_archive(path, &TensorArchive { meta, tensors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = read_archive(path)?;
        let t = archive.tensor("vectors").ok_or_else(|| {
            Error::IncompatibleCheckpoint(format!("{}: no 'vectors' tensor", path.display()))
        })?;
        if t.dims.len() != 2 {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{}: 'vectors' must be 2-D",
                path.display()
            )));
        }
        let vectors = Array2::from_shape_vec((t.dims[0], t.dims[1]), t.data.clone())
            .expect("dims validated");
        let record_ids: Vec<String> =
            serde_json::from_value(archive.meta["record_ids"].clone()).unwrap_or_else(|_| {
                (0..t.dims[0]).map(|i| format!("row-{i}")).collect()
            });
        if record_ids.len() != t.dims[0] {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{}: {} ids for {} rows",
                path.display(),
                record_ids.len(),
                t.dims[0]
            )));
        }
        Ok(EmbeddingBatch { vectors, record_ids })
    }
}

struct BlockInner<T> {
    n1: NormCache<T>,
    h1: Array2<T>,
    a: Array2<T>,
    n2: NormCache<T>,
    h2: Array2<T>,
}

/// Everything the backward pass needs for one item.
pub struct ItemTrace<T> {
    input: Array2<T>,
    /// acts[0] = stem output; acts[b+1] = output of flat block b.
    acts: Vec<Array2<T>>,
    inner: Vec<BlockInner<T>>,
    fin_n: NormCache<T>,
    fin_relu: Array2<T>,
    pooled: Array1<T>,
    emb: Array1<T>,
    l2_norm: Option<T>,
}

pub struct EncoderTrace<T> {
    items: Vec<ItemTrace<T>>,
}

fn block_forward<T: Scalar>(
    b: &BlockParams<T>,
    x: &Array2<T>,
    want_trace: bool,
) -> (Array2<T>, Option<BlockInner<T>>) {
    let (n1_out, n1) = norm_forward(&b.norm1, x);
    let h1 = relu(&n1_out);
    let a = conv_forward(&b.conv1, &h1);
    let (n2_out, n2) = norm_forward(&b.norm2, &a);
    let h2 = relu(&n2_out);
    let mut out = conv_forward(&b.conv2, &h2);
    match &b.skip {
        Some(skip) => out = out + conv_forward(skip, &h1),
        None => out = out + x,
    }
    let inner = want_trace.then(|| BlockInner { n1, h1, a, n2, h2 });
    (out, inner)
}

fn block_backward<T: Scalar>(
    b: &BlockParams<T>,
    g: &mut BlockParams<T>,
    x: &Array2<T>,
    inner: &BlockInner<T>,
    d_out: &Array2<T>,
) -> Array2<T> {
    let d_h2 = conv_backward(&b.conv2, &mut g.conv2, &inner.h2, d_out);
    let d_n2 = relu_backward(&inner.h2, &d_h2);
    let d_a = norm_backward(&b.norm2, &mut g.norm2, &inner.a, &inner.n2, &d_n2);
    let mut d_h1 = conv_backward(&b.conv1, &mut g.conv1, &inner.h1, &d_a);
    if let (Some(skip), Some(g_skip)) = (&b.skip, &mut g.skip) {
        d_h1 = d_h1 + conv_backward(skip, g_skip, &inner.h1, d_out);
    }
    let d_n1 = relu_backward(&inner.h1, &d_h1);
    let mut d_x = norm_backward(&b.norm1, &mut g.norm1, x, &inner.n1, &d_n1);
    if b.skip.is_none() {
        d_x = d_x + d_out;
    }
    d_x
}

fn forward_item<T: Scalar>(
    params: &EncoderParams<T>,
    cfg: &EncoderConfig,
    signal: &ArrayView2<f32>,
    want_trace: bool,
) -> (Array1<f64>, Option<ItemTrace<T>>) {
    let input = signal.mapv(|v| T::from_f64(v as f64));
    let stem_out = conv_forward(&params.stem, &input);
    let mut acts = vec![stem_out];
    let mut inner = Vec::new();
    for stage in &params.stages {
        for block in stage {
            let (out, cache) = block_forward(block, acts.last().unwrap(), want_trace);
            if let Some(c) = cache {
                inner.push(c);
            }
            acts.push(out);
        }
    }
    let (fin_out, fin_n) = norm_forward(&params.final_norm, acts.last().unwrap());
    let fin_relu = relu(&fin_out);
    let mut pooled = gap(&fin_relu);
    if let Some(c) = &params.calib {
        for ((p, &m), &s) in pooled.iter_mut().zip(c.mean.iter()).zip(c.scale.iter()) {
            *p = (*p - m) / s;
        }
    }
    let emb_raw = linear_forward(&params.head, &pooled);
    let (emb, l2_norm) = if cfg.normalize_embeddings {
        let (e, n) = l2_normalize(&emb_raw);
        (e, Some(n))
    } else {
        (emb_raw, None)
    };
    let emb_f64 = emb.mapv(|v| v.to_f64());
    let trace = want_trace.then(|| ItemTrace {
        input,
        acts,
        inner,
        fin_n,
        fin_relu,
        pooled,
        emb,
        l2_norm,
    });
    (emb_f64, trace)
}

fn check_inputs(cfg: &EncoderConfig, signals: &[ArrayView2<f32>], ids: &[String]) -> Result<()> {
    if signals.len() != ids.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} signals but {} ids",
            signals.len(),
            ids.len()
        )));
    }
    for (s, id) in signals.iter().zip(ids) {
        if s.nrows() != cfg.in_leads {
            return Err(Error::ShapeMismatch(format!(
                "record {id:?}: {} leads, encoder expects {}",
                s.nrows(),
                cfg.in_leads
            )));
        }
        if s.ncols() < cfg.min_input_len() {
            return Err(Error::ShapeMismatch(format!(
                "record {id:?}: {} samples, encoder needs at least {}",
                s.ncols(),
                cfg.min_input_len()
            )));
        }
    }
    Ok(())
}

fn assemble<T: Scalar>(
    cfg: &EncoderConfig,
    ids: &[String],
    rows: Vec<(Array1<f64>, Option<ItemTrace<T>>)>,
) -> (EmbeddingBatch, Vec<ItemTrace<T>>) {
    let mut vectors = Array2::<f64>::zeros((rows.len(), cfg.embed_dim));
    let mut traces = Vec::with_capacity(rows.len());
    for (i, (emb, trace)) in rows.into_iter().enumerate() {
        vectors.row_mut(i).assign(&emb);
        if let Some(t) = trace {
            traces.push(t);
        }
    }
    (
        EmbeddingBatch {
            vectors,
            record_ids: ids.to_vec(),
        },
        traces,
    )
}

/// Trunk features right before whitening/head: `[batch x last_width]`.
pub fn pooled_features<T: Scalar>(
    params: &EncoderParams<T>,
    cfg: &EncoderConfig,
    signals: &[ArrayView2<f32>],
    ids: &[String],
) -> Result<Array2<f64>> {
    check_inputs(cfg, signals, ids)?;
    let trunk = EncoderParams {
        calib: None,
        ..params.clone()
    };
    let rows: Vec<Array1<f64>> = signals
        .par_iter()
        .map(|s| {
            let input = s.mapv(|v| T::from_f64(v as f64));
            let stem_out = conv_forward(&trunk.stem, &input);
            let mut x = stem_out;
            for stage in &trunk.stages {
                for block in stage {
                    x = block_forward(block, &x, false).0;
                }
            }
            let (fin_out, _) = norm_forward(&trunk.final_norm, &x);
            gap(&relu(&fin_out)).mapv(|v| v.to_f64())
        })
        .collect();
    let width = rows.first().map_or(0, |r| r.len());
    let mut out = Array2::<f64>::zeros((rows.len(), width));
    for (i, r) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&r);
    }
    Ok(out)
}

/// Variance floor in the whitening scale.
pub const CALIB_EPS: f64 = 1e-8;

/// Estimate the pooled-feature whitening statistics over a calibration set.
/// Deterministic; chunked so memory stays flat.
pub fn estimate_calib(
    params: &EncoderParams<f64>,
    cfg: &EncoderConfig,
    signals: &[ArrayView2<f32>],
    ids: &[String],
) -> Result<Calib<f64>> {
    if signals.is_empty() {
        return Err(Error::TooFewSamples {
            needed: 1,
            actual: 0,
        });
    }
    let width = *cfg.stage_widths.last().expect("validated");
    let mut sum = Array1::<f64>::zeros(width);
    let mut sum_sq = Array1::<f64>::zeros(width);
    for (chunk_s, chunk_i) in signals.chunks(32).zip(ids.chunks(32)) {
        let pooled = pooled_features(params, cfg, chunk_s, chunk_i)?;
        for row in pooled.rows() {
            for (k, &v) in row.iter().enumerate() {
                sum[k] += v;
                sum_sq[k] += v * v;
            }
        }
    }
    let n = signals.len() as f64;
    let mean = sum / n;
    let scale = Array1::from_shape_fn(width, |k| {
        let var = (sum_sq[k] / n - mean[k] * mean[k]).max(0.0);
        (var + CALIB_EPS).sqrt()
    });
    Ok(Calib { mean, scale })
}

/// Batched forward pass that records a trace for [`backward`].
pub fn forward<T: Scalar>(
    params: &EncoderParams<T>,
    cfg: &EncoderConfig,
    signals: &[ArrayView2<f32>],
    ids: &[String],
) -> Result<(EmbeddingBatch, EncoderTrace<T>)> {
    check_inputs(cfg, signals, ids)?;
    let rows: Vec<_> = signals
        .par_iter()
        .map(|s| forward_item(params, cfg, s, true))
        .collect();
    let (batch, items) = assemble(cfg, ids, rows);
    Ok((batch, EncoderTrace { items }))
}

/// Forward pass with gradient flow detached: numerically identical values to
/// [`forward`], but nothing is cached, so no backward pass exists and the
/// parameters can never receive a gradient through this call.
pub fn forward_stopgrad<T: Scalar>(
    params: &EncoderParams<T>,
    cfg: &EncoderConfig,
    signals: &[ArrayView2<f32>],
    ids: &[String],
) -> Result<EmbeddingBatch> {
    check_inputs(cfg, signals, ids)?;
    let rows: Vec<_> = signals
        .par_iter()
        .map(|s| forward_item(params, cfg, s, false))
        .collect();
    Ok(assemble(cfg, ids, rows).0)
}

/// Items per gradient-accumulation chunk. Chunks are folded in index order,
/// so results do not depend on the worker-thread count.
const GRAD_CHUNK: usize = 8;

/// Backprop `d_emb` (one row per item) through the trace; returns the
/// parameter-gradient tree. The input gradient is discarded.
pub fn backward<T: Scalar>(
    params: &EncoderParams<T>,
    cfg: &EncoderConfig,
    trace: &EncoderTrace<T>,
    d_emb: &Array2<f64>,
) -> EncoderParams<T> {
    assert_eq!(d_emb.nrows(), trace.items.len(), "one gradient row per item");
    assert_eq!(d_emb.ncols(), cfg.embed_dim);
    let chunks: Vec<EncoderParams<T>> = trace
        .items
        .par_chunks(GRAD_CHUNK)
        .enumerate()
        .map(|(ci, items)| {
            let mut grad = params.zeros_like();
            for (k, item) in items.iter().enumerate() {
                let row = d_emb.row(ci * GRAD_CHUNK + k);
                let d: Array1<T> = row.mapv(|v| T::from_f64(v));
                backward_item(params, &mut grad, item, &d);
            }
            grad
        })
        .collect();
    let mut total = params.zeros_like();
    for chunk in &chunks {
        total.add_scaled(chunk, T::one());
    }
    total.trainable = true;
    total
}

fn backward_item<T: Scalar>(
    params: &EncoderParams<T>,
    grad: &mut EncoderParams<T>,
    item: &ItemTrace<T>,
    d_emb: &Array1<T>,
) {
    let d_raw = match item.l2_norm {
        Some(n) => l2_normalize_backward(&item.emb, n, d_emb),
        None => d_emb.clone(),
    };
    let mut d_pooled = linear_backward(&params.head, &mut grad.head, &item.pooled, &d_raw);
    if let Some(c) = &params.calib {
        for (d, &s) in d_pooled.iter_mut().zip(c.scale.iter()) {
            *d = *d / s;
        }
    }
    let d_fin_relu = gap_backward(&d_pooled, item.fin_relu.ncols());
    let d_fin_norm = relu_backward(&item.fin_relu, &d_fin_relu);
    let mut d = norm_backward(
        &params.final_norm,
        &mut grad.final_norm,
        item.acts.last().unwrap(),
        &item.fin_n,
        &d_fin_norm,
    );
    let mut flat = 0usize;
    for stage in &params.stages {
        flat += stage.len();
    }
    for (si, stage) in params.stages.iter().enumerate().rev() {
        for (bi, block) in stage.iter().enumerate().rev() {
            flat -= 1;
            d = block_backward(
                block,
                &mut grad.stages[si][bi],
                &item.acts[flat],
                &item.inner[flat],
                &d,
            );
        }
    }
    conv_backward(&params.stem, &mut grad.stem, &item.input, &d);
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};

    fn tiny_cfg(in_leads: usize) -> EncoderConfig {
        EncoderConfig {
            in_leads,
            stem_kernel: 7,
            stage_widths: vec![4, 8],
            blocks_per_stage: 1,
            embed_dim: 16,
            normalize_embeddings: true,
        }
    }

    fn rand_signal(rng: &mut ChaCha8Rng, leads: usize, t: usize) -> Array2<f32> {
        Array2::from_shape_fn((leads, t), |_| rng.gen_range(-1.0f32..1.0))
    }

    #[test]
    fn forward_shape_and_unit_norm() {
        let cfg = tiny_cfg(1);
        let params = EncoderParams::<f64>::init(&cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let signals: Vec<Array2<f32>> = (0..4).map(|_| rand_signal(&mut rng, 1, 100)).collect();
        let views: Vec<_> = signals.iter().map(|s| s.view()).collect();
        let ids: Vec<String> = (0..4).map(|i| format!("r{i}")).collect();
        let (batch, _) = forward(&params, &cfg, &views, &ids).unwrap();
        assert_eq!(batch.vectors.dim(), (4, 16));
        for row in batch.vectors.rows() {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5, "norm {n}");
        }
    }

    #[test]
    fn duplicate_inputs_give_identical_rows() {
        let cfg = tiny_cfg(1);
        let params = EncoderParams::<f64>::init(&cfg, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = rand_signal(&mut rng, 1, 80);
        let views = vec![s.view(), s.view()];
        let ids = vec!["a".to_string(), "b".to_string()];
        let (batch, _) = forward(&params, &cfg, &views, &ids).unwrap();
        assert_eq!(batch.vectors.row(0), batch.vectors.row(1));
    }

    #[test]
    fn stopgrad_values_match_forward() {
        let cfg = tiny_cfg(2);
        let params = EncoderParams::<f64>::init(&cfg, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = rand_signal(&mut rng, 2, 64);
        let views = vec![s.view()];
        let ids = vec!["x".to_string()];
        let (a, _) = forward(&params, &cfg, &views, &ids).unwrap();
        let b = forward_stopgrad(&params, &cfg, &views, &ids).unwrap();
        assert_eq!(a.vectors, b.vectors);
    }

    #[test]
    fn lead_count_mismatch_is_rejected() {
        let cfg = tiny_cfg(12);
        let params = EncoderParams::<f64>::init(&cfg, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = rand_signal(&mut rng, 1, 64);
        let views = vec![s.view()];
        let ids = vec!["x".to_string()];
        assert!(matches!(
            forward(&params, &cfg, &views, &ids),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn init_is_deterministic_and_checkpoint_roundtrips() {
        let cfg = tiny_cfg(1);
        let a = EncoderParams::<f64>::init(&cfg, 7);
        let b = EncoderParams::<f64>::init(&cfg, 7);
        assert_eq!(a.hash_hex(), b.hash_hex());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        save_params(&a, &cfg, serde_json::json!({"seed": 7}), &path).unwrap();
        let back = load_params(&path, &cfg).unwrap();
        assert_eq!(a.hash_hex(), back.hash_hex());
    }

    #[test]
    fn wrong_embed_dim_checkpoint_is_incompatible() {
        let cfg = tiny_cfg(1);
        let params = EncoderParams::<f64>::init(&cfg, 7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        save_params(&params, &cfg, serde_json::Value::Null, &path).unwrap();
        let mut other = cfg.clone();
        other.embed_dim = 32;
        assert!(matches!(
            load_params(&path, &other),
            Err(Error::IncompatibleCheckpoint(_))
        ));
    }

    #[test]
    fn towers_share_architecture_except_stem() {
        let cfg = tiny_cfg(1);
        let single = EncoderParams::<f64>::zeros(&cfg);
        let multi = EncoderParams::<f64>::zeros(&cfg.for_leads(12));
        let a = single.tensors();
        let b = multi.tensors();
        assert_eq!(a.len(), b.len());
        for ((an, ash, _), (bn, bsh, _)) in a.iter().zip(b.iter()) {
            assert_eq!(an, bn);
            if an == "stem.weight" {
                assert_eq!(ash[1], cfg.stem_kernel);
                assert_eq!(bsh[1], 12 * cfg.stem_kernel);
            } else {
                assert_eq!(ash, bsh, "{an}");
            }
        }
    }

    /// Full-encoder gradient check against central finite differences, with
    /// a quadratic loss on the embeddings.
    #[test]
    fn encoder_gradients_match_finite_differences() {
        let cfg = tiny_cfg(1);
        let params = EncoderParams::<f64>::init(&cfg, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let signals: Vec<Array2<f32>> = (0..2).map(|_| rand_signal(&mut rng, 1, 64)).collect();
        let views: Vec<_> = signals.iter().map(|s| s.view()).collect();
        let ids = vec!["a".to_string(), "b".to_string()];
        let target = Array2::from_shape_fn((2, cfg.embed_dim), |_| rng.gen_range(-0.5..0.5));

        let loss_of = |p: &EncoderParams<f64>| -> f64 {
            let emb = forward_stopgrad(p, &cfg, &views, &ids).unwrap();
            (&emb.vectors - &target).iter().map(|v| v * v).sum()
        };
        let (batch, trace) = forward(&params, &cfg, &views, &ids).unwrap();
        let d_emb = (&batch.vectors - &target).mapv(|v| 2.0 * v);
        let grad = backward(&params, &cfg, &trace, &d_emb);

        let h = 1e-5;
        let analytic: Vec<(String, Vec<f64>)> = grad
            .tensors()
            .into_iter()
            .map(|(n, _, d)| (n, d.to_vec()))
            .collect();
        let mut worst = 0.0f64;
        for (ti, (name, g)) in analytic.iter().enumerate() {
            // probe a few entries of each tensor to keep runtime modest
            let stride = (g.len() / 5).max(1);
            for idx in (0..g.len()).step_by(stride) {
                let mut pp = params.clone();
                pp.tensors_mut()[ti].1[idx] += h;
                let lp = loss_of(&pp);
                let mut pm = params.clone();
                pm.tensors_mut()[ti].1[idx] -= h;
                let lm = loss_of(&pm);
                let fd = (lp - lm) / (2.0 * h);
                let denom = g[idx].abs().max(fd.abs()).max(1e-6);
                let rel = ((g[idx] - fd) / denom).abs();
                worst = worst.max(rel);
                assert!(rel < 1e-4, "{name}[{idx}]: analytic {} vs fd {fd}", g[idx]);
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
