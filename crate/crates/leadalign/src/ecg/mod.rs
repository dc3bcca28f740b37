//! ECG record model, on-disk dataset format, and signal transforms.
//!
//! A dataset directory holds a `manifest.json` plus one raw `.ecgr` file per
//! record (little-endian f32, row-major `[leads x timestamps]`, no header —
//! shape and metadata come from the manifest). Records written by this crate
//! are always canonical-lead-ordered; the manifest also stores the lead names
//! explicitly so reduced-lead subsets stay unambiguous.

pub mod synth;

use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Canonical 12-lead order. Lead I (the usual smartwatch channel) is row 0.
pub const CANONICAL_LEADS: [&str; 12] = [
    "I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6",
];

/// Index of a lead name in the canonical order.
pub fn canonical_index(name: &str) -> Result<usize> {
    CANONICAL_LEADS
        .iter()
        .position(|&l| l == name)
        .ok_or_else(|| Error::UnknownLead(name.to_string()))
}

/// One multi-lead recording: sample matrix in millivolts plus metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ECGRecord {
    pub id: String,
    /// `[num_leads x num_timestamps]`, millivolts.
    pub samples: Array2<f32>,
    pub lead_names: Vec<String>,
    pub sampling_rate_hz: f64,
    pub labels: BTreeSet<String>,
}

impl ECGRecord {
    pub fn num_leads(&self) -> usize {
        self.samples.nrows()
    }

    pub fn num_samples(&self) -> usize {
        self.samples.ncols()
    }

    /// Row index of `lead` in this record.
    pub fn lead_row(&self, lead: &str) -> Result<usize> {
        self.lead_names
            .iter()
            .position(|l| l == lead)
            .ok_or_else(|| Error::UnknownLead(lead.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Valid => write!(f, "valid"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Per-record manifest entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub relative_path: String,
    pub num_leads: usize,
    pub num_samples: usize,
    pub sampling_rate_hz: f64,
    pub labels: Vec<String>,
    pub split_tag: Split,
    /// Lead names in row order; defaults to the canonical prefix when absent.
    #[serde(default)]
    pub lead_names: Option<Vec<String>>,
}

impl ManifestRecord {
    pub fn lead_names_or_canonical(&self) -> Vec<String> {
        match &self.lead_names {
            Some(names) => names.clone(),
            None => CANONICAL_LEADS[..self.num_leads]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

/// Index of a dataset directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub records: Vec<ManifestRecord>,
    pub label_vocabulary: Vec<String>,
}

pub const MANIFEST_VERSION: &str = "1";
pub const MANIFEST_FILE: &str = "manifest.json";

// ── transforms ──────────────────────────────────────────────────────────────

/// Replace every NaN/±Inf sample with 0.0. Total and idempotent.
pub fn sanitize(mut record: ECGRecord) -> ECGRecord {
    record
        .samples
        .mapv_inplace(|v| if v.is_finite() { v } else { 0.0 });
    record
}

/// Reorder rows so `lead_names` follows the canonical order (restricted to
/// the leads actually present). Idempotent; errors on names outside the
/// canonical vocabulary.
pub fn canonicalize_leads(record: ECGRecord) -> Result<ECGRecord> {
    let mut indexed: Vec<(usize, usize)> = Vec::with_capacity(record.lead_names.len());
    for (row, name) in record.lead_names.iter().enumerate() {
        indexed.push((canonical_index(name)?, row));
    }
    indexed.sort();
    for pair in indexed.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(Error::ManifestMismatch(format!(
                "record {:?} has duplicate lead {:?}",
                record.id, CANONICAL_LEADS[pair[0].0]
            )));
        }
    }
    let rows: Vec<usize> = indexed.iter().map(|&(_, row)| row).collect();
    let samples = record.samples.select(Axis(0), &rows);
    let lead_names = indexed
        .iter()
        .map(|&(ci, _)| CANONICAL_LEADS[ci].to_string())
        .collect();
    Ok(ECGRecord {
        samples,
        lead_names,
        ..record
    })
}

/// Zero-variance guard for per-lead standardization.
pub const ZSCORE_EPS: f64 = 1e-8;

/// Per-lead standardization with population standard deviation. Leads with
/// std <= 1e-8 are only mean-centered so flat leads never divide by zero.
pub fn zscore(mut record: ECGRecord) -> ECGRecord {
    for mut row in record.samples.rows_mut() {
        let n = row.len() as f64;
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = row
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        if std > ZSCORE_EPS {
            row.mapv_inplace(|v| ((v as f64 - mean) / std) as f32);
        } else {
            row.mapv_inplace(|v| (v as f64 - mean) as f32);
        }
    }
    record
}

/// Linear-interpolation resampling to `target_hz`. Endpoints are preserved
/// exactly; a no-op when the rates already match.
pub fn resample(record: ECGRecord, target_hz: f64) -> Result<ECGRecord> {
    if record.num_samples() < 2 {
        return Err(Error::EmptyRecord {
            id: record.id.clone(),
            num_samples: record.num_samples(),
        });
    }
    if target_hz == record.sampling_rate_hz {
        return Ok(record);
    }
    let n = record.num_samples();
    let n_out = ((n as f64) * target_hz / record.sampling_rate_hz).round() as usize;
    if n_out < 2 {
        return Err(Error::InvalidValue {
            key: "target_hz".to_string(),
            message: format!("resampling {n} samples to {target_hz} Hz leaves {n_out} samples"),
        });
    }
    let scale = (n - 1) as f64 / (n_out - 1) as f64;
    let mut out = Array2::<f32>::zeros((record.num_leads(), n_out));
    for (src, mut dst) in record.samples.rows().into_iter().zip(out.rows_mut()) {
        for j in 0..n_out {
            let pos = j as f64 * scale;
            let lo = pos.floor() as usize;
            if lo >= n - 1 {
                dst[j] = src[n - 1];
            } else {
                let frac = pos - lo as f64;
                dst[j] = (src[lo] as f64 * (1.0 - frac) + src[lo + 1] as f64 * frac) as f32;
            }
        }
    }
    Ok(ECGRecord {
        samples: out,
        sampling_rate_hz: target_hz,
        ..record
    })
}

// ── dataset io ──────────────────────────────────────────────────────────────

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

/// Read one record from a dataset directory. Fails with `CorruptFile` when
/// the file size disagrees with the manifest shape.
pub fn read_record(dir: &Path, entry: &ManifestRecord) -> Result<ECGRecord> {
    let path = dir.join(&entry.relative_path);
    let expected = (entry.num_leads * entry.num_samples * 4) as u64;
    let actual = fs::metadata(&path)?.len();
    if actual != expected {
        return Err(Error::CorruptFile {
            path,
            expected,
            actual,
        });
    }
    let names = entry.lead_names_or_canonical();
    if names.len() != entry.num_leads {
        return Err(Error::ManifestMismatch(format!(
            "record {:?}: {} lead names for num_leads {}",
            entry.id,
            names.len(),
            entry.num_leads
        )));
    }
    let mut file = fs::File::open(&path)?;
    let mut bytes = Vec::with_capacity(expected as usize);
    file.read_to_end(&mut bytes)?;
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let samples = Array2::from_shape_vec((entry.num_leads, entry.num_samples), values)
        .expect("length checked against manifest shape");
    Ok(ECGRecord {
        id: entry.id.clone(),
        samples,
        lead_names: names,
        sampling_rate_hz: entry.sampling_rate_hz,
        labels: entry.labels.iter().cloned().collect(),
    })
}

/// Write one record's sample file. Fails with `ManifestMismatch` when the
/// record's shape or metadata disagrees with the manifest entry.
pub fn write_record(dir: &Path, entry: &ManifestRecord, record: &ECGRecord) -> Result<()> {
    if record.num_leads() != entry.num_leads
        || record.num_samples() != entry.num_samples
        || record.id != entry.id
        || record.sampling_rate_hz != entry.sampling_rate_hz
    {
        return Err(Error::ManifestMismatch(format!(
            "record {:?} ({}x{} @ {} Hz) vs manifest entry {:?} ({}x{} @ {} Hz)",
            record.id,
            record.num_leads(),
            record.num_samples(),
            record.sampling_rate_hz,
            entry.id,
            entry.num_leads,
            entry.num_samples,
            entry.sampling_rate_hz
        )));
    }
    let path = dir.join(&entry.relative_path);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut bytes = Vec::with_capacity(record.samples.len() * 4);
    for &v in record.samples.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(&path)?;
    file.write_all(&bytes)?;
    Ok(())
}

/// Manifest entry describing `record`, stored at `records/<id>.ecgr`.
pub fn manifest_entry(record: &ECGRecord, split: Split) -> ManifestRecord {
    ManifestRecord {
        id: record.id.clone(),
        relative_path: format!("records/{}.ecgr", record.id),
        num_leads: record.num_leads(),
        num_samples: record.num_samples(),
        sampling_rate_hz: record.sampling_rate_hz,
        labels: record.labels.iter().cloned().collect(),
        split_tag: split,
        lead_names: Some(record.lead_names.clone()),
    }
}

/// A fully loaded dataset: manifest plus records in manifest order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<ECGRecord>,
    pub root: PathBuf,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let mut records = Vec::with_capacity(manifest.records.len());
        for entry in &manifest.records {
            records.push(read_record(dir, entry)?);
        }
        Ok(Dataset {
            manifest,
            records,
            root: dir.to_path_buf(),
        })
    }

    /// Records with the given split tag, in manifest order.
    pub fn split(&self, split: Split) -> Vec<&ECGRecord> {
        self.manifest
            .records
            .iter()
            .zip(&self.records)
            .filter(|(e, _)| e.split_tag == split)
            .map(|(_, r)| r)
            .collect()
    }

    pub fn require_split(&self, split: Split) -> Result<Vec<&ECGRecord>> {
        let records = self.split(split);
        if records.is_empty() {
            return Err(Error::MissingSplit(split.to_string()));
        }
        Ok(records)
    }
}
