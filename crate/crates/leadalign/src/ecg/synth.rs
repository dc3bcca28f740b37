//! Synthetic dipole-projection ECG generator.
//!
//! Cardiac activity is modelled as a 3-D time-varying dipole `d(t)`: a
//! periodic sum of five Gaussian bumps (P, Q, R, S, T waves), each with a
//! fixed direction and per-record jittered amplitude/timing. A record's 12
//! leads are fixed unit-norm linear projections of `d(t)`, so every lead is
//! genuinely one view of a shared source and noiseless records have rank <= 3.
//!
//! Synthetic lesion classes add extra dipole components whose directions have
//! a deliberately small lead-I component: class evidence is strong in the
//! precordial/inferior projections and weak in lead I.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    manifest_entry, write_manifest, write_record, DatasetManifest, ECGRecord, Split,
    CANONICAL_LEADS, MANIFEST_VERSION,
};
use crate::error::{Error, Result};

/// Declarative description of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_records: usize,
    #[serde(default = "default_num_leads")]
    pub num_leads: usize,
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    #[serde(default = "default_rate")]
    pub sampling_rate_hz: f64,
    #[serde(default = "default_class_set")]
    pub class_set: Vec<String>,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
    /// Fraction of records tagged train / valid; the remainder is test.
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
    #[serde(default = "default_valid_frac")]
    pub valid_frac: f64,
}

fn default_num_leads() -> usize {
    12
}
fn default_duration() -> f64 {
    10.0
}
fn default_rate() -> f64 {
    500.0
}
fn default_noise_std() -> f64 {
    0.02
}
fn default_class_set() -> Vec<String> {
    ["normal", "st_elev", "q_deep", "t_inv"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}
fn default_train_frac() -> f64 {
    0.7
}
fn default_valid_frac() -> f64 {
    0.15
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_records: 64,
            num_leads: default_num_leads(),
            duration_s: default_duration(),
            sampling_rate_hz: default_rate(),
            class_set: default_class_set(),
            noise_std: default_noise_std(),
            seed: 0,
            train_frac: default_train_frac(),
            valid_frac: default_valid_frac(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let invalid = |key: &str, message: String| Error::InvalidValue {
            key: key.to_string(),
            message,
        };
        if self.num_records == 0 {
            return Err(invalid("num_records", "must be positive".into()));
        }
        if self.num_leads != 12 {
            return Err(invalid(
                "num_leads",
                format!("only 12-lead generation is supported, got {}", self.num_leads),
            ));
        }
        if !(self.duration_s > 0.0) {
            return Err(invalid("duration_s", "must be positive".into()));
        }
        if !(self.sampling_rate_hz > 0.0) {
            return Err(invalid("sampling_rate_hz", "must be positive".into()));
        }
        if self.noise_std < 0.0 {
            return Err(invalid("noise_std", "must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.train_frac)
            || !(0.0..=1.0).contains(&self.valid_frac)
            || self.train_frac + self.valid_frac > 1.0
        {
            return Err(invalid("train_frac", "split fractions must lie in [0,1] and sum to <= 1".into()));
        }
        for class in &self.class_set {
            if class != "normal" && lesion(class).is_none() {
                return Err(Error::UnknownClass(class.clone()));
            }
        }
        Ok(())
    }
}

// ── dipole model constants ──────────────────────────────────────────────────

/// One Gaussian bump of the dipole trajectory.
#[derive(Debug, Clone, Copy)]
pub struct Wave {
    /// Beat-phase position of the bump center, in [0, 1).
    pub center_frac: f64,
    /// Bump width in seconds.
    pub width_s: f64,
    /// Peak magnitude in millivolts along `dir`.
    pub amp_mv: f64,
    /// Dipole direction (unit-normalized at use).
    pub dir: [f64; 3],
}

/// P, Q, R, S, T in beat order.
pub const WAVES: [Wave; 5] = [
    Wave { center_frac: 0.180, width_s: 0.040, amp_mv: 0.15, dir: [0.45, 0.80, 0.25] },
    Wave { center_frac: 0.285, width_s: 0.013, amp_mv: -0.20, dir: [0.20, -0.30, -0.90] },
    Wave { center_frac: 0.315, width_s: 0.018, amp_mv: 1.10, dir: [0.60, 0.70, 0.35] },
    Wave { center_frac: 0.345, width_s: 0.016, amp_mv: -0.35, dir: [-0.30, -0.50, 0.80] },
    Wave { center_frac: 0.550, width_s: 0.070, amp_mv: 0.40, dir: [0.40, 0.70, 0.55] },
];

/// Lead projection directions before normalization. Row 0 (lead I) is exactly
/// the x axis; frontal leads live in the x-y plane, precordial leads lean into
/// z. Unit-normalized rows of this table are the published projection matrix.
pub const LEAD_DIRECTIONS: [[f64; 3]; 12] = [
    [1.0, 0.0, 0.0],       // I
    [0.5, 0.866, 0.0],     // II
    [-0.5, 0.866, 0.0],    // III
    [-0.866, -0.5, 0.0],   // aVR
    [0.866, -0.5, 0.0],    // aVL
    [0.0, 1.0, 0.0],       // aVF
    [-0.35, 0.05, 0.935],  // V1
    [-0.10, 0.10, 0.99],   // V2
    [0.15, 0.25, 0.955],   // V3
    [0.35, 0.45, 0.82],    // V4
    [0.65, 0.45, 0.61],    // V5
    [0.85, 0.35, 0.39],    // V6
];

/// Unit-norm 12x3 lead projection matrix.
pub fn lead_projection_matrix() -> Array2<f64> {
    let mut m = Array2::zeros((12, 3));
    for (l, row) in LEAD_DIRECTIONS.iter().enumerate() {
        let n = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
        for k in 0..3 {
            m[[l, k]] = row[k] / n;
        }
    }
    m
}

/// How a lesion class perturbs the dipole.
#[derive(Debug, Clone, Copy)]
pub enum LesionShape {
    /// Flat offset over a beat-phase window with raised-cosine ramps.
    Plateau { start_frac: f64, end_frac: f64, ramp_frac: f64 },
    /// Extra Gaussian bump at a beat-phase position.
    Bump { center_frac: f64, width_s: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct Lesion {
    pub name: &'static str,
    pub shape: LesionShape,
    /// Millivolts along `dir`.
    pub magnitude_mv: f64,
    /// Direction with a small x (lead I) component, unit-normalized at use.
    pub dir: [f64; 3],
}

/// ST-segment phase window that is exactly flat (between the ramps of the
/// `st_elev` plateau); used by the window-mean checks.
pub const ST_FLAT_WINDOW: (f64, f64) = (0.42, 0.50);

pub const LESIONS: [Lesion; 3] = [
    Lesion {
        name: "st_elev",
        shape: LesionShape::Plateau { start_frac: 0.40, end_frac: 0.52, ramp_frac: 0.02 },
        magnitude_mv: 0.30,
        dir: [0.06, 0.30, 0.95],
    },
    Lesion {
        name: "q_deep",
        shape: LesionShape::Bump { center_frac: 0.285, width_s: 0.015 },
        magnitude_mv: -0.65,
        dir: [0.06, -0.35, -0.93],
    },
    Lesion {
        name: "t_inv",
        shape: LesionShape::Bump { center_frac: 0.550, width_s: 0.070 },
        magnitude_mv: -0.80,
        dir: [0.06, 0.55, 0.83],
    },
];

pub fn lesion(name: &str) -> Option<&'static Lesion> {
    LESIONS.iter().find(|l| l.name == name)
}

/// Probability that each lesion class is present in a record.
const LESION_PROB: f64 = 0.35;

// ── per-record parameters ───────────────────────────────────────────────────

/// Jittered beat parameters drawn once per record.
#[derive(Debug, Clone)]
pub struct RecordParams {
    pub period_s: f64,
    pub phase_frac: f64,
    pub amp_scale: [f64; 5],
    pub center_jitter_frac: [f64; 5],
    pub wave_dirs: [[f64; 3]; 5],
    /// Magnitude scale per entry of `LESIONS`.
    pub lesion_scale: [f64; 3],
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Spread of the per-record wave-direction jitter. Direction jitter is the
/// one per-record factor a single lead cannot fully observe (a lead sees one
/// projection), so it is kept small relative to the amplitude and timing
/// jitters that any lead can recover.
pub const DIR_JITTER_STD: f64 = 0.02;

pub fn draw_params(rng: &mut impl Rng) -> RecordParams {
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let period_s = rng.gen_range(0.70..1.00);
    let phase_frac = rng.gen_range(0.0..1.0);
    let mut amp_scale = [0.0; 5];
    let mut center_jitter_frac = [0.0; 5];
    let mut wave_dirs = [[0.0; 3]; 5];
    for w in 0..5 {
        amp_scale[w] = rng.gen_range(0.75..1.25);
        center_jitter_frac[w] = rng.gen_range(-0.012..0.012);
        let base = unit(WAVES[w].dir);
        let jittered = [
            base[0] + DIR_JITTER_STD * std_normal.sample(rng),
            base[1] + DIR_JITTER_STD * std_normal.sample(rng),
            base[2] + DIR_JITTER_STD * std_normal.sample(rng),
        ];
        wave_dirs[w] = unit(jittered);
    }
    let mut lesion_scale = [0.0; 3];
    for s in &mut lesion_scale {
        *s = rng.gen_range(0.8..1.2);
    }
    RecordParams {
        period_s,
        phase_frac,
        amp_scale,
        center_jitter_frac,
        wave_dirs,
        lesion_scale,
    }
}

/// Signed distance from `tau` to `center` on the unit circle, in [-0.5, 0.5).
fn wrapped(tau: f64, center: f64) -> f64 {
    let mut d = tau - center;
    d -= d.round();
    d
}

fn raised_cosine(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    0.5 - 0.5 * (std::f64::consts::PI * u).cos()
}

/// Clean dipole trajectory `[3 x n]` for one record (no projection, no noise).
pub fn render_dipole(
    params: &RecordParams,
    labels: &BTreeSet<String>,
    num_samples: usize,
    sampling_rate_hz: f64,
) -> Array2<f64> {
    let mut d = Array2::<f64>::zeros((3, num_samples));
    let period = params.period_s;
    for i in 0..num_samples {
        let t = i as f64 / sampling_rate_hz;
        let tau = (t / period + params.phase_frac).rem_euclid(1.0);
        let mut v = [0.0f64; 3];
        for (w, wave) in WAVES.iter().enumerate() {
            let center = wave.center_frac + params.center_jitter_frac[w];
            let width_frac = wave.width_s / period;
            let delta = wrapped(tau, center) / width_frac;
            let g = (-0.5 * delta * delta).exp();
            let a = wave.amp_mv * params.amp_scale[w] * g;
            for k in 0..3 {
                v[k] += a * params.wave_dirs[w][k];
            }
        }
        for (li, les) in LESIONS.iter().enumerate() {
            if !labels.contains(les.name) {
                continue;
            }
            let envelope = match les.shape {
                LesionShape::Plateau { start_frac, end_frac, ramp_frac } => {
                    let up = raised_cosine((tau - start_frac) / ramp_frac);
                    let down = raised_cosine((end_frac - tau) / ramp_frac);
                    if tau < start_frac || tau > end_frac {
                        0.0
                    } else {
                        up * down
                    }
                }
                LesionShape::Bump { center_frac, width_s } => {
                    let delta = wrapped(tau, center_frac) / (width_s / period);
                    (-0.5 * delta * delta).exp()
                }
            };
            let a = les.magnitude_mv * params.lesion_scale[li] * envelope;
            let dir = unit(les.dir);
            for k in 0..3 {
                v[k] += a * dir[k];
            }
        }
        for k in 0..3 {
            d[[k, i]] = v[k];
        }
    }
    d
}

/// Project a dipole trajectory through the lead matrix: `[12 x n]` millivolts.
pub fn project_leads(dipole: &Array2<f64>) -> Array2<f64> {
    lead_projection_matrix().dot(dipole)
}

fn draw_labels(rng: &mut impl Rng, class_set: &[String]) -> BTreeSet<String> {
    let mut labels = BTreeSet::new();
    for class in class_set {
        if class == "normal" {
            continue;
        }
        if rng.gen_bool(LESION_PROB) {
            labels.insert(class.clone());
        }
    }
    if labels.is_empty() && class_set.iter().any(|c| c == "normal") {
        labels.insert("normal".to_string());
    }
    labels
}

/// Generate record `index` of `spec`. Deterministic in `(spec, index)` —
/// records are independent ChaCha streams of the spec seed.
pub fn generate_record(spec: &SynthSpec, index: usize) -> ECGRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let params = draw_params(&mut rng);
    let labels = draw_labels(&mut rng, &spec.class_set);
    let n = (spec.duration_s * spec.sampling_rate_hz).round() as usize;
    let dipole = render_dipole(&params, &labels, n, spec.sampling_rate_hz);
    let clean = project_leads(&dipole);
    let mut samples = Array2::<f32>::zeros((12, n));
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).unwrap();
        for (dst, &src) in samples.iter_mut().zip(clean.iter()) {
            *dst = (src + noise.sample(&mut rng)) as f32;
        }
    } else {
        for (dst, &src) in samples.iter_mut().zip(clean.iter()) {
            *dst = src as f32;
        }
    }
    ECGRecord {
        id: format!("synth-{index:05}"),
        samples,
        lead_names: CANONICAL_LEADS.iter().map(|s| s.to_string()).collect(),
        sampling_rate_hz: spec.sampling_rate_hz,
        labels,
    }
}

fn split_for(spec: &SynthSpec, index: usize) -> Split {
    let n = spec.num_records as f64;
    let n_train = (n * spec.train_frac).round() as usize;
    let n_valid = (n * spec.valid_frac).round() as usize;
    if index < n_train {
        Split::Train
    } else if index < n_train + n_valid {
        Split::Valid
    } else {
        Split::Test
    }
}

/// Generate all records in memory (manifest order).
pub fn generate_records(spec: &SynthSpec) -> Result<Vec<(ECGRecord, Split)>> {
    spec.validate()?;
    Ok((0..spec.num_records)
        .map(|i| (generate_record(spec, i), split_for(spec, i)))
        .collect())
}

/// Generate a full dataset directory: `manifest.json` + one `.ecgr` per record.
pub fn generate_synthetic(spec: &SynthSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut entries = Vec::with_capacity(spec.num_records);
    std::fs::create_dir_all(out_dir)?;
    for i in 0..spec.num_records {
        let record = generate_record(spec, i);
        let entry = manifest_entry(&record, split_for(spec, i));
        write_record(out_dir, &entry, &record)?;
        entries.push(entry);
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION.to_string(),
        records: entries,
        label_vocabulary: spec.class_set.clone(),
    };
    write_manifest(out_dir, &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn small_spec(noise_std: f64) -> SynthSpec {
        SynthSpec {
            num_records: 4,
            duration_s: 2.0,
            sampling_rate_hz: 250.0,
            noise_std,
            seed: 11,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec(0.05);
        let a = generate_record(&spec, 2);
        let b = generate_record(&spec, 2);
        assert_eq!(a, b);
    }

    #[test]
    fn lead_i_is_pure_x_projection() {
        let spec = small_spec(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = draw_params(&mut rng);
        let labels = BTreeSet::new();
        let dipole = render_dipole(&params, &labels, 500, spec.sampling_rate_hz);
        let leads = project_leads(&dipole);
        for i in 0..500 {
            assert_eq!(leads[[0, i]], dipole[[0, i]]);
        }
    }

    #[test]
    fn noiseless_records_have_rank_at_most_three() {
        let spec = small_spec(0.0);
        let rec = generate_record(&spec, 0);
        let (c, n) = (rec.num_leads(), rec.num_samples());
        let s = DMatrix::from_fn(c, n, |i, j| rec.samples[[i, j]] as f64);
        let gram = &s * s.transpose();
        let eig = gram.symmetric_eigen();
        let mut ev: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
        ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!(ev[3] < 1e-8 * ev[0], "eigenvalues {ev:?}");
    }

    #[test]
    fn st_elevation_shifts_window_mean_in_precordial_lead() {
        // Same beat parameters with and without the lesion; the flat part of
        // the plateau must shift the designated lead's window mean by exactly
        // magnitude * lesion_scale * <lead row, lesion dir>.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = draw_params(&mut rng);
        let fs = 500.0;
        let n = 5000;
        let without = project_leads(&render_dipole(&params, &BTreeSet::new(), n, fs));
        let mut labels = BTreeSet::new();
        labels.insert("st_elev".to_string());
        let with = project_leads(&render_dipole(&params, &labels, n, fs));

        // Lead V2 (row 7) has the largest projection onto the lesion direction.
        let les = lesion("st_elev").unwrap();
        let proj = lead_projection_matrix();
        let dir = {
            let d = les.dir;
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            [d[0] / norm, d[1] / norm, d[2] / norm]
        };
        let lead = 7usize;
        let gain: f64 = (0..3).map(|k| proj[[lead, k]] * dir[k]).sum();
        let expected = les.magnitude_mv * params.lesion_scale[0] * gain;

        let mut diffs = Vec::new();
        for i in 0..n {
            let t = i as f64 / fs;
            let tau = (t / params.period_s + params.phase_frac).rem_euclid(1.0);
            if tau >= ST_FLAT_WINDOW.0 && tau <= ST_FLAT_WINDOW.1 {
                diffs.push(with[[lead, i]] - without[[lead, i]]);
            }
        }
        assert!(!diffs.is_empty());
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        assert!(
            (mean - expected).abs() < 1e-9,
            "window mean diff {mean} vs expected {expected}"
        );
    }

    #[test]
    fn lesion_evidence_is_weak_in_lead_i() {
        let proj = lead_projection_matrix();
        for les in &LESIONS {
            let dir = unit(les.dir);
            let in_lead_i: f64 = (0..3).map(|k| proj[[0, k]] * dir[k]).sum();
            let best = (0..12)
                .map(|l| (0..3).map(|k| proj[[l, k]] * dir[k]).sum::<f64>().abs())
                .fold(0.0, f64::max);
            assert!(in_lead_i.abs() < 0.1, "{}: lead I gain {in_lead_i}", les.name);
            assert!(best > 0.5, "{}: best lead gain {best}", les.name);
        }
    }

    #[test]
    fn unknown_class_is_rejected() {
        let mut spec = small_spec(0.0);
        spec.class_set.push("flutter".to_string());
        assert!(matches!(
            spec.validate(),
            Err(crate::error::Error::UnknownClass(_))
        ));
    }

    #[test]
    fn dataset_roundtrip_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec(0.02);
        let manifest = generate_synthetic(&spec, dir.path()).unwrap();
        assert_eq!(manifest.records.len(), spec.num_records);
        let ds = super::super::Dataset::load(dir.path()).unwrap();
        for (entry, rec) in ds.manifest.records.iter().zip(&ds.records) {
            assert_eq!(entry.id, rec.id);
            let direct = generate_record(&spec, entry.id[6..].parse::<usize>().unwrap());
            assert_eq!(rec, &direct);
        }
    }
}
