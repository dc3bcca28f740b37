//! Command-line entry point: dataset synthesis and ingestion, alignment
//! pre-training, retrieval evaluation, linear probing, latent-gap
//! measurement, and the ablation driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use leadalign::ablation::{run_ablation, split_refs, AblationContext};
use leadalign::config::{parse_config, ExperimentConfig, Mode, RunLock};
use leadalign::ecg::{
    canonicalize_leads, manifest_entry, read_manifest, read_record, resample, sanitize,
    synth::{generate_synthetic, SynthSpec},
    write_manifest, write_record, Dataset, DatasetManifest, ECGRecord, Split, MANIFEST_VERSION,
};
use leadalign::encoder::EmbeddingBatch;
use leadalign::error::{Error, Result};
use leadalign::eval::{
    extract_embeddings, label_matrix, latent_gap_fid, linear_probe, retrieval_eval, ProbeInput,
    DEFAULT_KS,
};
use leadalign::encoder::load_params;
use leadalign::pairs::collate;
use leadalign::train::{load_dual_checkpoint, Pretrainer, TowerInit};

#[derive(Parser)]
#[command(name = "leadalign", version, about = "Cross-lead ECG alignment toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct CommonRunArgs {
    /// Experiment config file (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path overrides applied after the file, e.g. pretrain.epochs=2.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Dataset directory (overrides the config's `data`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (overrides the config's `output_dir`).
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Experiment seed (overrides the config's `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Force the single-process deterministic pipeline (always on; kept so
    /// runs record the intent).
    #[arg(long)]
    deterministic: bool,
}

impl CommonRunArgs {
    fn load(&self, mode: Mode) -> Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(data) = &self.data {
            overrides.push(format!("data=\"{}\"", data.display()));
        }
        if let Some(dir) = &self.output_dir {
            overrides.push(format!("output_dir=\"{}\"", dir.display()));
        }
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if self.deterministic {
            overrides.push("deterministic=true".to_string());
        }
        parse_config(self.config.as_deref(), &overrides, mode)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TowerArg {
    S,
    M,
}

#[derive(Clone, Copy, ValueEnum)]
enum InputModeArg {
    SingleLead,
    ZeroMask,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dipole-projection dataset.
    Synth {
        /// TOML file describing the dataset (SynthSpec fields).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sanitize, canonicalize, and resample an existing dataset directory.
    Ingest {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500.0)]
        target_hz: f64,
    },
    /// Alignment pre-training on a dataset's train split.
    Pretrain {
        #[command(flatten)]
        common: CommonRunArgs,
        /// Initial single-lead tower checkpoint (random init when omitted).
        #[arg(long)]
        init_s: Option<PathBuf>,
        /// Initial multi-lead tower checkpoint (random init when omitted).
        #[arg(long)]
        init_m: Option<PathBuf>,
        /// Continue from `checkpoint_last` in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// 1-lead -> 12-lead retrieval metrics for a checkpoint.
    EvalRetrieval {
        #[command(flatten)]
        common: CommonRunArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Valid)]
        split: SplitArg,
    },
    /// Linear probing of a frozen encoder with macro ROC-AUC.
    Probe {
        #[command(flatten)]
        common: CommonRunArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// single-lead probes the s tower; zero-mask probes the m tower on
        /// zero-masked 12-lead input.
        #[arg(long, value_enum, default_value_t = InputModeArg::SingleLead)]
        input_mode: InputModeArg,
    },
    /// Fréchet distance between two embedding dumps.
    LatentGap {
        #[arg(long)]
        emb_a: PathBuf,
        #[arg(long)]
        emb_b: PathBuf,
    },
    /// Dump embeddings for a dataset split as a tensor archive.
    Embed {
        #[command(flatten)]
        common: CommonRunArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Valid)]
        split: SplitArg,
        #[arg(long, value_enum, default_value_t = TowerArg::S)]
        tower: TowerArg,
        #[arg(long)]
        out: PathBuf,
        /// Apply per-lead standardization before encoding.
        #[arg(long)]
        zscore: bool,
    },
    /// Alignment-vs-supervised comparison table.
    Ablate {
        #[command(flatten)]
        common: CommonRunArgs,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let out_dir = run_output_dir(&cli.cmd);
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({
                "error": e.to_string(),
                "kind": error_kind(&e),
            });
            eprintln!("{record}");
            if let Some(dir) = out_dir {
                if std::fs::create_dir_all(&dir).is_ok() {
                    let _ = std::fs::write(
                        dir.join("error.json"),
                        serde_json::to_string_pretty(&record).unwrap_or_default(),
                    );
                }
            }
            ExitCode::FAILURE
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::UnknownLead(_) => "UnknownLead",
        Error::EmptyRecord { .. } => "EmptyRecord",
        Error::CorruptFile { .. } => "CorruptFile",
        Error::ManifestMismatch(_) => "ManifestMismatch",
        Error::DuplicateRecord(_) => "DuplicateRecord",
        Error::LengthMismatch { .. } => "LengthMismatch",
        Error::ShapeMismatch(_) => "ShapeMismatch",
        Error::IncompatibleCheckpoint(_) => "IncompatibleCheckpoint",
        Error::NonFiniteLoss { .. } => "NonFiniteLoss",
        Error::DatasetTooSmall { .. } => "DatasetTooSmall",
        Error::BatchMismatch(_) => "BatchMismatch",
        Error::DuplicateId(_) => "DuplicateId",
        Error::MissingSplit(_) => "MissingSplit",
        Error::TooFewSamples { .. } => "TooFewSamples",
        Error::UnknownKey(_) => "UnknownKey",
        Error::InvalidValue { .. } => "InvalidValue",
        Error::UnknownClass(_) => "UnknownClass",
        Error::OutputDirLocked(_) => "OutputDirLocked",
        Error::Io(_) => "Io",
        Error::Json(_) => "Json",
        Error::Config(_) => "Config",
    }
}

fn run_output_dir(cmd: &Cmd) -> Option<PathBuf> {
    match cmd {
        Cmd::Pretrain { common, .. }
        | Cmd::EvalRetrieval { common, .. }
        | Cmd::Probe { common, .. }
        | Cmd::Ablate { common } => common.output_dir.clone(),
        _ => None,
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth { spec, out, seed } => cmd_synth(&spec, &out, seed),
        Cmd::Ingest {
            input,
            out,
            target_hz,
        } => cmd_ingest(&input, &out, target_hz),
        Cmd::Pretrain {
            common,
            init_s,
            init_m,
            resume,
        } => cmd_pretrain(&common, init_s.as_deref(), init_m.as_deref(), resume),
        Cmd::EvalRetrieval {
            common,
            ckpt,
            split,
        } => cmd_eval_retrieval(&common, &ckpt, split.into()),
        Cmd::Probe {
            common,
            ckpt,
            input_mode,
        } => cmd_probe(&common, &ckpt, input_mode),
        Cmd::LatentGap { emb_a, emb_b } => {
            let a = EmbeddingBatch::load(&emb_a)?;
            let b = EmbeddingBatch::load(&emb_b)?;
            let fid = latent_gap_fid(&a, &b)?;
            println!(
                "{}",
                serde_json::json!({"fid": fid, "n_a": a.len(), "n_b": b.len()})
            );
            Ok(())
        }
        Cmd::Embed {
            common,
            ckpt,
            split,
            tower,
            out,
            zscore,
        } => cmd_embed(&common, &ckpt, split.into(), tower, &out, zscore),
        Cmd::Ablate { common } => cmd_ablate(&common),
    }
}

fn cmd_synth(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let text = std::fs::read_to_string(spec_path)?;
    let mut spec: SynthSpec = toml::from_str(&text)?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let manifest = generate_synthetic(&spec, out)?;
    println!(
        "{}",
        serde_json::json!({
            "records": manifest.records.len(),
            "label_vocabulary": manifest.label_vocabulary,
            "out": out,
        })
    );
    Ok(())
}

fn cmd_ingest(input: &Path, out: &Path, target_hz: f64) -> Result<()> {
    let manifest = read_manifest(input)?;
    let mut entries = Vec::with_capacity(manifest.records.len());
    for entry in &manifest.records {
        let record = read_record(input, entry)?;
        let record = sanitize(record);
        let record = canonicalize_leads(record)?;
        let record = resample(record, target_hz)?;
        let new_entry = manifest_entry(&record, entry.split_tag);
        write_record(out, &new_entry, &record)?;
        entries.push(new_entry);
    }
    let new_manifest = DatasetManifest {
        version: MANIFEST_VERSION.to_string(),
        records: entries,
        label_vocabulary: manifest.label_vocabulary,
    };
    write_manifest(out, &new_manifest)?;
    println!(
        "{}",
        serde_json::json!({"records": new_manifest.records.len(), "out": out, "target_hz": target_hz})
    );
    Ok(())
}

fn cmd_pretrain(
    common: &CommonRunArgs,
    init_s: Option<&Path>,
    init_m: Option<&Path>,
    resume: bool,
) -> Result<()> {
    let cfg = common.load(Mode::Pretrain)?;
    let _lock = RunLock::acquire(&cfg.output_dir)?;
    cfg.echo(&cfg.output_dir)?;
    let dataset = Dataset::load(cfg.data.as_ref().expect("validated"))?;
    let train = dataset.require_split(Split::Train)?;
    let trainer = Pretrainer::new(cfg.pretrain.clone(), &cfg.encoder, cfg.loss, &cfg.cut_lead);
    let tower = |path: Option<&Path>, enc: &leadalign::encoder::EncoderConfig| -> Result<TowerInit> {
        Ok(match path {
            Some(p) => TowerInit::Checkpoint(load_params(p, enc)?),
            None => TowerInit::Random,
        })
    };
    let resume_state = if resume {
        Some(trainer.load_state(&cfg.output_dir.join("checkpoint_last"))?)
    } else {
        None
    };
    let (state, metrics) = trainer.fit(
        &train,
        tower(init_s, &trainer.enc_cfg_s)?,
        tower(init_m, &trainer.enc_cfg_m)?,
        Some(&cfg.output_dir),
        resume_state,
    )?;
    let last = metrics.last();
    println!(
        "{}",
        serde_json::json!({
            "epochs": state.epoch,
            "steps": state.step,
            "best_valid_loss": state.best_valid_loss,
            "final": last,
            "output_dir": cfg.output_dir,
        })
    );
    Ok(())
}

fn load_split_records(cfg: &ExperimentConfig, split: Split) -> Result<(Dataset, Vec<usize>)> {
    let dataset = Dataset::load(cfg.data.as_ref().expect("validated"))?;
    let idx: Vec<usize> = dataset
        .manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, e)| e.split_tag == split)
        .map(|(i, _)| i)
        .collect();
    if idx.is_empty() {
        return Err(Error::MissingSplit(split.to_string()));
    }
    Ok((dataset, idx))
}

fn cmd_eval_retrieval(common: &CommonRunArgs, ckpt: &Path, split: Split) -> Result<()> {
    let cfg = common.load(Mode::EvalRetrieval)?;
    let dual = load_dual_checkpoint(ckpt)?;
    let (dataset, idx) = load_split_records(&cfg, split)?;
    let records: Vec<&ECGRecord> = idx.iter().map(|&i| &dataset.records[i]).collect();
    let batch = collate(&records, &cfg.cut_lead)?;
    let ids = batch.record_ids();
    let single: Vec<_> = batch.pairs.iter().map(|p| p.single_view.view()).collect();
    let multi: Vec<_> = batch.pairs.iter().map(|p| p.multi_view.view()).collect();
    let s_emb = leadalign::encoder::forward_stopgrad(&dual.params_s, &dual.cfg_s, &single, &ids)?;
    let m_emb = leadalign::encoder::forward_stopgrad(&dual.params_m, &dual.cfg_m, &multi, &ids)?;
    let ks: Vec<usize> = DEFAULT_KS.iter().copied().filter(|&k| k <= records.len()).collect();
    let report = retrieval_eval(&s_emb, &m_emb, &ks, &dual.loss_cfg)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(
        cfg.output_dir.join("retrieval.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!("n = {}", report.n);
    for (k, v) in &report.r_at {
        println!("R@{k:<3} = {v:.4}");
    }
    println!("loss  = {:.4}", report.valid_loss);
    Ok(())
}

fn cmd_probe(common: &CommonRunArgs, ckpt: &Path, input_mode: InputModeArg) -> Result<()> {
    let cfg = common.load(Mode::Probe)?;
    let _lock = RunLock::acquire(&cfg.output_dir)?;
    cfg.echo(&cfg.output_dir)?;
    let dual = load_dual_checkpoint(ckpt)?;
    let (params_s, params_m, enc_s, enc_m) =
        (dual.params_s, dual.params_m, dual.cfg_s, dual.cfg_m);
    let dataset = Dataset::load(cfg.data.as_ref().expect("validated"))?;
    let classes = dataset.manifest.label_vocabulary.clone();
    let tags: Vec<Split> = dataset.manifest.records.iter().map(|e| e.split_tag).collect();
    let (train, valid, test) = split_refs(&dataset.records, &tags);
    for (name, split) in [("train", &train), ("valid", &valid), ("test", &test)] {
        if split.is_empty() {
            return Err(Error::MissingSplit(name.to_string()));
        }
    }
    let (params, enc, input) = match input_mode {
        InputModeArg::SingleLead => (
            &params_s,
            &enc_s,
            ProbeInput::SingleLead {
                cut_lead: cfg.cut_lead.clone(),
            },
        ),
        InputModeArg::ZeroMask => (
            &params_m,
            &enc_m,
            ProbeInput::ZeroMask {
                keep_lead: cfg.cut_lead.clone(),
            },
        ),
    };
    let embed = |records: &[&ECGRecord]| extract_embeddings(params, enc, records, &input, true);
    let report = linear_probe(
        (&embed(&train)?, &label_matrix(&train, &classes)),
        (&embed(&valid)?, &label_matrix(&valid, &classes)),
        (&embed(&test)?, &label_matrix(&test, &classes)),
        &classes,
        &cfg.probe,
    )?;
    std::fs::write(
        cfg.output_dir.join("probe.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!("{:<12} {:>8}", "class", "AUC");
    for (class, auc) in &report.per_class_auc {
        println!("{class:<12} {auc:>8.4}");
    }
    println!("{:<12} {:>8.4}", "macro", report.macro_auc);
    println!(
        "best epoch {} of {} run",
        report.best_epoch, report.epochs_run
    );
    Ok(())
}

fn cmd_embed(
    common: &CommonRunArgs,
    ckpt: &Path,
    split: Split,
    tower: TowerArg,
    out: &Path,
    zscore: bool,
) -> Result<()> {
    let cfg = common.load(Mode::EvalRetrieval)?;
    let dual = load_dual_checkpoint(ckpt)?;
    let (dataset, idx) = load_split_records(&cfg, split)?;
    let records: Vec<&ECGRecord> = idx.iter().map(|&i| &dataset.records[i]).collect();
    let emb = match tower {
        TowerArg::S => extract_embeddings(
            &dual.params_s,
            &dual.cfg_s,
            &records,
            &ProbeInput::SingleLead {
                cut_lead: cfg.cut_lead.clone(),
            },
            zscore,
        )?,
        TowerArg::M => {
            // the m tower embeds the full record
            let prepared: Vec<ECGRecord> = records
                .iter()
                .map(|&r| {
                    if zscore {
                        leadalign::ecg::zscore(r.clone())
                    } else {
                        r.clone()
                    }
                })
                .collect();
            let views: Vec<_> = prepared.iter().map(|r| r.samples.view()).collect();
            let ids: Vec<String> = prepared.iter().map(|r| r.id.clone()).collect();
            leadalign::encoder::forward_stopgrad(&dual.params_m, &dual.cfg_m, &views, &ids)?
        }
    };
    emb.save(out)?;
    println!(
        "{}",
        serde_json::json!({"rows": emb.len(), "dim": emb.vectors.ncols(), "out": out})
    );
    Ok(())
}

fn cmd_ablate(common: &CommonRunArgs) -> Result<()> {
    let cfg = common.load(Mode::Ablate)?;
    let _lock = RunLock::acquire(&cfg.output_dir)?;
    cfg.echo(&cfg.output_dir)?;
    let dataset = Dataset::load(cfg.data.as_ref().expect("validated"))?;
    let classes = dataset.manifest.label_vocabulary.clone();
    let tags: Vec<Split> = dataset.manifest.records.iter().map(|e| e.split_tag).collect();
    let (train, valid, test) = split_refs(&dataset.records, &tags);
    let ctx = AblationContext {
        encoder: cfg.encoder.clone(),
        loss: cfg.loss,
        pretrain: cfg.pretrain.clone(),
        probe: cfg.probe,
        cut_lead: cfg.cut_lead.clone(),
    };
    let report = run_ablation(&ctx, &cfg.ablation, &train, &valid, &test, &classes)?;
    std::fs::write(
        cfg.output_dir.join("ablation.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    print!("{}", report.render_text());
    Ok(())
}
