//! Command-line entry point.

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::augment::make_view_pair;
use crate::checkpoint::{self, META_FILE};
use crate::config::{load_config_with, RunConfig};
use crate::data::{load_nifti, make_splits_with, save_nifti, DatasetIndex};
use crate::error::{Error, IoContext, Result};
use crate::finetune::{
    cross_validate, emit_report, evaluate, finetune, score_histogram_csv, source_from, ClassifierModel, Report,
    HISTOGRAM_FILE,
};
use crate::moco::{pretrain, PretrainRun};
use crate::preprocess::run_pipeline;
use crate::synth::{generate_dataset, scan_external_dir, MANIFEST_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const LOG_FILE: &str = "log.jsonl";

#[derive(Debug, Parser)]
#[command(name = "neurofatigue", version, about = "Contrastive pretraining and fatigue classification for 4D fMRI")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `pretrain.epochs=30`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Threads for loading and augmentation.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Args)]
struct DataArg {
    /// Manifest file, directory holding `manifest.tsv`, or a directory of NIfTI files.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EvalSplit {
    All,
    Test,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic labeled dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Smooth and normalize every scan into the run directory.
    Preprocess {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Save the two augmented views of one scan.
    AugmentPreview {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Record position in the dataset.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Momentum-contrast pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Pretraining checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train a classifier on the train split and report on the test split.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Encoder weights; a fresh encoder when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a trained classifier.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = EvalSplit::All)]
        split: EvalSplit,
    },
    /// k-fold cross-validation.
    Crossval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score histogram, plus full metrics when a classifier is given.
    Report {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth { common }
            | Command::Preprocess { common, .. }
            | Command::AugmentPreview { common, .. }
            | Command::Pretrain { common, .. }
            | Command::Finetune { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Crossval { common, .. }
            | Command::Report { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Preprocess { .. } => "preprocess",
            Command::AugmentPreview { .. } => "augment-preview",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Evaluate { .. } => "evaluate",
            Command::Crossval { .. } => "crossval",
            Command::Report { .. } => "report",
        }
    }
}

/// Failures that are the caller's fault: exit code 2.
#[derive(Debug)]
struct Usage(String);

enum Failure {
    Usage(Usage),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(Usage(m)),
            e => Failure::Run(e),
        }
    }
}

/// JSON lines to stdout and to the run log.
struct Logger {
    file: Option<(PathBuf, File)>,
}

impl Logger {
    fn emit(&mut self, event: &str, mut fields: Value) {
        fields["event"] = event.into();
        println!("{fields}");
        if let Some((path, f)) = &mut self.file {
            if let Err(e) = writeln!(f, "{fields}") {
                eprintln!("warning: cannot append to {}: {e}", path.display());
            }
        }
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(Usage(m))) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn resolve_config(common: &Common) -> std::result::Result<RunConfig, Failure> {
    if let Some(p) = &common.config {
        if !p.is_file() {
            return Err(Failure::Usage(Usage(format!("config file {} not found", p.display()))));
        }
    }
    let mut overrides = common.set.clone();
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(o) = &common.out {
        overrides.push(format!("out_dir={}", toml::Value::String(o.to_string_lossy().into_owned())));
    }
    if let Some(w) = common.workers {
        overrides.push(format!("workers={w}"));
    }
    Ok(load_config_with(common.config.as_deref(), &overrides)?)
}

fn require_path(p: &Path, what: &str) -> std::result::Result<(), Failure> {
    if p.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(Usage(format!("{what} {} does not exist", p.display()))))
    }
}

fn require_checkpoint(p: &Path) -> std::result::Result<(), Failure> {
    if p.join(META_FILE).is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(Usage(format!("{} is not a checkpoint directory", p.display()))))
    }
}

fn dispatch(cmd: Command) -> std::result::Result<(), Failure> {
    let cfg = resolve_config(cmd.common())?;
    match &cmd {
        Command::Synth { .. } => {}
        Command::Preprocess { data, .. }
        | Command::AugmentPreview { data, .. }
        | Command::Pretrain { data, .. }
        | Command::Finetune { data, .. }
        | Command::Evaluate { data, .. }
        | Command::Crossval { data, .. }
        | Command::Report { data, .. } => require_path(&data.data, "data path")?,
    }
    match &cmd {
        Command::Pretrain { resume: Some(p), .. } => require_checkpoint(p)?,
        Command::Evaluate { checkpoint, .. } => require_checkpoint(checkpoint)?,
        Command::Finetune { checkpoint: Some(p), .. }
        | Command::Crossval { checkpoint: Some(p), .. }
        | Command::Report { checkpoint: Some(p), .. } => require_checkpoint(p)?,
        _ => {}
    }

    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out).at(&out)?;
    let resolved = out.join(RESOLVED_CONFIG);
    fs::write(&resolved, cfg.to_toml()).at(&resolved)?;
    let log_path = out.join(LOG_FILE);
    let file = OpenOptions::new().create(true).append(true).open(&log_path).at(&log_path)?;
    let mut log = Logger { file: Some((log_path, file)) };
    log.emit("start", json!({ "command": cmd.name(), "seed": cfg.seed, "config_hash": cfg.hash() }));

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", cfg.workers)))?;
    pool.install(|| execute(&cmd, &cfg, &mut log)).map_err(Failure::from)?;
    log.emit("done", json!({ "command": cmd.name() }));
    Ok(())
}

fn load_index(data: &Path, cfg: &RunConfig, log: &mut Logger) -> Result<DatasetIndex> {
    if data.is_file() {
        return DatasetIndex::load(data);
    }
    let manifest = data.join(MANIFEST_FILE);
    if manifest.is_file() {
        return DatasetIndex::load(&manifest);
    }
    let found = scan_external_dir(data, &cfg.eval.data_pattern)?;
    if !found.skipped.is_empty() {
        let p = cfg.out_dir.join("skipped.txt");
        fs::write(&p, found.skip_report()).at(&p)?;
        for (path, why) in &found.skipped {
            eprintln!("skipped {}: {why}", path.display());
        }
    }
    if let Some(w) = &found.warning {
        eprintln!("warning: {w}");
        log.emit("warning", json!({ "message": w }));
    }
    log.emit("indexed", json!({ "records": found.index.len(), "skipped": found.skipped.len() }));
    Ok(found.index)
}

fn report_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("reports")
}

fn execute(cmd: &Command, cfg: &RunConfig, log: &mut Logger) -> Result<()> {
    let out = &cfg.out_dir;
    match cmd {
        Command::Synth { .. } => {
            let index = generate_dataset(&cfg.synth, out)?;
            log.emit(
                "synth",
                json!({ "records": index.len(), "manifest": out.join(MANIFEST_FILE), "checksum": index.checksum() }),
            );
        }
        Command::Preprocess { data, .. } => {
            let index = load_index(&data.data, cfg, log)?;
            let records = index
                .records()
                .par_iter()
                .map(|r| {
                    let vs = run_pipeline(&load_nifti(&r.path)?, &cfg.preprocess)?;
                    let name = r.path.file_name().ok_or_else(|| Error::Validation(format!("bad path {}", r.path.display())))?;
                    let dest = out.join(name);
                    if dest == r.path {
                        return Err(Error::Config(format!("preprocessing would overwrite {}", dest.display())));
                    }
                    save_nifti(&vs, &dest)?;
                    let mut r = r.clone();
                    r.path = dest;
                    Ok(r)
                })
                .collect::<Result<Vec<_>>>()?;
            let index = DatasetIndex::new(records)?;
            index.save(out.join(MANIFEST_FILE))?;
            log.emit("preprocess", json!({ "records": index.len() }));
        }
        Command::AugmentPreview { data, index, .. } => {
            let idx = load_index(&data.data, cfg, log)?;
            let rec = idx
                .records()
                .get(*index)
                .ok_or_else(|| Error::Config(format!("--index {index} but the dataset has {} records", idx.len())))?;
            let pair = make_view_pair(&load_nifti(&rec.path)?, &cfg.augment, cfg.seed)?;
            save_nifti(&pair.view_a, out.join("view_a.nii"))?;
            save_nifti(&pair.view_b, out.join("view_b.nii"))?;
            log.emit(
                "augment_preview",
                json!({ "record": rec.path, "seed_a": pair.seed_a, "seed_b": pair.seed_b }),
            );
        }
        Command::Pretrain { data, resume, .. } => {
            let index = load_index(&data.data, cfg, log)?;
            let run = PretrainRun {
                encoder: cfg.encoder.clone(),
                pretrain: cfg.pretrain.clone(),
                augment: cfg.augment.clone(),
                seed: cfg.seed,
                out_dir: out.clone(),
                resume: resume.clone(),
            };
            // pretrain appends its own epoch lines to the run log
            let outcome = pretrain(&index, &run, &mut |e| {
                let mut v = serde_json::to_value(e).expect("serializes");
                v["event"] = "pretrain_epoch".into();
                println!("{v}");
            })?;
            log.emit("pretrain_done", json!({ "epochs": outcome.state.epoch, "checkpoint": outcome.last_checkpoint }));
        }
        Command::Finetune { data, checkpoint, .. } => {
            let index = load_index(&data.data, cfg, log)?;
            let split = make_splits_with(&index, cfg.eval.split, cfg.seed, cfg.eval.grouping)?;
            let source = source_from(checkpoint.as_deref(), &cfg.encoder);
            let outcome = finetune(&source, &index, &split, &cfg.finetune, cfg.augment.crop_len, cfg.seed, &mut |e| {
                let mut v = serde_json::to_value(e).expect("serializes");
                v["event"] = "finetune_epoch".into();
                println!("{v}");
            })?;
            let ckpt = out.join("checkpoints").join("classifier");
            let extra = json!({ "finetune": cfg.finetune, "provenance": outcome.provenance });
            outcome.model.save(
                &ckpt,
                extra,
                outcome.best_epoch,
                checkpoint::RngState { seed: cfg.seed, epoch: outcome.history.len() as u64 },
            )?;
            let test = index.subset(&split.test)?;
            let metrics = evaluate(&outcome.model, test.records())?;
            let report = Report {
                metrics: metrics.clone(),
                history: outcome.history,
                records: index.records().to_vec(),
                config_hash: cfg.hash(),
                seed: cfg.seed,
            };
            emit_report(&report, &report_dir(cfg))?;
            log.emit(
                "finetune_done",
                json!({
                    "provenance": outcome.provenance,
                    "best_epoch": outcome.best_epoch,
                    "checkpoint": ckpt,
                    "test": metrics,
                }),
            );
        }
        Command::Evaluate { data, checkpoint, split, .. } => {
            let index = load_index(&data.data, cfg, log)?;
            let model = ClassifierModel::load(checkpoint)?;
            let subset = match split {
                EvalSplit::All => index.clone(),
                EvalSplit::Test => {
                    index.subset(&make_splits_with(&index, cfg.eval.split, cfg.seed, cfg.eval.grouping)?.test)?
                }
            };
            let metrics = evaluate(&model, subset.records())?;
            let report = Report {
                metrics: metrics.clone(),
                history: Vec::new(),
                records: subset.records().to_vec(),
                config_hash: cfg.hash(),
                seed: cfg.seed,
            };
            emit_report(&report, &report_dir(cfg))?;
            log.emit("evaluate", json!({ "checkpoint": checkpoint, "metrics": metrics }));
        }
        Command::Crossval { data, checkpoint, .. } => {
            let index = load_index(&data.data, cfg, log)?;
            let source = source_from(checkpoint.as_deref(), &cfg.encoder);
            let result = cross_validate(
                &index,
                cfg.eval.folds,
                &source,
                &cfg.finetune,
                cfg.augment.crop_len,
                cfg.seed,
                &mut |f, m| println!("{}", json!({ "event": "fold", "fold": f, "overall_acc": m.overall_acc })),
            )?;
            let dir = report_dir(cfg);
            for (f, m) in result.folds.iter().enumerate() {
                let report = Report {
                    metrics: m.clone(),
                    history: Vec::new(),
                    records: index.records().to_vec(),
                    config_hash: cfg.hash(),
                    seed: cfg.seed,
                };
                emit_report(&report, &dir.join(format!("fold_{f}")))?;
            }
            let p = dir.join("crossval.json");
            let mut text = serde_json::to_string_pretty(&result).expect("serializes");
            text.push('\n');
            fs::write(&p, text).at(&p)?;
            eprintln!("accuracy {}", result.summary);
            log.emit(
                "crossval",
                json!({ "mean_acc": result.mean_acc, "std_acc": result.std_acc, "summary": result.summary }),
            );
        }
        Command::Report { data, checkpoint, .. } => {
            let index = load_index(&data.data, cfg, log)?;
            let dir = report_dir(cfg);
            match checkpoint {
                Some(ck) => {
                    let model = ClassifierModel::load(ck)?;
                    let metrics = evaluate(&model, index.records())?;
                    let report = Report {
                        metrics,
                        history: Vec::new(),
                        records: index.records().to_vec(),
                        config_hash: cfg.hash(),
                        seed: cfg.seed,
                    };
                    emit_report(&report, &dir)?;
                }
                None => {
                    fs::create_dir_all(&dir).at(&dir)?;
                    let p = dir.join(HISTOGRAM_FILE);
                    fs::write(&p, score_histogram_csv(index.records())).at(&p)?;
                }
            }
            log.emit("report", json!({ "dir": dir, "records": index.len() }));
        }
    }
    Ok(())
}
