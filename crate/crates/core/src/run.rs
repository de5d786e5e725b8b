//! End-to-end runs that write the standard output directory:
//!
//! ```text
//! manifest.json    config snapshot, artifact paths, seed, wall-clock
//! checkpoint.bin   see [`crate::checkpoint`]
//! metrics.jsonl    one EpochMetrics object per line
//! metrics.csv      the same rows as CSV
//! reports.jsonl    verification reports and probe results
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{generate_dataset, AugmentationConfig, Dataset};
use crate::error::{Error, Result};
use crate::eval::{extract_representations, linear_probe};
use crate::model::EncoderPair;
use crate::trainer::{train_with, EpochMetrics, TrainedModel};
use crate::verify::{self, VerificationReport};

pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const METRICS_CSV: &str = "metrics.csv";
pub const REPORTS: &str = "reports.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub checkpoint: String,
    pub metrics_jsonl: String,
    pub metrics_csv: String,
    pub reports: String,
}

impl Default for Artifacts {
    fn default() -> Self {
        Self {
            checkpoint: CHECKPOINT.into(),
            metrics_jsonl: METRICS_JSONL.into(),
            metrics_csv: METRICS_CSV.into(),
            reports: REPORTS.into(),
        }
    }
}

/// Everything needed to reproduce a run. Artifact paths are relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub artifacts: Artifacts,
    pub seed: u64,
    pub wall_clock_secs: f64,
    pub version: String,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path).map_err(Error::file(path))?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Probe outcome, appended to `reports.jsonl` by [`eval_checkpoint`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub check: String,
    pub accuracy: f64,
    pub random_encoder_accuracy: f64,
    pub margin: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub model: TrainedModel,
    pub final_metrics: EpochMetrics,
    pub out_dir: PathBuf,
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// Trains with `cfg` and writes every artifact into `out_dir`.
pub fn train_to_dir(cfg: &RunConfig, out_dir: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(Error::file(out_dir))?;
    let started = Instant::now();
    let dataset = generate_dataset(&cfg.dataset)?;

    let mut jsonl = BufWriter::new(File::create(out_dir.join(METRICS_JSONL))?);
    let mut csv = BufWriter::new(File::create(out_dir.join(METRICS_CSV))?);
    writeln!(csv, "{}", EpochMetrics::CSV_HEADER)?;
    let mut io_err = None;
    let model = train_with(&cfg.train, &cfg.arch, &dataset, |m| {
        let res = serde_json::to_string(m)
            .map_err(Error::from)
            .and_then(|line| Ok(writeln!(jsonl, "{line}")?))
            .and_then(|_| Ok(writeln!(csv, "{}", m.csv_row())?))
            .and_then(|_| Ok(jsonl.flush()?));
        if let (Err(e), None) = (res, &io_err) {
            io_err = Some(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    jsonl.flush()?;
    csv.flush()?;
    File::create(out_dir.join(REPORTS))?;

    Checkpoint {
        pair: model.pair.clone(),
        covariance: model.covariance.clone(),
    }
    .save(&out_dir.join(CHECKPOINT))?;

    RunManifest {
        command: "train".into(),
        config: cfg.clone(),
        artifacts: Artifacts::default(),
        seed: cfg.train.seed,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        version: env!("CARGO_PKG_VERSION").into(),
    }
    .save(&out_dir.join(MANIFEST))?;

    let final_metrics = model
        .metrics
        .last()
        .cloned()
        .ok_or_else(|| Error::Config("training ran zero epochs".into()))?;
    Ok(TrainSummary {
        model,
        final_metrics,
        out_dir: out_dir.to_path_buf(),
    })
}

/// Probe accuracy of `pair`'s online encoder and of a freshly initialized
/// encoder with the same seed.
pub fn probe_pair(cfg: &RunConfig, pair: &EncoderPair, dataset: &Dataset) -> Result<ProbeReport> {
    let (reprs, labels) = extract_representations(&pair.arch, &pair.online, dataset)?;
    let accuracy = linear_probe(&reprs, &labels, &cfg.probe)?;
    let random = EncoderPair::init(&pair.arch, cfg.train.seed)?;
    let (r0, _) = extract_representations(&random.arch, &random.online, dataset)?;
    let random_encoder_accuracy = linear_probe(&r0, &labels, &cfg.probe)?;
    Ok(ProbeReport {
        check: "linear_probe".into(),
        accuracy,
        random_encoder_accuracy,
        margin: accuracy - random_encoder_accuracy,
    })
}

/// Loads a checkpoint, probes it on the dataset described by `cfg`, and
/// appends the result to `reports.jsonl` next to the checkpoint.
pub fn eval_checkpoint(cfg: &RunConfig, checkpoint: &Path) -> Result<ProbeReport> {
    cfg.validate()?;
    let ck = Checkpoint::load(checkpoint)?;
    if ck.pair.arch.input_dim != cfg.dataset.dim {
        return Err(Error::Config(format!(
            "checkpoint expects input_dim {} but dataset.dim is {}",
            ck.pair.arch.input_dim, cfg.dataset.dim
        )));
    }
    let dataset = generate_dataset(&cfg.dataset)?;
    let report = probe_pair(cfg, &ck.pair, &dataset)?;
    if let Some(dir) = checkpoint.parent() {
        append_line(&dir.join(REPORTS), &serde_json::to_string(&report)?)?;
    }
    Ok(report)
}

/// Runs the verification suite, writing reports to `out_dir` when given.
pub fn verify_to_dir(seed: u64, sizes: &[(usize, usize)], out_dir: Option<&Path>) -> Result<Vec<VerificationReport>> {
    let reports = verify::run_suite(seed, sizes)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let body: String = reports.iter().map(|r| r.to_json_line() + "\n").collect();
        fs::write(dir.join(REPORTS), body)?;
    }
    Ok(reports)
}

/// The hyperparameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Rho,
    BatchSize,
    Beta,
    Augmentations,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rho" => Ok(Self::Rho),
            "batch_size" => Ok(Self::BatchSize),
            "beta" => Ok(Self::Beta),
            "augmentations" => Ok(Self::Augmentations),
            other => Err(Error::Config(format!(
                "unknown ablation axis `{other}` (expected rho, batch_size, beta or augmentations)"
            ))),
        }
    }
}

impl AblationAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Rho => "rho",
            Self::BatchSize => "batch_size",
            Self::Beta => "beta",
            Self::Augmentations => "augmentations",
        }
    }

    pub fn default_values(&self) -> Vec<String> {
        let v: &[&str] = match self {
            Self::Rho => &["0", "8"],
            Self::BatchSize => &["8", "32", "128"],
            Self::Beta => &["0", "0.5", "0.9", "0.99"],
            Self::Augmentations => &["baseline", "crop_only", "none"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// `base` with this axis set to `value`.
    pub fn apply(&self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut cfg = base.clone();
        match self {
            Self::Rho => cfg.set("train.rho", value)?,
            Self::BatchSize => cfg.set("train.batch_size", value)?,
            Self::Beta => cfg.set("train.beta", value)?,
            Self::Augmentations => {
                let (a, b) = match value {
                    "baseline" => (base.train.view_a.clone(), base.train.view_b.clone()),
                    "crop_only" => (base.train.view_a.crop_only(), base.train.view_b.crop_only()),
                    "none" => (AugmentationConfig::none(), AugmentationConfig::none()),
                    other => {
                        return Err(Error::Config(format!(
                            "unknown augmentation setting `{other}` (expected baseline, crop_only or none)"
                        )))
                    }
                };
                cfg.train.view_a = a;
                cfg.train.view_b = b;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub final_loss: f64,
    /// Effective rank of the running covariance.
    pub effective_rank: f64,
    /// Effective rank of clean-input embeddings.
    pub embedding_rank: f64,
    pub probe_accuracy: f64,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str = "setting,final_loss,effective_rank,embedding_rank,probe_accuracy";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?}",
            self.setting, self.final_loss, self.effective_rank, self.embedding_rank, self.probe_accuracy
        )
    }
}

/// Trains and probes one configuration per value, one thread each.
pub fn ablate(base: &RunConfig, axis: AblationAxis, values: &[String]) -> Result<Vec<AblationRow>> {
    let configs: Vec<RunConfig> = values.iter().map(|v| axis.apply(base, v)).collect::<Result<_>>()?;
    let dataset = generate_dataset(&base.dataset)?;
    std::thread::scope(|scope| {
        let handles: Vec<_> = configs
            .iter()
            .zip(values)
            .map(|(cfg, value)| {
                let dataset = &dataset;
                scope.spawn(move || -> Result<AblationRow> {
                    let model = crate::trainer::train(&cfg.train, &cfg.arch, dataset)?;
                    let last = model.metrics.last().expect("at least one epoch");
                    let probe = probe_pair(cfg, &model.pair, dataset)?;
                    Ok(AblationRow {
                        setting: format!("{}={value}", axis.as_str()),
                        final_loss: last.loss,
                        effective_rank: last.effective_rank,
                        embedding_rank: last.embedding_rank,
                        probe_accuracy: probe.accuracy,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ablation worker panicked"))
            .collect()
    })
}

/// Runs [`ablate`] and writes `ablation.csv` plus a manifest into `out_dir`.
pub fn ablate_to_dir(base: &RunConfig, axis: AblationAxis, values: &[String], out_dir: &Path) -> Result<Vec<AblationRow>> {
    base.validate()?;
    fs::create_dir_all(out_dir).map_err(Error::file(out_dir))?;
    let started = Instant::now();
    let rows = ablate(base, axis, values)?;
    let mut body = format!("{}\n", AblationRow::CSV_HEADER);
    for r in &rows {
        body.push_str(&r.csv_row());
        body.push('\n');
    }
    fs::write(out_dir.join("ablation.csv"), body)?;
    RunManifest {
        command: format!("ablate {} {}", axis.as_str(), values.join(",")),
        config: base.clone(),
        artifacts: Artifacts::default(),
        seed: base.train.seed,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        version: env!("CARGO_PKG_VERSION").into(),
    }
    .save(&out_dir.join(MANIFEST))?;
    Ok(rows)
}
