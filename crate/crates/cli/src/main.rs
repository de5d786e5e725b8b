use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tico::config::RunConfig;
use tico::data::generate_dataset;
use tico::run::{self, AblationAxis, RunManifest};
use tico::Error;

#[derive(Parser)]
#[command(name = "tico", version, about = "Self-supervised training with a covariance-contrast loss")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Flat key = value config file. Defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set train.rho=0. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, fallback: Option<RunConfig>) -> tico::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => fallback.unwrap_or_default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train and write manifest, checkpoint and metric logs to --out.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Linear-probe a checkpoint against a random encoder.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Without --config, the manifest next to the checkpoint is used.
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the algebraic and gradient checks; exit 1 if any fails.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated NxD batch sizes.
        #[arg(long, default_value = "2x2,7x5,16x8,64x16")]
        sizes: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one hyperparameter and write ablation.csv to --out.
    Ablate {
        /// rho, batch_size, beta or augmentations.
        #[arg(long)]
        axis: String,
        /// Comma-separated settings; each axis has defaults.
        #[arg(long)]
        values: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print every config key with its value.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write the synthetic dataset as text.
    Dataset {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_sizes(text: &str) -> tico::Result<Vec<(usize, usize)>> {
    text.split(',')
        .map(|item| {
            let (n, d) = item
                .trim()
                .split_once('x')
                .ok_or_else(|| Error::Config(format!("size `{item}` is not NxD")))?;
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::Config(format!("size `{item}` is not NxD")))
            };
            Ok((parse(n)?, parse(d)?))
        })
        .collect()
}

fn manifest_config(checkpoint: &Path) -> tico::Result<Option<RunConfig>> {
    let path = checkpoint.with_file_name(run::MANIFEST);
    if path.exists() {
        Ok(Some(RunManifest::load(&path)?.config))
    } else {
        Ok(None)
    }
}

fn execute(command: Command) -> tico::Result<bool> {
    match command {
        Command::Train { cfg, out } => {
            let cfg = cfg.resolve(None)?;
            let summary = run::train_to_dir(&cfg, &out)?;
            let m = &summary.final_metrics;
            println!(
                "final loss {:.6}  effective rank {:.3} (embeddings {:.3})  -> {}",
                m.loss,
                m.effective_rank,
                m.embedding_rank,
                out.display()
            );
            Ok(true)
        }
        Command::Eval { checkpoint, cfg } => {
            let cfg = cfg.resolve(manifest_config(&checkpoint)?)?;
            let r = run::eval_checkpoint(&cfg, &checkpoint)?;
            println!(
                "probe accuracy {:.4}  random encoder {:.4}  margin {:+.4}",
                r.accuracy, r.random_encoder_accuracy, r.margin
            );
            Ok(true)
        }
        Command::Verify { seed, sizes, out } => {
            let reports = run::verify_to_dir(seed, &parse_sizes(&sizes)?, out.as_deref())?;
            for r in &reports {
                println!("{}", r.to_json_line());
            }
            let failed = reports.iter().filter(|r| !r.pass).count();
            eprintln!("{} checks, {failed} failed", reports.len());
            Ok(failed == 0)
        }
        Command::Ablate { axis, values, cfg, out } => {
            let axis: AblationAxis = axis.parse()?;
            let cfg = cfg.resolve(None)?;
            let values: Vec<String> = match values {
                Some(v) => v.split(',').map(|s| s.trim().to_string()).collect(),
                None => axis.default_values(),
            };
            let rows = run::ablate_to_dir(&cfg, axis, &values, &out)?;
            println!("{}", run::AblationRow::CSV_HEADER);
            for r in rows {
                println!("{}", r.csv_row());
            }
            Ok(true)
        }
        Command::Config { cfg } => {
            print!("{}", cfg.resolve(None)?.render());
            Ok(true)
        }
        Command::Dataset { cfg, out } => {
            let cfg = cfg.resolve(None)?;
            let ds = generate_dataset(&cfg.dataset)?;
            ds.write(&out)?;
            println!("{} samples, {} classes -> {}", ds.len(), ds.num_classes, out.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parse { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
