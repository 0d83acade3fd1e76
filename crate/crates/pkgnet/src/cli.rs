//! Command-line entry points: one subcommand per pipeline stage, a shared
//! `--config`/`--out`/`--seed` surface, and dot-path overrides so any config
//! field can be set from the command line (`--train.epochs 3`).

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::load_config;
use crate::data::write_synthetic_dataset;
use crate::error::{Error, Result};
use crate::pipeline;

#[derive(Debug, Parser)]
#[command(name = "pkgnet", version, about = "Object-centric video anomaly detection: \
train a predictive student against a frozen teacher, then calibrate, score and evaluate")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset into `data.root`.
    SynthData(StageArgs),
    /// Train the student; writes checkpoints, loss history and a manifest.
    Train(StageArgs),
    /// Compute calibration statistics on the training split.
    Calibrate(StageArgs),
    /// Score the test split into `scores.json`.
    Score(StageArgs),
    /// Rank scores against labels; writes `report.json`.
    Eval(StageArgs),
    /// Render per-video score curves into `curves/`.
    Plot(StageArgs),
}

#[derive(Debug, Args)]
struct StageArgs {
    /// TOML config file; omitted = built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory that owns this run's artifacts.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
    /// Shorthand for `--train.seed N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Dot-path overrides of config fields: `--loss.lambda_e 1.0`,
    /// `--score.aggregate max`, or `train.epochs=3`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

/// Turns trailing tokens into `(path, value)` pairs. Accepts `--a.b v`,
/// `--a.b=v` and bare `a.b=v`.
fn parse_overrides(tokens: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut iter = tokens.iter();
    while let Some(token) = iter.next() {
        let stripped = token.strip_prefix("--").unwrap_or(token);
        if let Some((key, value)) = stripped.split_once('=') {
            out.push((key.to_string(), value.to_string()));
        } else {
            let value = iter.next().ok_or_else(|| {
                Error::Config(vec![format!("override '{stripped}' is missing a value")])
            })?;
            out.push((stripped.to_string(), value.clone()));
        }
    }
    Ok(out)
}

impl StageArgs {
    fn resolve(&self) -> Result<crate::config::RunConfig> {
        let mut overrides = parse_overrides(&self.overrides)?;
        if let Some(seed) = self.seed {
            overrides.push(("train.seed".to_string(), seed.to_string()));
        }
        load_config(self.config.as_deref(), &overrides)
    }
}

/// Runs one subcommand to completion. The binary maps the error to a
/// single-line `error[code]: message` on stderr and a nonzero exit.
pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::SynthData(args) => {
            let config = args.resolve()?;
            write_synthetic_dataset(
                &config.data.root,
                &config.data.synthetic,
                config.data.synthetic_seed,
            )?;
            println!(
                "wrote synthetic dataset ({} train / {} test videos) to {}",
                config.data.synthetic.n_train_videos,
                config.data.synthetic.n_test_videos,
                config.data.root.display()
            );
        }
        Command::Train(args) => {
            let config = args.resolve()?;
            let manifest = pipeline::train(&config, &args.out)?;
            let last = manifest.loss_history.last().expect("at least one epoch ran");
            println!(
                "trained {} epochs (final total loss {:.6}); manifest at {}",
                manifest.loss_history.len(),
                last.total,
                args.out.join(pipeline::MANIFEST_FILE).display()
            );
        }
        Command::Calibrate(args) => {
            let config = args.resolve()?;
            let (stats, warnings) = pipeline::calibrate(&config, &args.out)?;
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "calibrated on the training split (mu_e {:.6}, sigma_e {:.6}); stats at {}",
                stats.mu_e,
                stats.sigma_e,
                args.out.join(pipeline::STATS_FILE).display()
            );
        }
        Command::Score(args) => {
            let config = args.resolve()?;
            let file = pipeline::score(&config, &args.out)?;
            println!(
                "scored {} videos; scores at {}",
                file.videos.len(),
                args.out.join(pipeline::SCORES_FILE).display()
            );
        }
        Command::Eval(args) => {
            let config = args.resolve()?;
            let report = pipeline::evaluate_run(&config, &args.out)?;
            for (video, auroc) in &report.per_video_auroc {
                println!("video {video}: AUROC {auroc:.4}");
            }
            println!(
                "micro AUROC {:.4} over {} frames ({} anomalous); report at {}",
                report.auroc_micro,
                report.n_frames,
                report.n_anomalous,
                args.out.join(pipeline::REPORT_FILE).display()
            );
        }
        Command::Plot(args) => {
            let config = args.resolve()?;
            let paths = pipeline::plot(&config, &args.out)?;
            println!(
                "wrote {} curve artifacts to {}",
                paths.len(),
                args.out.join(pipeline::CURVES_DIR).display()
            );
        }
    }
    Ok(())
}
