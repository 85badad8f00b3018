//! Command-line front end for the whole-slide MIL pipeline.
//!
//! Stages run in order: `synth` (optional, generates a desk-scale
//! dataset), `tile`, `bags`, `train`, `eval`, `report`. Each stage
//! verifies the config hash embedded by its predecessor. On failure the
//! process exits nonzero with a single machine-parseable line on stderr:
//! `error[<class>]: <message>`.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use slidemil::config::RunConfig;
use slidemil::synth::{self, SynthOptions};
use slidemil::{pipeline, Error};

#[derive(Parser)]
#[command(name = "slidemil", version, about = "Whole-slide attention-MIL pipeline")]
struct Cli {
    /// TOML run configuration; command-line flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic witness-task dataset (slides, masks,
    /// clinical CSV) under --out.
    Synth {
        /// Number of patients (one slide each).
        #[arg(long, default_value_t = 50)]
        patients: usize,
        /// Cell/tile side length; slides are 4x4 cells.
        #[arg(long)]
        tile_size: Option<usize>,
    },
    /// Tile slides into entropy-filtered patches and write the manifest.
    Tile,
    /// Split patients into cohorts and assemble the bag manifest.
    Bags,
    /// Train the attention-MIL model; writes checkpoint and log.
    Train,
    /// Evaluate a checkpoint: metrics CSV and ROC point files.
    Eval {
        /// Checkpoint path (default: <out>/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Combine metrics CSVs into a Markdown comparison table.
    Report {
        /// Output Markdown file.
        #[arg(long, default_value = "report.md")]
        out_file: PathBuf,
        /// Metrics CSV files from `eval` runs.
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> slidemil::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.out = out.clone();
    }
    Ok(cfg)
}

fn ensure_out_dir(cfg: &RunConfig) -> slidemil::Result<()> {
    std::fs::create_dir_all(&cfg.paths.out).map_err(|e| Error::io(&cfg.paths.out, e))
}

fn run(cli: Cli) -> slidemil::Result<()> {
    match &cli.command {
        Command::Synth {
            patients,
            tile_size,
        } => {
            let cfg = load_config(&cli)?;
            let out_dir = cli.out.clone().unwrap_or_else(|| cfg.paths.out.clone());
            let opts = SynthOptions {
                n_patients: *patients,
                seed: cfg.seed,
                tile_size: tile_size.unwrap_or(cfg.tiling.tile_size),
            };
            let summary = synth::generate(&out_dir, &opts)?;
            println!(
                "synth: {} patients -> {} (slides, masks, clinical.csv)",
                patients,
                out_dir.display()
            );
            let positives = summary
                .labels
                .values()
                .filter(|l| l.binary_class() == 1)
                .count();
            println!("synth: {positives} node-positive patients");
        }
        Command::Tile => {
            let cfg = load_config(&cli)?;
            ensure_out_dir(&cfg)?;
            let report = pipeline::run_tile(&cfg)?;
            println!(
                "tile: {} slides, {} patches ({} kept) -> {}",
                report.slides,
                report.patches_total,
                report.patches_kept,
                report.manifest.display()
            );
        }
        Command::Bags => {
            let cfg = load_config(&cli)?;
            ensure_out_dir(&cfg)?;
            let report = pipeline::run_bags(&cfg)?;
            for warning in &report.warnings {
                eprintln!("warning: {warning}");
            }
            println!("bags: {} bags -> {}", report.n_bags, report.manifest.display());
        }
        Command::Train => {
            let cfg = load_config(&cli)?;
            ensure_out_dir(&cfg)?;
            let report = pipeline::run_train(&cfg)?;
            match (report.best_epoch, report.best_val_auroc) {
                (Some(e), Some(a)) => {
                    println!("train: {} epochs, best val AUROC {a:.4} at epoch {e}", report.epochs)
                }
                _ => println!("train: {} epochs (validation AUROC undefined)", report.epochs),
            }
            println!("train: checkpoint -> {}", report.checkpoint.display());
            println!("train: log -> {}", report.log.display());
        }
        Command::Eval { checkpoint } => {
            let cfg = load_config(&cli)?;
            ensure_out_dir(&cfg)?;
            let ckpt = checkpoint
                .clone()
                .unwrap_or_else(|| pipeline::checkpoint_path(&cfg));
            let report = pipeline::run_eval(&cfg, &ckpt)?;
            for (cohort, auroc) in &report.cohort_auroc {
                match auroc {
                    Some(a) => println!("eval: {} slide-level AUROC {a:.4}", cohort.as_str()),
                    None => println!("eval: {} slide-level AUROC undefined", cohort.as_str()),
                }
            }
            println!("eval: metrics -> {}", report.metrics_file.display());
        }
        Command::Report { out_file, metrics } => {
            let table = pipeline::run_report(metrics, out_file)?;
            print!("{table}");
            println!("report -> {}", out_file.display());
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error[{}]: {e}", e.class());
        std::process::exit(1);
    }
}
