//! Command-line driver: synthetic data generation, training, evaluation,
//! ablation/sweep grids, and run reports.
//!
//! Failures print a machine-readable `{"category": ..., "message": ...}`
//! line on stderr and exit nonzero with a category-specific code.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fsaug::config::RunConfig;
use fsaug::datastore::{generate_synthetic, write_dataset, Split, SyntheticSpec};
use fsaug::harness::{self, ShotAug, ShotAugTechnique};
use fsaug::learner::ModelParams;
use fsaug::rng::RngStream;
use fsaug::{Error, Result};

#[derive(Parser)]
#[command(name = "fsaug", version, about = "Episodic few-shot training with mode-aware augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic few-shot dataset directory.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        train_classes: usize,
        #[arg(long)]
        val_classes: usize,
        #[arg(long)]
        test_classes: usize,
        #[arg(long)]
        per_class: usize,
        #[arg(long)]
        channels: usize,
        /// Square image side in pixels.
        #[arg(long)]
        size: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Train from a run config; optionally resume an interrupted run dir.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on val or test episodes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: String,
        #[arg(long)]
        way: usize,
        #[arg(long)]
        shot: usize,
        #[arg(long)]
        query: usize,
        #[arg(long)]
        episodes: usize,
        /// Append transformed support copies before the head solve.
        #[arg(long)]
        shot_aug: Option<String>,
        /// Copies per support image for --shot-aug.
        #[arg(long, default_value_t = 1)]
        copies: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Train/evaluate one model per (mode, technique) grid cell.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
    },
    /// Train/evaluate one model per (pool, m) grid cell.
    SweepMaxup {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
    },
    /// Regenerate curves.csv and summary.json for a finished run.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth {
            out,
            train_classes,
            val_classes,
            test_classes,
            per_class,
            channels,
            size,
            seed,
        } => {
            let spec = SyntheticSpec {
                train_classes,
                val_classes,
                test_classes,
                images_per_class: per_class,
                channels,
                height: size,
                width: size,
                seed,
            };
            let dataset = generate_synthetic(&spec)?;
            write_dataset(&dataset, &out)?;
            println!(
                "{}",
                serde_json::json!({
                    "out": out,
                    "classes": dataset.classes.len(),
                    "geometry": dataset.geometry,
                })
            );
            Ok(())
        }
        Command::Train { config, resume } => {
            let summary = match resume {
                Some(dir) => fsaug::metamaxup::resume_training(&dir)?,
                None => {
                    let config = RunConfig::load(&config)?;
                    fsaug::metamaxup::run_training(&config)?
                }
            };
            println!(
                "{}",
                serde_json::json!({
                    "run_dir": summary.run_dir,
                    "final_epoch": summary.final_epoch,
                    "init_fingerprint": summary.init_fingerprint,
                })
            );
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            way,
            shot,
            query,
            episodes,
            shot_aug,
            copies,
            seed,
        } => {
            let ckpt = fsaug::checkpoint::load_checkpoint(&checkpoint)?;
            let mut dataset = fsaug::datastore::load_dataset(&data)?;
            // Normalization statistics travel with the checkpoint.
            dataset.stats = ckpt.header.stats.clone();
            let (params, _opt): (ModelParams<f32>, _) = ckpt.restore()?;
            let split: Split = split.parse()?;
            let cfg = fsaug::episodic::TaskConfig {
                way,
                shot,
                query,
                split,
                forbid_shared_base: false,
            };
            let shot_aug = shot_aug
                .map(|s| -> Result<ShotAug> {
                    let technique: ShotAugTechnique = s.parse()?;
                    Ok(ShotAug { technique, copies })
                })
                .transpose()?;
            let stream = RngStream::root(seed).child("eval", split_tag(split));
            let report = harness::evaluate(
                &params,
                &dataset,
                &cfg,
                ckpt.header.head,
                episodes,
                shot_aug,
                &stream,
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Ablate { config, grid } => {
            let config = RunConfig::load(&config)?;
            let grid = harness::AblateGrid::load(&grid)?;
            let result = harness::ablate_modes(&config, &grid)?;
            println!(
                "{}",
                serde_json::json!({"csv": result.csv_path, "rows": result.rows.len()})
            );
            Ok(())
        }
        Command::SweepMaxup { config, grid } => {
            let config = RunConfig::load(&config)?;
            let grid = harness::SweepGrid::load(&grid)?;
            let result = harness::sweep_maxup(&config, &grid)?;
            println!(
                "{}",
                serde_json::json!({"csv": result.csv_path, "rows": result.rows.len()})
            );
            Ok(())
        }
        Command::Report { run } => {
            let summary = harness::emit_curves(&run)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(())
        }
    }
}

fn split_tag(split: Split) -> u64 {
    match split {
        Split::Train => 2,
        Split::Val => 0,
        Split::Test => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            report_error(&err);
            ExitCode::from(err.exit_code().clamp(1, 255) as u8)
        }
    }
}

fn report_error(err: &Error) {
    eprintln!(
        "{}",
        serde_json::json!({
            "category": err.category(),
            "message": err.to_string(),
        })
    );
}
