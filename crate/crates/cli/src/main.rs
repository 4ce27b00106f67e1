use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use egcnn::data::{generate_phantoms, write_dataset, Modality, Split};
use egcnn::gradcheck::run_gradchecks;
use egcnn::train::{evaluate, predict, run_ablation, train, AblationConfig, TrainConfig, TrainOptions};

#[derive(Parser)]
#[command(name = "egcnn", version, about = "Edge-gated volumetric segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantom volumes and a manifest with an 80/20 split.
    Gen {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        extent: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "mri-like")]
        modality: Modality,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train the backbone alone.
        #[arg(long)]
        no_edge_stream: bool,
        /// Continue from a checkpoint, appending to the metrics file in OUT.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed epochs.
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on one split of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        /// Append the result to this metrics file.
        #[arg(long)]
        metrics_out: Option<PathBuf>,
        /// Fail when the mean foreground Dice is below this value.
        #[arg(long)]
        min_dice: Option<f64>,
    },
    /// Segment one EGV1 volume.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// One of tensor-core, nn-blocks, edge-ops, losses.
        #[arg(long)]
        module: Option<String>,
    },
    /// Paired with/without edge-stream runs over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Allowed shortfall of the edge-stream mean Dice.
        #[arg(long, default_value_t = 0.01)]
        margin: f64,
        /// Required edge-head Dice.
        #[arg(long, default_value_t = 0.60)]
        min_edge_dice: f64,
        #[arg(long)]
        quiet: bool,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen {
            count,
            extent,
            classes,
            seed,
            modality,
            train_fraction,
            out,
        } => {
            let records = generate_phantoms(count, extent, classes, modality, seed)?;
            let manifest = write_dataset(&records, &out, train_fraction, seed)?;
            println!(
                "wrote {} volumes and {}",
                manifest.entries.len(),
                out.join("manifest.toml").display()
            );
            Ok(true)
        }
        Command::Train {
            config,
            out,
            no_edge_stream,
            resume,
            stop_after,
            quiet,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            if no_edge_stream {
                cfg.model.edge_stream = false;
            }
            let opts = TrainOptions {
                resume,
                stop_after,
                progress: !quiet,
            };
            let start = Instant::now();
            let summary = train(&cfg, &out, &opts)?;
            if let Some(m) = &summary.train_metrics {
                println!("{}", serde_json::to_string(m)?);
            }
            if let Some(m) = &summary.val_metrics {
                println!("{}", serde_json::to_string(m)?);
            }
            eprintln!(
                "{} epochs in {:.1}s; checkpoint {}",
                summary.epochs_completed,
                start.elapsed().as_secs_f64(),
                summary.final_checkpoint.display()
            );
            Ok(true)
        }
        Command::Eval {
            checkpoint,
            manifest,
            split,
            metrics_out,
            min_dice,
        } => {
            let record = evaluate(&checkpoint, &manifest, split, metrics_out.as_deref())?;
            println!("{}", serde_json::to_string(&record)?);
            Ok(min_dice.is_none_or(|m| record.dice.mean_foreground >= m))
        }
        Command::Predict { checkpoint, input, out } => {
            let files = predict(&checkpoint, &input, &out)?;
            println!("{}", files.labels.display());
            if let Some(e) = &files.edges {
                println!("{}", e.display());
            }
            for r in &files.renders {
                println!("{}", r.display());
            }
            Ok(true)
        }
        Command::Gradcheck { module } => {
            let start = Instant::now();
            let checks = run_gradchecks(module.as_deref())?;
            let mut ok = true;
            for c in &checks {
                ok &= c.passed();
                println!(
                    "{} {:<12} {:<26} rel {:.3e} (tol {:.0e}, {} probes)",
                    if c.passed() { "PASS" } else { "FAIL" },
                    c.module,
                    c.name,
                    c.rel_error,
                    c.tolerance,
                    c.probes
                );
            }
            println!("{} checks in {:.2}s", checks.len(), start.elapsed().as_secs_f64());
            Ok(ok)
        }
        Command::Ablate {
            config,
            out,
            margin,
            min_edge_dice,
            quiet,
        } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let cfg: AblationConfig = toml::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
            let report = run_ablation(&cfg, &out, !quiet)?;
            fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
            let edge = report.edge_head_dice.mean;
            println!(
                "with edge stream {:.4} ± {:.4}, without {:.4} ± {:.4}, edge head {:.4} ± {:.4}",
                report.with_edge_dice.mean,
                report.with_edge_dice.std,
                report.without_edge_dice.mean,
                report.without_edge_dice.std,
                edge,
                report.edge_head_dice.std
            );
            Ok(report.non_inferior(margin) && edge >= min_edge_dice)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
