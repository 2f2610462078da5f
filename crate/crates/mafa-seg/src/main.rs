//! Batch entry points: dataset synthesis, training, evaluation, the rotation
//! audit, the ablation grid and the gradient-check suite.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 on a runtime error.

use clap::{Args, Parser, Subcommand};
use mafa_seg::config::ExperimentConfig;
use mafa_seg::data::{self, SynthConfig};
use mafa_seg::model::Model;
use mafa_seg::report::{self, Predictor};
use mafa_seg::{gradcheck, train};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mafa-seg", version, about = "Multi-angle feature aggregation for binary segmentation", disable_help_subcommand = true)]
struct Cli {
    /// Worker thread count. Accepted for interface compatibility; the
    /// current implementation is single-threaded and ignores values > 1.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file (key=value lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> mafa_seg::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic capsule dataset as PNG images and masks.
    Synth {
        /// Number of scenes.
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Narrow the brightness gap between instrument and background.
        #[arg(long)]
        low_contrast: bool,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoints, the loss log and the resolved
    /// configuration.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory (images/ and masks/, optionally per subset).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint: per-image metrics CSV, JSON summary and
    /// optional overlays.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Model checkpoint written by `train`.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write prediction/contour overlay PNGs.
        #[arg(long)]
        overlays: bool,
        /// Average predictions over this many test-time rotations.
        #[arg(long, default_value_t = 1)]
        ensemble: usize,
    },
    /// Per-angle IOU audit of a checkpoint over rotated copies of each image.
    Audit {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain the standard variant grid and tabulate validation metrics.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Training dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Validation dataset directory.
        #[arg(long)]
        val_data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run only the named comma-separated variants.
        #[arg(long)]
        only: Option<String>,
    },
    /// Check analytic gradients against central differences; prints one
    /// `op,max_rel_err,pass` line per operation plus the end-to-end check.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of seeds; the worst error per operation is reported.
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
}

fn run(cli: Cli) -> mafa_seg::Result<bool> {
    match cli.command {
        Command::Synth {
            count,
            size,
            seed,
            low_contrast,
            out,
        } => {
            let samples = data::generate_synthetic(&SynthConfig {
                count,
                size,
                seed,
                low_contrast,
                ..Default::default()
            });
            data::save_dataset(&out, &samples)?;
            println!("wrote {} samples to {}", samples.len(), out.display());
        }
        Command::Train { config, data, out } => {
            let cfg = config.resolve()?;
            let samples = data::load_dataset(&data)?;
            let result = train::train(&cfg, &samples, Some(&out))?;
            for e in &result.history {
                println!(
                    "epoch {:>3}  l_s {:.6}  l_c {:.6}  lr {}",
                    e.epoch, e.mean_l_s, e.mean_l_c, e.lr
                );
            }
            println!("model checkpoint: {}", out.join("model.ckpt").display());
        }
        Command::Eval {
            config,
            data,
            ckpt,
            out,
            overlays,
            ensemble,
        } => {
            let cfg = config.resolve()?;
            let samples = data::load_dataset(&data)?;
            let (mut model, _) = Model::load(cfg.model.clone(), &ckpt)?;
            std::fs::create_dir_all(&out)?;
            cfg.write_resolved(&out)?;
            let predictor = match ensemble {
                0 | 1 => Predictor::Single,
                n => Predictor::Ensemble(n),
            };
            let (_, summary) =
                report::evaluate(&mut model, &samples, predictor, Some(&out), overlays)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Audit {
            config,
            data,
            ckpt,
            out,
        } => {
            let cfg = config.resolve()?;
            let samples = data::load_dataset(&data)?;
            let (mut model, _) = Model::load(cfg.model.clone(), &ckpt)?;
            std::fs::create_dir_all(&out)?;
            cfg.write_resolved(&out)?;
            let rep = report::audit(&mut model, &samples, Some(&out))?;
            println!(
                "mean RM_IOU {:.4}  mean RSD_IOU {:.4} over {} images",
                rep.mean_rm_iou,
                rep.mean_rsd_iou,
                rep.rows.len()
            );
        }
        Command::Ablate {
            config,
            data,
            val_data,
            out,
            only,
        } => {
            let cfg = config.resolve()?;
            let train_samples = data::load_dataset(&data)?;
            let val_samples = data::load_dataset(&val_data)?;
            let mut variants = report::standard_variants(&cfg);
            if let Some(names) = only {
                let keep: Vec<&str> = names.split(',').map(str::trim).collect();
                variants.retain(|v| keep.contains(&v.name.as_str()));
                if variants.is_empty() {
                    return Err(mafa_seg::Error::InvalidArgument(format!(
                        "--only matched no variants: {names}"
                    )));
                }
            }
            std::fs::create_dir_all(&out)?;
            cfg.write_resolved(&out)?;
            let rows = report::run_ablation(&variants, &train_samples, &val_samples, Some(&out))?;
            print!("{}", report::ablation_table(&rows));
        }
        Command::Gradcheck { seed, seeds } => {
            let results = gradcheck::run_all(seed, seeds);
            let mut ok = true;
            for r in &results {
                println!("{}", r.line());
                ok &= r.pass;
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors by default; remap to 1 so that 2 is
    // reserved for runtime failures.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
