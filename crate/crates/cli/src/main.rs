//! `ildiff` — alpha channels for animated sticker clips.
//!
//! Subcommands cover the whole pipeline: `synth` builds a synthetic dataset
//! with exact ground-truth mattes, `stats` summarizes a manifest,
//! `pretrain`/`distill`/`finetune` run the three training stages, `infer`
//! predicts alpha clips, `eval` scores predictions, and `ablate` sweeps the
//! temporal depth.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 validation error,
//! 3 non-convergence, 4 missing dependency.

use clap::{Args, Parser, Subcommand};
use ildiff_core::checkpoint::load_checkpoint;
use ildiff_core::dataset::{load_clip, load_manifest, manifest_stats, resolve_frames_dir, save_clip};
use ildiff_core::error::{Error, Result};
use ildiff_core::stages::{
    ablate_depth, check_model_compat, evaluate_dirs, infer, stage_distill, stage_finetune,
    stage_pretrain, InferOptions,
};
use ildiff_core::synth::generate_dataset;
use ildiff_core::RunConfig;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ildiff", version, about = "Transparent alpha channels for animated sticker clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand that reads a run config.
#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the adapter's temporal depth.
    #[arg(long)]
    temporal_depth: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut config = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(depth) = self.temporal_depth {
            config.model.adapter.temporal_depth = depth;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sticker dataset with exact ground-truth alpha.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's clip count.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Print manifest statistics (sample count, caption length, frame
    /// count, trigger-word frequencies).
    Stats {
        #[command(flatten)]
        config: ConfigArgs,
        /// Manifest path; defaults to the config's training manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// How many top trigger words to list.
        #[arg(long, default_value_t = 15)]
        top: usize,
    },
    /// Train the VAE and the noise predictor, then freeze them.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Override the checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distill the frozen teacher into the lightweight student encoder.
    Distill {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune the transparency pathway and the layout adapter.
    Finetune {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict alpha clips for an input clip or a whole manifest.
    Infer {
        #[command(flatten)]
        config: ConfigArgs,
        /// One clip directory containing frame_%04d.png files.
        #[arg(long, conflicts_with = "manifest")]
        input: Option<PathBuf>,
        /// Manifest of clips to process (writes out/{id}/frame_%04d.png).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to load; defaults to the config's finetune checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Push the adjusted latent through reverse diffusion before
        /// decoding.
        #[arg(long)]
        with_sampling: bool,
        /// Zero the layout-adapter guidance.
        #[arg(long)]
        no_guidance: bool,
    },
    /// Score predicted alpha clips against ground truth.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Root of predicted clips (pred/{id}/frame_%04d.png).
        #[arg(long)]
        pred: PathBuf,
        /// Root of the ground-truth dataset.
        #[arg(long)]
        gt: PathBuf,
        /// Manifest path; defaults to gt/manifest.json.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Also write per-clip rows as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Sweep the temporal depth: re-finetune and evaluate per depth.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated depths.
        #[arg(long, default_value = "0,3,5,8")]
        depths: String,
        /// Write the table as JSON here (defaults to
        /// checkpoint_dir/ablation.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out, count } => {
            let cfg = config.load()?;
            let count = count.unwrap_or(cfg.synth.count);
            let manifest = generate_dataset(count, &cfg.synth.template, cfg.seed, &out)?;
            println!("wrote {count} clips; manifest at {}", manifest.display());
            Ok(())
        }
        Command::Stats {
            config,
            manifest,
            top,
        } => {
            let cfg = config.load()?;
            let path = manifest.unwrap_or(cfg.data.train_manifest);
            let records = load_manifest(&path)?;
            let stats = manifest_stats(&records)?;
            println!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize"));
            println!("top {top} trigger words:");
            for (word, count) in stats.top_trigger_words(top) {
                println!("{count:>8}  {word}");
            }
            Ok(())
        }
        Command::Pretrain { config, out } => {
            let mut cfg = config.load()?;
            if let Some(dir) = out {
                cfg.checkpoint_dir = dir;
            }
            let path = stage_pretrain(&cfg)?;
            println!("pretrain checkpoint: {}", path.display());
            Ok(())
        }
        Command::Distill { config, out } => {
            let mut cfg = config.load()?;
            if let Some(dir) = out {
                cfg.checkpoint_dir = dir;
            }
            let path = stage_distill(&cfg)?;
            println!("distill checkpoint: {}", path.display());
            Ok(())
        }
        Command::Finetune { config, out } => {
            let mut cfg = config.load()?;
            if let Some(dir) = out {
                cfg.checkpoint_dir = dir;
            }
            let path = stage_finetune(&cfg)?;
            println!("finetune checkpoint: {}", path.display());
            Ok(())
        }
        Command::Infer {
            config,
            input,
            manifest,
            out,
            checkpoint,
            with_sampling,
            no_guidance,
        } => {
            let mut cfg = config.load()?;
            let ckpt_path = checkpoint.unwrap_or_else(|| cfg.checkpoint_path("finetune"));
            if !ckpt_path.is_file() {
                return Err(Error::Dependency(format!(
                    "missing finetune checkpoint at {}",
                    ckpt_path.display()
                )));
            }
            let (params, meta) = load_checkpoint(&ckpt_path)?;
            check_model_compat(&meta, &cfg.model)?;
            // The temporal depth is part of the trained adapter.
            cfg.model.adapter.temporal_depth = meta.model.adapter.temporal_depth;
            let options = InferOptions {
                with_sampling,
                guidance: !no_guidance,
                sample_seed: cfg.seed,
            };
            match (input, manifest) {
                (Some(clip_dir), None) => {
                    let rgb = load_clip(&clip_dir)?;
                    let alpha = infer(&rgb, &params, &cfg, &options)?;
                    save_clip(&alpha, &out)?;
                    println!("wrote alpha clip to {}", out.display());
                }
                (None, Some(manifest_path)) => {
                    let records = load_manifest(&manifest_path)?;
                    for record in &records {
                        let rgb = load_clip(resolve_frames_dir(&manifest_path, record))?;
                        let alpha = infer(&rgb, &params, &cfg, &options)?;
                        save_clip(&alpha, out.join(&record.id))?;
                    }
                    println!("wrote {} alpha clips under {}", records.len(), out.display());
                }
                _ => {
                    return Err(Error::Parameter(
                        "infer needs exactly one of --input or --manifest".into(),
                    ))
                }
            }
            Ok(())
        }
        Command::Eval {
            config,
            pred,
            gt,
            manifest,
            csv,
        } => {
            let _ = config.load()?;
            let manifest_path = manifest.unwrap_or_else(|| gt.join("manifest.json"));
            let (rows, summary) = evaluate_dirs(&pred, &gt, &manifest_path)?;
            for row in &rows {
                println!("{}", serde_json::to_string(row).expect("row serialize"));
            }
            println!(
                "{}",
                serde_json::to_string(&serde_json::json!({ "aggregate": summary }))
                    .expect("summary serialize")
            );
            if let Some(csv_path) = csv {
                write_csv(&csv_path, &rows)?;
            }
            if !summary.skipped.is_empty() {
                return Err(Error::Validation(format!(
                    "missing prediction clips for: {}",
                    summary.skipped.join(", ")
                )));
            }
            Ok(())
        }
        Command::Ablate {
            config,
            depths,
            out,
        } => {
            let cfg = config.load()?;
            let depths = parse_depths(&depths)?;
            let rows = ablate_depth(&cfg, &depths)?;
            println!("{:>6} {:>10} {:>8} {:>10} {:>12}", "depth", "psnr", "ssim", "flicker", "hole_residue");
            for row in &rows {
                println!(
                    "{:>6} {:>10.3} {:>8.4} {:>10.5} {:>12.5}",
                    row.depth,
                    row.psnr_mean,
                    row.ssim_mean,
                    row.flicker_mean.unwrap_or(f64::NAN),
                    row.hole_residue_mean.unwrap_or(f64::NAN),
                );
            }
            let report_path = out.unwrap_or_else(|| cfg.checkpoint_dir.join("ablation.json"));
            if let Some(parent) = report_path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            let json = serde_json::to_string_pretty(&rows).expect("rows serialize");
            std::fs::write(&report_path, json).map_err(|e| Error::io(&report_path, e))?;
            println!("report written to {}", report_path.display());
            Ok(())
        }
    }
}

fn parse_depths(text: &str) -> Result<Vec<usize>> {
    let depths: std::result::Result<Vec<usize>, _> =
        text.split(',').map(|s| s.trim().parse::<usize>()).collect();
    let depths = depths.map_err(|_| Error::Parameter(format!("bad depth list: {text}")))?;
    if depths.is_empty() {
        return Err(Error::Parameter("depth list is empty".into()));
    }
    Ok(depths)
}

fn write_csv(path: &Path, rows: &[ildiff_core::stages::EvalRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = String::from("id,psnr_mean,ssim_mean,flicker,hole_residue\n");
    for row in rows {
        let flicker = row
            .report
            .flicker
            .map_or(String::new(), |v| format!("{v}"));
        let hole = row
            .report
            .hole_residue
            .map_or(String::new(), |v| format!("{v}"));
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            row.id, row.report.psnr_mean, row.report.ssim_mean, flicker, hole
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
