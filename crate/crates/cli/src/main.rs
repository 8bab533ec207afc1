//! `psg` — train, evaluate and run the underwater enhancement network.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use psg_core::data::load_manifest;
use psg_core::data::synthetic::write_synthetic_dataset;
use psg_core::image::ImageTensor;
use psg_core::pipeline::{
    self, load_checkpoint, AblationFlags, ExportBackend, TrainConfig, INFERENCE_MASK_SEED, SEED_ENV,
};
use psg_core::text_align::EmbeddingTable;

#[derive(Parser, Debug)]
#[command(name = "psg", version, about = "Physics- and semantics-guided underwater image enhancement")]
#[command(after_help = "Examples:
  psg synth --out data --count 8 --size 64
  psg train --config cfg.toml --train data/manifest.jsonl --val data/manifest.jsonl --out run
  psg eval --checkpoint run/best.psgc --manifest data/manifest.jsonl --out run/eval
  psg enhance --checkpoint run/best.psgc --image raw.png --out enhanced.png")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Print progress information
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints plus a loss log
    Train {
        /// TOML configuration; omitted keys take their defaults, unknown keys are errors
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training manifest (JSON lines)
        #[arg(long)]
        train: PathBuf,
        /// Validation manifest used to select the best checkpoint
        #[arg(long)]
        val: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Seed; overrides PSG_SEED and the config file
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated ablation flags, e.g. no_ie,no_cfm (replaces the config's list)
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Evaluate a checkpoint on a manifest (per-image CSV and aggregate JSON)
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Enhance one image and write an 8-bit PNG
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Scene description; defaults to "An underwater image"
        #[arg(long)]
        text: Option<String>,
        /// Seed of the inference pixel mask
        #[arg(long, default_value_t = INFERENCE_MASK_SEED)]
        mask_seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-scale illumination heatmaps into this directory
        #[arg(long)]
        maps: Option<PathBuf>,
    },
    /// Precompute text embeddings into a table file
    ExportEmbeddings {
        /// One text per line
        #[arg(long)]
        texts: PathBuf,
        #[arg(long, value_enum)]
        backend: Backend,
        /// Existing table to draw vectors from (required for `export`)
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a small synthetic dataset with a manifest
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Backend {
    /// Deterministic trigram-hash encoder
    Toy,
    /// Vectors exported offline from a pretrained encoder
    Export,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();

    match cli.command {
        Command::Train {
            config,
            train,
            val,
            out,
            seed,
            ablation,
        } => {
            let mut cfg = match &config {
                Some(p) => TrainConfig::from_file(p)?,
                None => TrainConfig::default(),
            };
            let env_seed = std::env::var(SEED_ENV).ok();
            cfg.resolve_seed(seed, env_seed.as_deref())?;
            if let Some(list) = ablation {
                cfg.ablation = AblationFlags::parse_list(&list)?;
            }
            cfg.validate()?;
            let train_manifest = load_manifest(&train).with_context(|| format!("loading {}", train.display()))?;
            let val_manifest = load_manifest(&val).with_context(|| format!("loading {}", val.display()))?;
            let outcome = pipeline::train(&cfg, &train_manifest, &val_manifest, &out)?;
            println!("steps: {}", outcome.steps);
            if let Some(p) = outcome.best_val_psnr_db {
                println!("best validation PSNR: {p:.3} dB");
            }
            println!("best checkpoint: {}", outcome.best_checkpoint.display());
            println!("last checkpoint: {}", outcome.last_checkpoint.display());
            println!("loss log: {}", outcome.log.display());
        }
        Command::Eval {
            checkpoint,
            manifest,
            out,
        } => {
            let manifest = load_manifest(&manifest)?;
            let report = pipeline::evaluate(&checkpoint, &manifest, &out)?;
            let a = &report.aggregates;
            println!(
                "images: {}  failures: {}  PSNR: {:.2} dB  SSIM: {:.2}  perceptual: {:.4}",
                a.count, a.failures, a.psnr_db, a.ssim_percent, a.perceptual_dist
            );
        }
        Command::Enhance {
            checkpoint,
            image,
            text,
            mask_seed,
            out,
            maps,
        } => {
            pipeline::enhance(&checkpoint, &image, text.as_deref(), &out, mask_seed)?;
            if let Some(dir) = maps {
                let (model, _) = load_checkpoint(&checkpoint)?;
                let Some(ie) = model.illumination() else {
                    bail!("this model was trained without illumination estimation");
                };
                let raw = ImageTensor::load_resized(&image, model.config().image_size)?;
                let (_, scale_maps) = ie.estimate(&raw)?;
                std::fs::create_dir_all(&dir)?;
                for (scale, map) in ie.config().scales.iter().zip(&scale_maps) {
                    map.save_heatmap(&dir.join(format!("illumination_{scale}.png")))?;
                }
            }
            println!("{}", out.display());
        }
        Command::ExportEmbeddings {
            texts,
            backend,
            source,
            out,
        } => {
            let backend = match (backend, source) {
                (Backend::Toy, _) => ExportBackend::toy(),
                (Backend::Export, Some(src)) => ExportBackend::Table(EmbeddingTable::read(&src)?),
                (Backend::Export, None) => bail!(
                    "the export backend needs --source: an embedding table produced offline from a \
                     pretrained text encoder"
                ),
            };
            let table = pipeline::export_embeddings(&texts, backend, &out)?;
            println!("{} embeddings of dimension {} -> {}", table.len(), table.dim(), out.display());
        }
        Command::Synth { out, count, size, seed } => {
            let manifest = write_synthetic_dataset(&out, count, size, seed)?;
            println!("{} triplets -> {}", manifest.len(), out.join("manifest.jsonl").display());
        }
    }
    Ok(())
}
