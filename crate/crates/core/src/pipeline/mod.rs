//! Training, checkpointing, ablation variants and the end-to-end entry points
//! used by the command-line tool.

mod checkpoint;
mod config;
mod model;
mod train;

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use config::{
    Ablation, AblationFlags, ModelConfig, PerceptualSpec, TextBackendSpec, TrainConfig, SEED_ENV,
};
pub use model::{loss_backends, text_backend, Forward, PsgNet, INFERENCE_MASK_SEED};
pub use train::{
    mean_psnr, train, train_on, training_mask_seed, TrainOutcome, BEST_CHECKPOINT, LAST_CHECKPOINT, LOG_FILE,
    LOG_HEADER,
};

use crate::data::DatasetManifest;
use crate::error::Result;
use crate::hash::fnv1a64;
use crate::image::ImageTensor;
use crate::metrics::{evaluate_with, MetricReport};
use crate::text_align::{encode_text, EmbeddingTable, TextEncoderBackend, DEFAULT_EMBED_DIM};

/// Evaluates `model` on every manifest entry and writes the report into `out_dir`.
pub fn evaluate_model(model: &PsgNet, manifest: &DatasetManifest, out_dir: &Path) -> Result<MetricReport> {
    let backends = loss_backends(model.config(), DType::F64, &Device::Cpu)?;
    evaluate_with(manifest, model.config().image_size, &backends.perceptual, out_dir, |t| {
        model.enhance_image(&t.raw, Some(&t.text), INFERENCE_MASK_SEED)
    })
}

/// Loads a checkpoint and evaluates it.
pub fn evaluate(checkpoint: &Path, manifest: &DatasetManifest, out_dir: &Path) -> Result<MetricReport> {
    let (model, _) = load_checkpoint(checkpoint)?;
    evaluate_model(&model, manifest, out_dir)
}

/// Enhances one image file (resized to the trained size) and writes an 8-bit PNG.
pub fn enhance(checkpoint: &Path, image_path: &Path, text: Option<&str>, out_path: &Path, mask_seed: u64) -> Result<ImageTensor> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let raw = ImageTensor::load_resized(image_path, model.config().image_size)?;
    let out = model.enhance_image(&raw, text, mask_seed)?;
    out.save(out_path)?;
    Ok(out)
}

/// Which encoder produces the exported table.
#[derive(Debug, Clone)]
pub enum ExportBackend {
    /// The deterministic trigram encoder at the given width.
    Toy { dim: usize },
    /// Re-exports entries from an existing table, e.g. one produced offline
    /// from a pretrained text encoder.
    Table(EmbeddingTable),
}

impl ExportBackend {
    pub fn toy() -> Self {
        ExportBackend::Toy { dim: DEFAULT_EMBED_DIM }
    }
}

/// Encodes every non-blank line of `texts_file` and writes an embedding table.
/// Repeated texts are stored once.
pub fn export_embeddings(texts_file: &Path, backend: ExportBackend, out_path: &Path) -> Result<EmbeddingTable> {
    let content = fs::read_to_string(texts_file)?;
    let encoder = match backend {
        ExportBackend::Toy { dim } => TextEncoderBackend::toy(dim),
        ExportBackend::Table(t) => TextEncoderBackend::PretrainedExport(t),
    };
    let mut table = EmbeddingTable::new(encoder.embed_dim());
    let mut seen = HashSet::new();
    for line in content.lines() {
        let text = line.trim_end_matches('\r');
        if text.trim().is_empty() || !seen.insert(fnv1a64(text.as_bytes())) {
            continue;
        }
        let emb = encode_text(text, &encoder)?;
        table.insert(text, emb.as_slice().to_vec())?;
    }
    table.write(out_path)?;
    Ok(table)
}
