use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{load_triplet, DatasetManifest, Triplet};
use crate::error::{Error, Result};
use crate::hash::mix64;
use crate::losses::{total_loss_tensor, LossBreakdown};
use crate::metrics::psnr;
use crate::restorer::{make_mask, stack_masks};
use crate::text_align::TextEmbedding;

use super::checkpoint::{save_checkpoint, CheckpointMeta};
use super::config::TrainConfig;
use super::model::{loss_backends, PsgNet, INFERENCE_MASK_SEED};

pub const LOG_HEADER: &str = "step,total,mse,ssim,perceptual,itss";
pub const LOG_FILE: &str = "train_log.csv";
pub const BEST_CHECKPOINT: &str = "best.psgc";
pub const LAST_CHECKPOINT: &str = "last.psgc";

const ORDER_SALT: u64 = 0x6f72_6465_7273_6565;
const MASK_SALT: u64 = 0x6d61_736b_7365_6564;

/// Mask seed for sample `slot` of optimizer step `step`; distinct per sample and step.
pub fn training_mask_seed(seed: u64, step: usize, slot: usize) -> u64 {
    mix64(mix64(seed ^ MASK_SALT) ^ ((step as u64) << 20 | slot as u64))
}

/// Where a finished run left its artifacts.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps: usize,
    pub best_val_psnr_db: Option<f64>,
    pub history: Vec<LossBreakdown>,
}

fn load_all(manifest: &DatasetManifest, size: usize) -> Result<Vec<Triplet>> {
    manifest
        .ids()
        .iter()
        .map(|id| load_triplet(manifest, id, size).map_err(|e| Error::DataError(format!("{id}: {e}"))))
        .collect()
}

/// Trains on the entries of `train_manifest`, selecting the checkpoint with the
/// best mean PSNR on `val_manifest`.
pub fn train(
    config: &TrainConfig,
    train_manifest: &DatasetManifest,
    val_manifest: &DatasetManifest,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    config.validate()?;
    let train_set = load_all(train_manifest, config.image_size)?;
    let val_set = load_all(val_manifest, config.image_size)?;
    train_on(config, &train_set, &val_set, out_dir)
}

/// Mean PSNR of the model's inference output over `set`.
pub fn mean_psnr(model: &PsgNet, set: &[Triplet]) -> Result<f64> {
    let mut sum = 0.0;
    for t in set {
        let out = model.enhance_image(&t.raw, Some(&t.text), INFERENCE_MASK_SEED)?;
        sum += psnr(&out, &t.reference)?;
    }
    Ok(sum / set.len() as f64)
}

/// Training loop over in-memory triplets.
pub fn train_on(config: &TrainConfig, train_set: &[Triplet], val_set: &[Triplet], out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::DataError("training set is empty".into()));
    }
    let size = (config.image_size, config.image_size);
    if let Some(t) = train_set.iter().chain(val_set).find(|t| (t.raw.height(), t.raw.width()) != size) {
        return Err(Error::DataError(format!(
            "{}: {}x{} does not match image_size {}",
            t.id,
            t.raw.height(),
            t.raw.width(),
            config.image_size
        )));
    }
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.toml"), config.to_toml_string()?)?;

    let model = PsgNet::build_variant(config)?;
    let dtype = model.dtype();
    let device = model.store().device().clone();
    let backends = loss_backends(config, dtype, &device)?;
    let embeddings = train_set
        .iter()
        .map(|t| model.encode_text(Some(&t.text)))
        .collect::<Result<Vec<TextEmbedding>>>()?;

    let mut opt = AdamW::new(
        model.store().trainable_vars(),
        ParamsAdamW {
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
        },
    )?;

    let log_path = out_dir.join(LOG_FILE);
    let mut log = BufWriter::new(fs::File::create(&log_path)?);
    writeln!(log, "{LOG_HEADER}")?;

    let best_path = out_dir.join(BEST_CHECKPOINT);
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let mut best: Option<f64> = None;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(config.seed ^ ORDER_SALT ^ epoch as u64));
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let raw = Tensor::cat(&batch.iter().map(|&i| train_set[i].raw.batch(dtype)).collect::<Result<Vec<_>>>()?, 0)?;
            let reference = Tensor::cat(
                &batch.iter().map(|&i| train_set[i].reference.batch(dtype)).collect::<Result<Vec<_>>>()?,
                0,
            )?;
            let text = Tensor::stack(
                &batch.iter().map(|&i| embeddings[i].to_tensor(dtype, &device)).collect::<Result<Vec<_>>>()?,
                0,
            )?;
            let masks = batch
                .iter()
                .enumerate()
                .map(|(slot, _)| make_mask(size.0, size.1, config.mask_ratio, training_mask_seed(config.seed, step, slot)))
                .collect::<Result<Vec<_>>>()?;
            let mask = stack_masks(&masks, dtype, &device)?;

            let fwd = model.forward(&raw, &text, &mask, true)?;
            let terms = total_loss_tensor(&fwd.enhanced, &reference, &text, &config.weights, &backends)?;
            let b = terms.breakdown()?;
            if !b.total.is_finite() {
                log.flush()?;
                return Err(Error::NonFiniteLoss { step });
            }
            opt.backward_step(&terms.total)?;
            writeln!(log, "{step},{},{},{},{},{}", b.total, b.mse, b.ssim, b.perceptual, b.itss)?;
            history.push(b);
            step += 1;
        }
        log::info!(
            "epoch {}/{} step {step} loss {:.6}",
            epoch + 1,
            config.epochs,
            history.last().map_or(f64::NAN, |b| b.total)
        );

        let last_epoch = epoch + 1 == config.epochs;
        if (epoch + 1) % config.eval_every == 0 || last_epoch {
            let val = if val_set.is_empty() {
                None
            } else {
                Some(mean_psnr(&model, val_set)?)
            };
            let meta = CheckpointMeta {
                epoch: epoch + 1,
                step,
                val_psnr_db: val,
            };
            save_checkpoint(&model, meta, &last_path)?;
            let improved = match (val, best) {
                (Some(v), Some(b)) => v > b,
                (Some(_), None) => true,
                (None, _) => last_epoch,
            };
            if improved {
                best = val.or(best);
                save_checkpoint(&model, meta, &best_path)?;
            }
            if let Some(v) = val {
                log::info!("epoch {} validation PSNR {v:.3} dB", epoch + 1);
            }
        }
    }
    log.flush()?;
    Ok(TrainOutcome {
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        log: log_path,
        steps: step,
        best_val_psnr_db: best,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn mask_seeds_are_distinct_per_step_and_slot() {
        let seeds: HashSet<u64> = (0..50)
            .flat_map(|s| (0..4).map(move |k| training_mask_seed(3, s, k)))
            .collect();
        assert_eq!(seeds.len(), 200);
        assert_ne!(training_mask_seed(3, 0, 0), training_mask_seed(4, 0, 0));
    }
}
