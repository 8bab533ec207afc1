//! Dataset records, manifests, reference selection and splitting.

mod manifest;
pub mod synthetic;

pub use manifest::{load_manifest, DatasetManifest, ManifestEntry, Split};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Prompt used whenever a record carries no description.
pub const DEFAULT_PROMPT: &str = "An underwater image";

/// A raw image, its reference enhancement and a scene description.
#[derive(Debug, Clone)]
pub struct Triplet {
    pub id: String,
    pub raw: ImageTensor,
    pub reference: ImageTensor,
    pub text: String,
}

impl Triplet {
    pub fn new(id: impl Into<String>, raw: ImageTensor, reference: ImageTensor, text: &str) -> Result<Self> {
        if raw.dims() != reference.dims() {
            return Err(Error::ShapeMismatch(format!(
                "raw {:?} vs reference {:?}",
                raw.dims(),
                reference.dims()
            )));
        }
        Ok(Self {
            id: id.into(),
            raw,
            reference,
            text: prompt_or_default(Some(text)),
        })
    }
}

pub fn prompt_or_default(text: Option<&str>) -> String {
    match text.map(str::trim) {
        Some(t) if !t.is_empty() => t.to_string(),
        _ => DEFAULT_PROMPT.to_string(),
    }
}

/// Decodes the raw/reference pair of `id` and resizes both to `size × size`.
pub fn load_triplet(manifest: &DatasetManifest, id: &str, size: usize) -> Result<Triplet> {
    if size < 16 {
        return Err(Error::BadShape(format!("triplet size {size} is below 16")));
    }
    let entry = manifest
        .get(id)
        .ok_or_else(|| Error::UnknownId(id.to_string()))?;
    let raw = ImageTensor::load_resized(&entry.raw_path, size)?;
    let reference = ImageTensor::load_resized(&entry.reference_path, size)?;
    Triplet::new(entry.id.clone(), raw, reference, &entry.text)
}

/// Mean subjective scores, one per enhanced candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateScores(Vec<f64>);

impl CandidateScores {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptyScores);
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::DataError("candidate scores must be finite".into()));
        }
        Ok(Self(scores))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Index of the highest-scored candidate; ties go to the lowest index.
pub fn select_reference(scores: &CandidateScores) -> Result<usize> {
    let s = scores.as_slice();
    let mut best = 0;
    for (i, &v) in s.iter().enumerate().skip(1) {
        if v > s[best] {
            best = i;
        }
    }
    s.get(best).map(|_| best).ok_or(Error::EmptyScores)
}

/// Seeded shuffled partition into train/val/test manifests.
pub fn split_dataset(
    manifest: &DatasetManifest,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest, DatasetManifest)> {
    let (rt, rv, rs) = ratios;
    let ok = [rt, rv, rs].iter().all(|r| r.is_finite() && *r >= 0.0)
        && ((rt + rv + rs) - 1.0).abs() <= 1e-9;
    if !ok {
        return Err(Error::BadRatios(ratios));
    }
    let n = manifest.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n_train = ((n as f64) * rt).round() as usize;
    let n_val = (((n as f64) * rv).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);

    let pick = |range: &[usize], split: Split| {
        let entries = range.iter().map(|&i| manifest.entries()[i].clone()).collect();
        DatasetManifest::from_entries(entries, manifest.base_dir().to_path_buf(), split)
    };
    Ok((
        pick(&order[..n_train], Split::Train)?,
        pick(&order[n_train..n_train + n_val], Split::Val)?,
        pick(&order[n_train + n_val..], Split::Test)?,
    ))
}
