//! Procedurally generated underwater-style triplets for smoke tests and demos.
//!
//! References are smooth colour fields; raw images apply a per-channel
//! transmission and veiling light, attenuating red the most.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DatasetManifest, ManifestEntry, Split, Triplet};
use crate::error::Result;
use crate::image::ImageTensor;

const CAPTIONS: [&str; 4] = [
    "A sea turtle swimming above a coral reef",
    "A school of small fish in blue water",
    "A diver exploring a rocky seabed",
    "Green seaweed swaying near the sand",
];

pub fn synthetic_triplet(index: usize, size: usize, seed: u64) -> Result<Triplet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(index as u64));
    let n = size * size;
    let mut reference = vec![0f32; 3 * n];
    for c in 0..3 {
        let base = rng.random_range(0.35..0.65);
        let waves: Vec<(f32, f32, f32, f32)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.5..2.5),
                    rng.random_range(0.5..2.5),
                    rng.random_range(0.0..std::f32::consts::TAU),
                    rng.random_range(0.05..0.12),
                )
            })
            .collect();
        for y in 0..size {
            for x in 0..size {
                let (u, v) = (x as f32 / size as f32, y as f32 / size as f32);
                let mut val = base;
                for &(fx, fy, ph, amp) in &waves {
                    val += amp * (std::f32::consts::TAU * (fx * u + fy * v) + ph).sin();
                }
                reference[c * n + y * size + x] = val.clamp(0.05, 0.95);
            }
        }
    }
    let transmission = [
        rng.random_range(0.30..0.45),
        rng.random_range(0.65..0.80),
        rng.random_range(0.75..0.90),
    ];
    let veil = [0.05f32, rng.random_range(0.25..0.40), rng.random_range(0.35..0.50)];
    let mut raw = vec![0f32; 3 * n];
    for c in 0..3 {
        for y in 0..size {
            // Deeper rows lose more light.
            let depth = 1.0 - 0.25 * y as f32 / size as f32;
            let t = transmission[c] * depth;
            for x in 0..size {
                let i = c * n + y * size + x;
                raw[i] = (reference[i] * t + veil[c] * (1.0 - t)).clamp(0.0, 1.0);
            }
        }
    }
    Triplet::new(
        format!("syn{index:04}"),
        ImageTensor::from_vec(raw, size, size)?,
        ImageTensor::from_vec(reference, size, size)?,
        CAPTIONS[index % CAPTIONS.len()],
    )
}

pub fn synthetic_triplets(count: usize, size: usize, seed: u64) -> Result<Vec<Triplet>> {
    (0..count).map(|i| synthetic_triplet(i, size, seed)).collect()
}

/// Writes `count` triplets as PNGs plus a `manifest.jsonl` under `dir`.
pub fn write_synthetic_dataset(dir: &Path, count: usize, size: usize, seed: u64) -> Result<DatasetManifest> {
    fs::create_dir_all(dir.join("raw"))?;
    fs::create_dir_all(dir.join("ref"))?;
    let mut entries = Vec::with_capacity(count);
    for t in synthetic_triplets(count, size, seed)? {
        let raw_path = dir.join("raw").join(format!("{}.png", t.id));
        let reference_path = dir.join("ref").join(format!("{}.png", t.id));
        t.raw.save(&raw_path)?;
        t.reference.save(&reference_path)?;
        entries.push(ManifestEntry {
            id: t.id,
            raw_path,
            reference_path,
            text: t.text,
        });
    }
    let manifest = DatasetManifest::from_entries(entries, dir.to_path_buf(), Split::Train)?;
    manifest.write(&dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_manifest;

    #[test]
    fn deterministic_and_degraded() {
        let a = synthetic_triplet(1, 16, 9).unwrap();
        let b = synthetic_triplet(1, 16, 9).unwrap();
        assert_eq!(a.raw.to_vec(), b.raw.to_vec());
        let red_raw: f32 = a.raw.to_vec()[..256].iter().sum();
        let red_ref: f32 = a.reference.to_vec()[..256].iter().sum();
        assert!(red_raw < red_ref);
    }

    #[test]
    fn written_dataset_loads() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_dataset(dir.path(), 3, 16, 0).unwrap();
        let m = load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(m.len(), 3);
    }
}
