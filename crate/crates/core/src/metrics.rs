//! Full-reference quality metrics and the evaluation report.

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::data::{load_triplet, DatasetManifest, Triplet};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::losses::{self, PerceptualBackend};

pub const PSNR_CAP_DB: f64 = 100.0;
const MSE_FLOOR: f64 = 1e-10;

fn check_dims(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio for unit-range images, capped at `cap_db`.
pub fn psnr_capped(a: &ImageTensor, b: &ImageTensor, cap_db: f64) -> Result<f64> {
    check_dims(a, b)?;
    let mse = a
        .to_vec()
        .iter()
        .zip(b.to_vec())
        .map(|(x, y)| (f64::from(*x) - f64::from(y)).powi(2))
        .sum::<f64>()
        / (a.height() * a.width() * ImageTensor::CHANNELS) as f64;
    if mse < MSE_FLOOR {
        return Ok(cap_db);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    psnr_capped(a, b, PSNR_CAP_DB)
}

/// Mean SSIM in `[-1, 1]`; multiply by 100 for reporting.
pub fn ssim_metric(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    losses::ssim_index(a, b)
}

/// Channel-normalized feature distance; zero for identical inputs.
pub fn perceptual_distance(a: &ImageTensor, b: &ImageTensor, backend: &PerceptualBackend) -> Result<f64> {
    check_dims(a, b)?;
    let d = losses::normalized_feature_distance(&a.batch(DType::F64)?, &b.batch(DType::F64)?, backend)?;
    Ok(d.to_scalar::<f64>()?)
}

/// Metrics for one evaluated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub psnr_db: f64,
    pub ssim_percent: f64,
    pub perceptual_dist: f64,
}

impl ImageMetrics {
    pub fn compute(id: &str, output: &ImageTensor, reference: &ImageTensor, backend: &PerceptualBackend) -> Result<Self> {
        Ok(Self {
            id: id.to_string(),
            psnr_db: psnr(output, reference)?,
            ssim_percent: 100.0 * ssim_metric(output, reference)?,
            perceptual_dist: perceptual_distance(output, reference, backend)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub psnr_db: f64,
    pub ssim_percent: f64,
    pub perceptual_dist: f64,
    pub count: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedImage {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetrics>,
    pub failed: Vec<FailedImage>,
    pub aggregates: Aggregates,
}

impl MetricReport {
    pub fn new(per_image: Vec<ImageMetrics>, failed: Vec<FailedImage>) -> Self {
        let n = per_image.len();
        let mean = |f: fn(&ImageMetrics) -> f64| {
            if n == 0 {
                f64::NAN
            } else {
                per_image.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let aggregates = Aggregates {
            psnr_db: mean(|m| m.psnr_db),
            ssim_percent: mean(|m| m.ssim_percent),
            perceptual_dist: mean(|m| m.perceptual_dist),
            count: n,
            failures: failed.len(),
        };
        Self {
            per_image,
            failed,
            aggregates,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,psnr_db,ssim_x100,perc_dist\n");
        for m in &self.per_image {
            s.push_str(&format!("{},{:.6},{:.6},{:.8}\n", m.id, m.psnr_db, m.ssim_percent, m.perceptual_dist));
        }
        s
    }

    /// Writes `metrics.csv` and `metrics.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), self.to_csv())?;
        let json = serde_json::json!({
            "means": {
                "psnr_db": finite_or_null(self.aggregates.psnr_db),
                "ssim_x100": finite_or_null(self.aggregates.ssim_percent),
                "perc_dist": finite_or_null(self.aggregates.perceptual_dist),
            },
            "count": self.aggregates.count,
            "failures": self.aggregates.failures,
            "failed": self.failed,
        });
        let mut f = fs::File::create(dir.join("metrics.json"))?;
        f.write_all(serde_json::to_string_pretty(&json)?.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

fn finite_or_null(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::Value::Null
    }
}

/// Evaluates every manifest entry with `enhance`, recording per-image failures
/// instead of aborting, and writes the report into `out_dir`.
pub fn evaluate_with<F>(
    manifest: &DatasetManifest,
    image_size: usize,
    backend: &PerceptualBackend,
    out_dir: &Path,
    mut enhance: F,
) -> Result<MetricReport>
where
    F: FnMut(&Triplet) -> Result<ImageTensor>,
{
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for id in manifest.ids() {
        let result = load_triplet(manifest, &id, image_size)
            .and_then(|t| {
                let out = enhance(&t)?;
                ImageMetrics::compute(&id, &out, &t.reference, backend)
            });
        match result {
            Ok(m) => rows.push(m),
            Err(e) => {
                log::warn!("evaluation of {id} failed: {e}");
                failed.push(FailedImage {
                    id,
                    error: e.to_string(),
                })
            }
        }
    }
    let report = MetricReport::new(rows, failed);
    report.write(out_dir)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn noisy(base: &ImageTensor, eps: f32, seed: u64) -> ImageTensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v = base
            .to_vec()
            .into_iter()
            .map(|x| (x + eps * (rng.random::<f32>() * 2.0 - 1.0)).clamp(0.0, 1.0))
            .collect();
        ImageTensor::from_vec(v, base.height(), base.width()).unwrap()
    }

    #[test]
    fn psnr_reference_values() {
        let a = ImageTensor::constant(0.3, 16, 16).unwrap();
        let b = ImageTensor::constant(0.4, 16, 16).unwrap();
        // The f32 difference of 0.4 and 0.3 is not exactly 0.1.
        let d = 0.4f32 as f64 - 0.3f32 as f64;
        let expected = -10.0 * (d * d).log10();
        assert!((psnr(&a, &b).unwrap() - expected).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let zero = ImageTensor::constant(0.0, 16, 16).unwrap();
        let one = ImageTensor::constant(1.0, 16, 16).unwrap();
        assert_eq!(psnr(&zero, &one).unwrap(), 0.0);
        let small = ImageTensor::constant(0.0, 8, 8).unwrap();
        assert!(matches!(psnr(&zero, &small), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = crate::data::synthetic::synthetic_triplet(0, 32, 1).unwrap();
        assert!((ssim_metric(&a.raw, &a.raw).unwrap() - 1.0).abs() < 1e-12);
        let ab = ssim_metric(&a.raw, &a.reference).unwrap();
        let ba = ssim_metric(&a.reference, &a.raw).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        let loss = losses::ssim_loss(&a.raw, &a.reference).unwrap();
        assert!((ab + loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn perceptual_distance_grows_with_noise() {
        let backend = PerceptualBackend::toy(DType::F64, &Device::Cpu).unwrap();
        for seed in 0..5 {
            let t = crate::data::synthetic::synthetic_triplet(seed, 32, 9).unwrap();
            let base = t.reference;
            assert_eq!(perceptual_distance(&base, &base, &backend).unwrap(), 0.0);
            let d: Vec<f64> = [0.01, 0.05, 0.1]
                .iter()
                .map(|&e| perceptual_distance(&base, &noisy(&base, e, seed as u64), &backend).unwrap())
                .collect();
            assert!(d[0] < d[1] && d[1] < d[2], "{d:?}");
        }
    }

    #[test]
    fn aggregates_are_column_means() {
        let rows = vec![
            ImageMetrics { id: "a".into(), psnr_db: 20.0, ssim_percent: 80.0, perceptual_dist: 0.1 },
            ImageMetrics { id: "b".into(), psnr_db: 30.0, ssim_percent: 90.0, perceptual_dist: 0.3 },
        ];
        let r = MetricReport::new(rows, vec![FailedImage { id: "c".into(), error: "x".into() }]);
        assert_eq!(r.aggregates.psnr_db, 25.0);
        assert_eq!(r.aggregates.ssim_percent, 85.0);
        assert!((r.aggregates.perceptual_dist - 0.2).abs() < 1e-12);
        assert_eq!((r.aggregates.count, r.aggregates.failures), (2, 1));
        assert!(r.to_csv().starts_with("id,psnr_db,ssim_x100,perc_dist\n"));
    }
}
