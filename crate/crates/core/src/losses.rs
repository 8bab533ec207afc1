//! Training objective: MSE + SSIM + α·perceptual + β·ITSS.
//!
//! Tensor-level functions take `[B, 3, H, W]` batches and stay differentiable;
//! the `ImageTensor` wrappers evaluate single images in double precision.

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::kernels;
use crate::text_align::TextEmbedding;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Perceptual weight α.
    pub alpha: f64,
    /// ITSS weight β.
    pub beta_itss: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta_itss: 0.0001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta_itss", self.beta_itss)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean squared error over all elements (scalar tensor).
pub fn mse_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same(a, b)?;
    Ok((a - b)?.sqr()?.mean_all()?)
}

pub fn mse_loss(enh: &ImageTensor, reference: &ImageTensor) -> Result<f64> {
    let a = enh.batch(DType::F64)?;
    let b = reference.batch(DType::F64)?;
    Ok(mse_tensor(&a, &b)?.to_scalar::<f64>()?)
}

fn gaussian_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let taps: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable Gaussian filter over `[N, 1, H, W]` without padding.
fn gaussian_filter(x: &Tensor) -> Result<Tensor> {
    let taps = Tensor::from_vec(gaussian_taps(), SSIM_WINDOW, x.device())?.to_dtype(x.dtype())?;
    let kv = taps.reshape((1, 1, SSIM_WINDOW, 1))?;
    let kh = taps.reshape((1, 1, 1, SSIM_WINDOW))?;
    Ok(x.conv2d(&kv, 0, 1, 1, 1)?.conv2d(&kh, 0, 1, 1, 1)?)
}

/// Per-image mean SSIM (`[B]`), averaged over channels and valid window positions.
pub fn ssim_per_image(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same(a, b)?;
    let (n, c, h, w) = a.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::TooSmall {
            height: h,
            width: w,
            window: SSIM_WINDOW,
        });
    }
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let a = a.reshape((n * c, 1, h, w))?;
    let b = b.reshape((n * c, 1, h, w))?;
    let mu_a = gaussian_filter(&a)?;
    let mu_b = gaussian_filter(&b)?;
    let mu_ab = (&mu_a * &mu_b)?;
    let mu_a2 = mu_a.sqr()?;
    let mu_b2 = mu_b.sqr()?;
    let var_a = (gaussian_filter(&a.sqr()?)? - &mu_a2)?;
    let var_b = (gaussian_filter(&b.sqr()?)? - &mu_b2)?;
    let cov = (gaussian_filter(&(&a * &b)?)? - &mu_ab)?;
    let num = (((&mu_ab * 2.0)? + c1)? * ((cov * 2.0)? + c2)?)?;
    let den = (((mu_a2 + mu_b2)? + c1)? * ((var_a + var_b)? + c2)?)?;
    let map = (num / den)?;
    Ok(map.reshape((n, ()))?.mean(1)?)
}

/// `1 − mean SSIM` over the batch (scalar tensor).
pub fn ssim_loss_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(ssim_per_image(a, b)?.mean_all()?.affine(-1.0, 1.0)?)
}

/// Mean SSIM of two images, evaluated in f64.
pub fn ssim_index(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let s = ssim_per_image(&a.batch(DType::F64)?, &b.batch(DType::F64)?)?;
    Ok(s.squeeze(0)?.to_scalar::<f64>()?)
}

pub fn ssim_loss(enh: &ImageTensor, reference: &ImageTensor) -> Result<f64> {
    Ok(1.0 - ssim_index(enh, reference)?)
}

/// A frozen convolutional feature extractor: stages of 3×3 conv + ReLU, each
/// optionally followed by 2×2 average pooling.
#[derive(Debug, Clone)]
pub struct FrozenConvNet {
    stages: Vec<(Tensor, Tensor, bool)>,
}

impl FrozenConvNet {
    /// Seeded random weights; the same seed always gives the same network.
    pub fn random(seed: u64, widths: &[usize], pools: &[bool], dtype: DType, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::new();
        let mut in_ch = 3;
        for (&out, &pool) in widths.iter().zip(pools) {
            let fan_in = in_ch * 9;
            let bound = (6.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..out * fan_in).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound).collect();
            let weight = Tensor::from_vec(w, (out, in_ch, 3, 3), device)?.to_dtype(dtype)?;
            let bias = Tensor::zeros(out, dtype, device)?;
            stages.push((weight, bias, pool));
            in_ch = out;
        }
        Ok(Self { stages })
    }

    pub fn toy(dtype: DType, device: &Device) -> Result<Self> {
        Self::random(0x00c0_ffee, &[16, 32, 64, 64], &[false, true, true, true], dtype, device)
    }

    /// Loads exported weights: `stage{i}.weight` / `stage{i}.bias`, header `{"pools": [..]}`.
    pub fn from_archive(path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let archive = Archive::read(path)?;
        let pools: Vec<bool> = serde_json::from_value(archive.header["pools"].clone())?;
        let stages = pools
            .iter()
            .enumerate()
            .map(|(i, &pool)| {
                let get = |n: &str| {
                    archive
                        .get(&format!("stage{i}.{n}"))
                        .ok_or_else(|| Error::CheckpointError(format!("missing stage{i}.{n}")))
                        .and_then(|t| Ok(t.to_dtype(dtype)?.to_device(device)?))
                };
                Ok((get("weight")?, get("bias")?, pool))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { stages })
    }

    /// Wraps given `(weight [out, in, 3, 3], bias [out], pool)` stages.
    pub fn from_stages(stages: Vec<(Tensor, Tensor, bool)>) -> Self {
        Self { stages }
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.stages.len());
        let mut f = x.clone();
        for (w, b, pool) in &self.stages {
            f = kernels::conv2d(&f, &w.detach().to_dtype(x.dtype())?, 1, 1)?
                .broadcast_add(&b.detach().to_dtype(x.dtype())?.reshape((1, (), 1, 1))?)?
                .relu()?;
            if *pool {
                f = f.avg_pool2d(2)?;
            }
            out.push(f.clone());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerceptualKind {
    ToyRandomConv,
    PretrainedExport,
}

/// Pluggable frozen feature extractor and the stages it compares.
#[derive(Debug, Clone)]
pub struct PerceptualBackend {
    pub kind: PerceptualKind,
    pub layer_ids: Vec<usize>,
    net: FrozenConvNet,
}

impl PerceptualBackend {
    /// Toy network comparing its three coarsest stages.
    pub fn toy(dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self::from_net(FrozenConvNet::toy(dtype, device)?))
    }

    /// Any frozen network, comparing its three coarsest stages.
    pub fn from_net(net: FrozenConvNet) -> Self {
        let n = net.num_stages();
        Self {
            kind: PerceptualKind::ToyRandomConv,
            layer_ids: (n.saturating_sub(3)..n).collect(),
            net,
        }
    }

    pub fn pretrained(path: &Path, layer_ids: Vec<usize>, dtype: DType, device: &Device) -> Result<Self> {
        let net = FrozenConvNet::from_archive(path, dtype, device)?;
        if let Some(bad) = layer_ids.iter().find(|&&i| i >= net.num_stages()) {
            return Err(Error::Config(format!("perceptual layer {bad} out of range")));
        }
        Ok(Self {
            kind: PerceptualKind::PretrainedExport,
            layer_ids,
            net,
        })
    }

    fn selected(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let feats = self.net.features(x)?;
        Ok(self.layer_ids.iter().map(|&i| feats[i].clone()).collect())
    }
}

/// Sum over configured layers of the mean squared feature difference (scalar tensor).
pub fn perceptual_tensor(a: &Tensor, b: &Tensor, backend: &PerceptualBackend) -> Result<Tensor> {
    check_same(a, b)?;
    let fa = backend.selected(a)?;
    let fb = backend.selected(&b.detach())?;
    let mut total = Tensor::zeros((), a.dtype(), a.device())?;
    for (x, y) in fa.iter().zip(&fb) {
        total = (total + (x - y)?.sqr()?.mean_all()?)?;
    }
    Ok(total)
}

pub fn perceptual_loss(enh: &ImageTensor, reference: &ImageTensor, backend: &PerceptualBackend) -> Result<f64> {
    let dtype = backend.net.stages.first().map_or(DType::F32, |s| s.0.dtype());
    let v = perceptual_tensor(&enh.batch(dtype)?, &reference.batch(dtype)?, backend)?;
    Ok(v.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Layer-averaged squared distance between channel-normalized features.
pub fn normalized_feature_distance(a: &Tensor, b: &Tensor, backend: &PerceptualBackend) -> Result<Tensor> {
    check_same(a, b)?;
    let fa = backend.selected(a)?;
    let fb = backend.selected(b)?;
    let unit = |f: &Tensor| -> Result<Tensor> {
        let norm = (f.sqr()?.sum_keepdim(1)? + 1e-10)?.sqrt()?;
        Ok(f.broadcast_div(&norm)?)
    };
    let mut total = Tensor::zeros((), a.dtype(), a.device())?;
    for (x, y) in fa.iter().zip(&fb) {
        let d = (unit(x)? - unit(y)?)?.sqr()?.sum_keepdim(1)?.mean_all()?;
        total = (total + d)?;
    }
    Ok((total / fa.len().max(1) as f64)?)
}

/// Frozen differentiable image encoder for the semantic-similarity term:
/// patch embedding, GELU, mean pooling, linear projection.
#[derive(Debug, Clone)]
pub struct FrozenImageEncoder {
    patch: Tensor,
    patch_bias: Tensor,
    proj: Tensor,
    proj_bias: Tensor,
    patch_size: usize,
}

impl FrozenImageEncoder {
    pub fn toy(embed_dim: usize, patch_size: usize, dtype: DType, device: &Device) -> Result<Self> {
        let width = 128;
        let mut rng = ChaCha8Rng::seed_from_u64(0x0051_7e55);
        let mut uniform = |n: usize, bound: f64| -> Vec<f64> {
            (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound).collect()
        };
        let fan = 3 * patch_size * patch_size;
        let t = |v: Vec<f64>, shape: &[usize]| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
        };
        Ok(Self {
            patch: t(uniform(width * fan, (3.0 / fan as f64).sqrt()), &[width, 3, patch_size, patch_size])?,
            patch_bias: t(uniform(width, 0.5), &[width])?,
            proj: t(uniform(embed_dim * width, (3.0 / width as f64).sqrt()), &[embed_dim, width])?,
            proj_bias: t(uniform(embed_dim, 0.1), &[embed_dim])?,
            patch_size,
        })
    }

    /// `patch`: `[W, 3, p, p]`, `patch_bias`: `[W]`, `proj`: `[D, W]`, `proj_bias`: `[D]`.
    pub fn from_parts(patch: Tensor, patch_bias: Tensor, proj: Tensor, proj_bias: Tensor) -> Result<Self> {
        let patch_size = patch.dim(2)?;
        Ok(Self {
            patch,
            patch_bias,
            proj,
            proj_bias,
            patch_size,
        })
    }

    pub fn parts(&self) -> [&Tensor; 4] {
        [&self.patch, &self.patch_bias, &self.proj, &self.proj_bias]
    }

    pub fn embed_dim(&self) -> usize {
        self.proj.dims()[0]
    }

    /// `[B, 3, H, W]` → `[B, embed_dim]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let p = self.patch_size;
        if h % p != 0 || w % p != 0 {
            return Err(Error::BadShape(format!("{h}x{w} is not divisible by patch size {p}")));
        }
        let dt = x.dtype();
        let f = kernels::conv2d(x, &self.patch.detach().to_dtype(dt)?, p, 0)?
            .broadcast_add(&self.patch_bias.detach().to_dtype(dt)?.reshape((1, (), 1, 1))?)?
            .gelu_erf()?;
        let pooled = f.flatten_from(2)?.mean(2)?;
        Ok(pooled
            .matmul(&self.proj.detach().to_dtype(dt)?.t()?)?
            .broadcast_add(&self.proj_bias.detach().to_dtype(dt)?)?)
    }
}

fn cosine_rows(a: &Tensor, t: &Tensor) -> Result<Tensor> {
    // a: [B, D], t: [B, D] -> [B]
    let dot = (a * t)?.sum(D::Minus1)?;
    let na = a.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nt = t.sqr()?.sum(D::Minus1)?.sqrt()?;
    Ok((dot / (na * nt)?)?)
}

fn check_nonzero(t: &Tensor) -> Result<()> {
    let norms = t.sqr()?.sum(D::Minus1)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    // Non-finite norms pass through so callers see a non-finite loss.
    if norms.iter().any(|n| *n == 0.0) {
        return Err(Error::ZeroVector);
    }
    Ok(())
}

/// `|cos(e_enh, e_text) − cos(e_ref, e_text)|` per row, averaged; `e_ref` and
/// `e_text` are treated as constants.
pub fn itss_from_embeddings(e_enh: &Tensor, e_ref: &Tensor, e_text: &Tensor) -> Result<Tensor> {
    let e_ref = e_ref.detach();
    let e_text = e_text.detach();
    for t in [e_enh, &e_ref, &e_text] {
        check_nonzero(t)?;
    }
    let d = (cosine_rows(e_enh, &e_text)? - cosine_rows(&e_ref, &e_text)?)?;
    Ok(d.abs()?.mean_all()?)
}

/// Batch ITSS: `text` is `[B, D]` (or `[D]`, broadcast over the batch).
pub fn itss_tensor(enh: &Tensor, reference: &Tensor, text: &Tensor, encoder: &FrozenImageEncoder) -> Result<Tensor> {
    check_same(enh, reference)?;
    let b = enh.dim(0)?;
    let text = if text.rank() == 1 {
        text.unsqueeze(0)?.broadcast_as((b, text.dim(0)?))?.contiguous()?
    } else {
        text.clone()
    };
    let e_enh = encoder.forward(enh)?;
    let e_ref = encoder.forward(&reference.detach())?;
    if text.dim(D::Minus1)? != e_enh.dim(D::Minus1)? {
        return Err(Error::DimMismatch {
            expected: e_enh.dim(D::Minus1)?,
            got: text.dim(D::Minus1)?,
        });
    }
    itss_from_embeddings(&e_enh, &e_ref, &text.to_dtype(enh.dtype())?)
}

pub fn itss_loss(
    enh: &ImageTensor,
    reference: &ImageTensor,
    text: &TextEmbedding,
    encoder: &FrozenImageEncoder,
) -> Result<f64> {
    let dt = DType::F64;
    let v = itss_tensor(
        &enh.batch(dt)?,
        &reference.batch(dt)?,
        &text.to_tensor(dt, &Device::Cpu)?,
        encoder,
    )?;
    Ok(v.to_scalar::<f64>()?)
}

/// Frozen networks used by the objective.
#[derive(Debug, Clone)]
pub struct LossBackends {
    pub perceptual: PerceptualBackend,
    pub itss_encoder: FrozenImageEncoder,
}

impl LossBackends {
    pub fn toy(embed_dim: usize, patch_size: usize, dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self {
            perceptual: PerceptualBackend::toy(dtype, device)?,
            itss_encoder: FrozenImageEncoder::toy(embed_dim, patch_size, dtype, device)?,
        })
    }
}

/// Weighted total and its unweighted terms (all scalar tensors).
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Tensor,
    pub mse: Tensor,
    pub ssim: Tensor,
    pub perceptual: Tensor,
    pub itss: Tensor,
}

/// Plain-number view of [`LossTerms`] for logging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub itss: f64,
}

impl LossTerms {
    pub fn breakdown(&self) -> Result<LossBreakdown> {
        let f = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossBreakdown {
            total: f(&self.total)?,
            mse: f(&self.mse)?,
            ssim: f(&self.ssim)?,
            perceptual: f(&self.perceptual)?,
            itss: f(&self.itss)?,
        })
    }
}

/// `L = MSE + (1 − SSIM) + α·perceptual + β·ITSS` on batches.
pub fn total_loss_tensor(
    enh: &Tensor,
    reference: &Tensor,
    text: &Tensor,
    weights: &LossWeights,
    backends: &LossBackends,
) -> Result<LossTerms> {
    let mse = mse_tensor(enh, reference)?;
    let ssim = ssim_loss_tensor(enh, reference)?;
    let perceptual = perceptual_tensor(enh, reference, &backends.perceptual)?;
    let itss = itss_tensor(enh, reference, text, &backends.itss_encoder)?;
    let total = (((&mse + &ssim)? + (&perceptual * weights.alpha)?)? + (&itss * weights.beta_itss)?)?;
    Ok(LossTerms {
        total,
        mse,
        ssim,
        perceptual,
        itss,
    })
}

pub fn total_loss(
    enh: &ImageTensor,
    reference: &ImageTensor,
    text: &TextEmbedding,
    weights: &LossWeights,
    backends: &LossBackends,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let dt = DType::F64;
    let terms = total_loss_tensor(
        &enh.batch(dt)?,
        &reference.batch(dt)?,
        &text.to_tensor(dt, &Device::Cpu)?,
        weights,
        backends,
    )?;
    terms.breakdown()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;

    fn noise_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..3 * h * w).map(|_| rng.random::<f32>()).collect();
        ImageTensor::from_vec(v, h, w).unwrap()
    }

    fn smooth_image(h: usize, w: usize, phase: f32) -> ImageTensor {
        let mut v = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    v.push(0.5 + 0.4 * ((x as f32 * 0.3 + y as f32 * 0.2 + c as f32 + phase).sin()));
                }
            }
        }
        ImageTensor::from_vec(v, h, w).unwrap()
    }

    /// Direct windowed SSIM: every valid 11×11 window, Gaussian weights, f64.
    fn ssim_oracle(a: &ImageTensor, b: &ImageTensor) -> f64 {
        let (c, h, w) = a.dims();
        let (av, bv) = (a.to_vec(), b.to_vec());
        let r = 5.0f64;
        let mut g = [[0.0f64; 11]; 11];
        let mut total = 0.0;
        for (i, row) in g.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                let (dy, dx) = (i as f64 - r, j as f64 - r);
                *cell = (-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5)).exp();
                total += *cell;
            }
        }
        let (c1, c2) = (0.01f64 * 0.01, 0.03f64 * 0.03);
        let mut sum = 0.0;
        let mut count = 0usize;
        for ch in 0..c {
            for y in 0..=h - 11 {
                for x in 0..=w - 11 {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let k = g[i][j] / total;
                            let idx = ch * h * w + (y + i) * w + x + j;
                            let (p, q) = (av[idx] as f64, bv[idx] as f64);
                            ma += k * p;
                            mb += k * q;
                            saa += k * p * p;
                            sbb += k * q * q;
                            sab += k * p * q;
                        }
                    }
                    let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                    sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
        }
        sum / count as f64
    }

    #[test]
    fn mse_matches_direct_sum() {
        let (a, b) = (noise_image(4, 5, 1), noise_image(4, 5, 2));
        let want = a
            .to_vec()
            .iter()
            .zip(b.to_vec())
            .map(|(x, y)| (*x as f64 - y as f64).powi(2))
            .sum::<f64>()
            / 60.0;
        assert!((mse_loss(&a, &b).unwrap() - want).abs() < 1e-15);
        assert!(mse_loss(&a, &noise_image(5, 4, 1)).is_err());
    }

    #[test]
    fn ssim_matches_windowed_oracle() {
        let a = smooth_image(16, 19, 0.0);
        let b = noise_image(16, 19, 3);
        let c = smooth_image(16, 19, 0.4);
        for (x, y) in [(&a, &b), (&a, &c), (&b, &c)] {
            let got = ssim_index(x, y).unwrap();
            assert!((got - ssim_oracle(x, y)).abs() < 1e-9, "{got}");
        }
        assert!((ssim_index(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert!((ssim_loss(&a, &b).unwrap() + ssim_index(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = noise_image(10, 32, 0);
        assert!(matches!(
            ssim_index(&a, &a),
            Err(Error::TooSmall { height: 10, width: 32, window: 11 })
        ));
    }

    #[test]
    fn perceptual_is_zero_on_identity_and_positive_otherwise() {
        let backend = PerceptualBackend::toy(DType::F64, &Device::Cpu).unwrap();
        let a = smooth_image(32, 32, 0.0);
        let b = smooth_image(32, 32, 0.5);
        assert_eq!(perceptual_loss(&a, &a, &backend).unwrap(), 0.0);
        assert!(perceptual_loss(&a, &b, &backend).unwrap() > 0.0);
        assert_eq!(backend.layer_ids, vec![1, 2, 3]);
    }

    #[test]
    fn loss_vanishes_on_identical_images() {
        let backends = LossBackends::toy(32, 8, DType::F64, &Device::Cpu).unwrap();
        let text = TextEmbedding::new((0..32).map(|i| (i as f32 - 10.0) / 7.0).collect()).unwrap();
        for seed in 0..3 {
            let x = noise_image(32, 32, seed);
            let b = total_loss(&x, &x, &text, &LossWeights::default(), &backends).unwrap();
            assert!(b.total.abs() < 1e-6, "{b:?}");
            assert_eq!(b.mse, 0.0);
            assert_eq!(b.itss, 0.0);
        }
    }

    #[test]
    fn itss_bounds_identity_and_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let dev = Device::Cpu;
        let mut vec = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect() };
        let d = 16;
        for _ in 0..1000 {
            let (e, r, t) = (vec(d), vec(d), vec(d));
            let scales = vec(3).iter().map(|s| 0.01 + 100.0 * s.abs()).collect::<Vec<_>>();
            let mk = |v: &[f64], s: f64| Tensor::from_vec(v.iter().map(|x| x * s).collect::<Vec<_>>(), (1, d), &dev).unwrap();
            let v = itss_from_embeddings(&mk(&e, 1.0), &mk(&r, 1.0), &mk(&t, 1.0)).unwrap().to_scalar::<f64>().unwrap();
            assert!((0.0..=2.0).contains(&v));
            let same = itss_from_embeddings(&mk(&e, 1.0), &mk(&e, 1.0), &mk(&t, 1.0)).unwrap().to_scalar::<f64>().unwrap();
            assert_eq!(same, 0.0);
            let scaled = itss_from_embeddings(&mk(&e, scales[0]), &mk(&r, scales[1]), &mk(&t, scales[2]))
                .unwrap()
                .to_scalar::<f64>()
                .unwrap();
            assert!((scaled - v).abs() < 1e-6);
        }
        let z = Tensor::zeros((1, d), DType::F64, &dev).unwrap();
        let o = Tensor::ones((1, d), DType::F64, &dev).unwrap();
        assert!(matches!(itss_from_embeddings(&o, &o, &z), Err(Error::ZeroVector)));
    }

    #[test]
    fn itss_checks_text_dimension() {
        let enc = FrozenImageEncoder::toy(32, 8, DType::F64, &Device::Cpu).unwrap();
        let x = noise_image(16, 16, 0).batch(DType::F64).unwrap();
        let t = Tensor::ones(31, DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(
            itss_tensor(&x, &x, &t, &enc),
            Err(Error::DimMismatch { expected: 32, got: 31 })
        ));
    }

    #[test]
    fn frozen_backends_receive_no_gradient() {
        let dev = Device::Cpu;
        let var = |shape: &[usize], seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n: usize = shape.iter().product();
            Var::from_tensor(
                &Tensor::from_vec((0..n).map(|_| rng.random::<f64>() - 0.5).collect::<Vec<_>>(), shape, &dev).unwrap(),
            )
            .unwrap()
        };
        let (w0, b0, w1, b1) = (var(&[4, 3, 3, 3], 1), var(&[4], 2), var(&[4, 4, 3, 3], 3), var(&[4], 4));
        let net = FrozenConvNet::from_stages(vec![
            (w0.as_tensor().clone(), b0.as_tensor().clone(), false),
            (w1.as_tensor().clone(), b1.as_tensor().clone(), true),
        ]);
        let backend = PerceptualBackend::from_net(net);
        let (pw, pb, qw, qb) = (var(&[8, 3, 4, 4], 5), var(&[8], 6), var(&[6, 8], 7), var(&[6], 8));
        let enc = FrozenImageEncoder::from_parts(
            pw.as_tensor().clone(),
            pb.as_tensor().clone(),
            qw.as_tensor().clone(),
            qb.as_tensor().clone(),
        )
        .unwrap();
        let x = var(&[1, 3, 16, 16], 9);
        let input = x.as_tensor().affine(0.5, 0.5).unwrap();
        let reference = noise_image(16, 16, 10).batch(DType::F64).unwrap();
        let text = Tensor::from_vec(vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.2], 6, &dev).unwrap();
        let loss = (perceptual_tensor(&input, &reference, &backend).unwrap()
            + itss_tensor(&input, &reference, &text, &enc).unwrap())
        .unwrap();
        let grads = loss.backward().unwrap();
        for v in [&w0, &b0, &w1, &b1, &pw, &pb, &qw, &qb] {
            if let Some(g) = grads.get(v.as_tensor()) {
                assert_eq!(g.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
            }
        }
        let gx = grads.get(x.as_tensor()).unwrap();
        assert!(gx.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap() > 0.0);
    }

    #[test]
    fn weights_are_validated() {
        assert!(LossWeights { alpha: -1.0, beta_itss: 0.0 }.validate().is_err());
        assert!(LossWeights { alpha: 0.1, beta_itss: f64::NAN }.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }
}
