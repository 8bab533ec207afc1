//! Prior-free multi-scale illumination estimation.
//!
//! For every configured scale the raw image is average-pooled, encoded by a
//! convolutional stem and one Transformer layer, mapped to a strictly positive
//! three-channel light map and bilinearly upsampled. Each map multiplies the raw
//! image into a scale-specific lit-up image; a learned convolution fuses them.

use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::resample::{adaptive_avg_pool, resize_bilinear};
use crate::nn::{softplus, Conv2d, EncoderLayer, Init, LayerNorm, Linear, Scope};

/// Lower bound added after softplus so maps stay strictly positive.
pub const MAP_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IlluminationEstimatorConfig {
    pub scales: Vec<usize>,
    pub embed_dim: usize,
    pub attention_heads: usize,
}

impl Default for IlluminationEstimatorConfig {
    fn default() -> Self {
        Self {
            scales: vec![16, 32, 64],
            embed_dim: 32,
            attention_heads: 4,
        }
    }
}

impl IlluminationEstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("at least one illumination scale is required".into()));
        }
        if self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "illumination scales {:?} must be strictly ascending",
                self.scales
            )));
        }
        if let Some(s) = self.scales.iter().find(|s| **s < 4) {
            return Err(Error::Config(format!("illumination scale {s} is below 4")));
        }
        if self.embed_dim == 0
            || self.attention_heads == 0
            || self.embed_dim % self.attention_heads != 0
        {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of attention_heads {}",
                self.embed_dim, self.attention_heads
            )));
        }
        Ok(())
    }
}

/// A strictly positive `[3, H, W]` light map.
#[derive(Debug, Clone)]
pub struct IlluminationMap {
    data: Tensor,
}

impl IlluminationMap {
    pub fn new(data: Tensor) -> Result<Self> {
        let dims = data.dims();
        if dims.len() != 3 || dims[0] != 3 {
            return Err(Error::BadShape(format!("illumination map must be [3, H, W], got {dims:?}")));
        }
        let min = data.to_dtype(DType::F64)?.flatten_all()?.min(0)?.to_scalar::<f64>()?;
        if !(min > 0.0) {
            return Err(Error::BadShape(format!("illumination map has non-positive value {min}")));
        }
        Ok(Self { data })
    }

    pub fn ones(height: usize, width: usize) -> Result<Self> {
        Self::new(Tensor::ones((3, height, width), DType::F32, &candle_core::Device::Cpu)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.data.dims();
        (d[0], d[1], d[2])
    }

    /// Writes the channel-mean of the map as a blue-to-yellow heatmap PNG,
    /// normalized by the map's own range.
    pub fn save_heatmap(&self, path: &Path) -> Result<()> {
        let mean = self.data.to_dtype(DType::F32)?.mean(0)?;
        let v: Vec<f32> = mean.flatten_all()?.to_vec1()?;
        let (lo, hi) = v.iter().fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        let span = (hi - lo).max(1e-12);
        let (_, h, w) = self.dims();
        let mut planar = vec![0f32; 3 * h * w];
        for (i, x) in v.iter().enumerate() {
            let t = (x - lo) / span;
            planar[i] = t;
            planar[h * w + i] = t;
            planar[2 * h * w + i] = 1.0 - t;
        }
        ImageTensor::from_vec(planar, h, w)?.save(path)
    }
}

/// Multiplies an image batch by a light map without clamping.
pub fn lit_product(image: &Tensor, map: &Tensor) -> Result<Tensor> {
    if image.dims() != map.dims() {
        return Err(Error::ShapeMismatch(format!(
            "image {:?} vs map {:?}",
            image.dims(),
            map.dims()
        )));
    }
    Ok((image * map)?)
}

/// `clamp(image ⊙ map, 0, 1)` on tensors of any matching shape.
pub fn lit_up_tensor(image: &Tensor, map: &Tensor) -> Result<Tensor> {
    Ok(lit_product(image, map)?.clamp(0.0, 1.0)?)
}

pub fn lit_up(image: &ImageTensor, map: &IlluminationMap) -> Result<ImageTensor> {
    let map = map.tensor().to_dtype(DType::F32)?;
    ImageTensor::new(lit_up_tensor(image.tensor(), &map)?)
}

/// One per-scale estimator: stem, positional embedding, Transformer layer, positive head.
#[derive(Debug, Clone)]
struct ScaleEstimator {
    scale: usize,
    stem_in: Conv2d,
    stem_out: Conv2d,
    pos: Tensor,
    block: EncoderLayer,
    norm: LayerNorm,
    head: Linear,
}

impl ScaleEstimator {
    fn new(scope: &Scope, scale: usize, cfg: &IlluminationEstimatorConfig) -> Result<Self> {
        let e = cfg.embed_dim;
        // softplus(target) + floor == 1, so initial maps sit near the identity.
        let target = ((1.0 - MAP_FLOOR).exp() - 1.0).ln();
        let head = Linear::with_init(
            &scope.pp("head"),
            e,
            3,
            Init::Uniform(1.0 / (e as f64).sqrt()),
            Init::Const(target),
        )?;
        Ok(Self {
            scale,
            stem_in: Conv2d::same3(&scope.pp("stem_in"), 3, e)?,
            stem_out: Conv2d::same3(&scope.pp("stem_out"), e, e)?,
            pos: scope.param((scale * scale, e), "pos_embed", Init::Uniform(0.02))?,
            block: EncoderLayer::new(&scope.pp("block"), e, cfg.attention_heads, 2 * e)?,
            norm: LayerNorm::new(&scope.pp("norm"), e)?,
            head,
        })
    }

    /// `x`: `[B, 3, H, W]` → positive map `[B, 3, H, W]`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        let s = self.scale;
        let pooled = adaptive_avg_pool(x, s, s)?;
        let feat = self.stem_out.forward(&self.stem_in.forward(&pooled)?.gelu_erf()?)?;
        let tokens = feat
            .flatten_from(2)?
            .transpose(1, 2)?
            .broadcast_add(&self.pos.unsqueeze(0)?)?;
        let tokens = self.norm.forward(&self.block.forward(&tokens)?)?;
        let logits = self.head.forward(&tokens)?; // [B, s*s, 3]
        let map = (softplus(&logits)? + MAP_FLOOR)?;
        let map = map.transpose(1, 2)?.contiguous()?.reshape((b, 3, s, s))?;
        resize_bilinear(&map, h, w)
    }
}

/// The full multi-scale estimator with its fusion convolution.
#[derive(Debug, Clone)]
pub struct IlluminationEstimator {
    config: IlluminationEstimatorConfig,
    scales: Vec<ScaleEstimator>,
    fusion: Conv2d,
    prefix: String,
}

impl IlluminationEstimator {
    pub fn new(scope: &Scope, config: &IlluminationEstimatorConfig) -> Result<Self> {
        config.validate()?;
        let scales = config
            .scales
            .iter()
            .map(|&s| ScaleEstimator::new(&scope.pp(format!("scale{s}")), s, config))
            .collect::<Result<Vec<_>>>()?;
        let n = config.scales.len();
        let fusion = Conv2d::with_init(&scope.pp("fusion"), 3 * n, 3, 3, 1, Init::Uniform(0.01))?;
        Ok(Self {
            config: config.clone(),
            scales,
            fusion,
            prefix: scope.pp("fusion").prefix().to_string(),
        })
    }

    pub fn config(&self) -> &IlluminationEstimatorConfig {
        &self.config
    }

    fn scale_index(&self, scale: usize) -> Result<usize> {
        self.config
            .scales
            .iter()
            .position(|&s| s == scale)
            .ok_or(Error::BadScale(scale))
    }

    /// Light map for one scale of a `[B, 3, H, W]` batch.
    pub fn scale_map_batch(&self, x: &Tensor, scale: usize) -> Result<Tensor> {
        let i = self.scale_index(scale)?;
        self.scales[i].forward(x)
    }

    /// Fuses per-scale lit-up batches: scale average plus a learned 3×3 correction,
    /// clamped to `[0, 1]`.
    ///
    /// The average accumulates in f64 so identical inputs reproduce themselves exactly.
    pub fn fuse_batch(&self, lits: &[Tensor]) -> Result<Tensor> {
        let n = self.scales.len();
        if lits.len() != n {
            return Err(Error::WrongCount {
                expected: n,
                got: lits.len(),
            });
        }
        let first = lits[0].dims();
        if let Some(bad) = lits.iter().find(|t| t.dims() != first) {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", first, bad.dims())));
        }
        let dtype = lits[0].dtype();
        let mut sum = lits[0].to_dtype(DType::F64)?;
        for t in &lits[1..] {
            sum = (sum + t.to_dtype(DType::F64)?)?;
        }
        let mean = (sum / n as f64)?.to_dtype(dtype)?;
        let correction = self.fusion.forward(&Tensor::cat(lits, 1)?)?;
        Ok((mean + correction)?.clamp(0.0, 1.0)?)
    }

    /// Lit-up image and per-scale maps for a `[B, 3, H, W]` batch.
    pub fn forward_batch(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let maps = self
            .scales
            .iter()
            .map(|s| s.forward(x))
            .collect::<Result<Vec<_>>>()?;
        let lits = maps
            .iter()
            .map(|m| lit_up_tensor(x, m))
            .collect::<Result<Vec<_>>>()?;
        Ok((self.fuse_batch(&lits)?, maps))
    }

    pub fn estimate_scale(&self, image: &ImageTensor, scale: usize) -> Result<IlluminationMap> {
        let dtype = self.fusion_dtype();
        let map = self.scale_map_batch(&image.batch(dtype)?, scale)?;
        IlluminationMap::new(map.squeeze(0)?)
    }

    pub fn fuse_scales(&self, lit_images: &[ImageTensor]) -> Result<ImageTensor> {
        let dtype = self.fusion_dtype();
        let batches = lit_images
            .iter()
            .map(|i| i.batch(dtype))
            .collect::<Result<Vec<_>>>()?;
        ImageTensor::from_clamped(&self.fuse_batch(&batches)?.squeeze(0)?)
    }

    pub fn estimate(&self, image: &ImageTensor) -> Result<(ImageTensor, Vec<IlluminationMap>)> {
        let (lit, maps) = self.forward_batch(&image.batch(self.fusion_dtype())?)?;
        let maps = maps
            .into_iter()
            .map(|m| IlluminationMap::new(m.squeeze(0)?))
            .collect::<Result<Vec<_>>>()?;
        Ok((ImageTensor::from_clamped(&lit.squeeze(0)?)?, maps))
    }

    fn fusion_dtype(&self) -> DType {
        self.fusion.dtype()
    }

    /// Sets the fusion correction to zero so fusion reduces to the scale average.
    pub fn set_averaging_fusion(&self, store: &crate::nn::ParamStore) -> Result<()> {
        for name in ["weight", "bias"] {
            let full = format!("{}.{name}", self.prefix);
            let var = store
                .get(&full)
                .ok_or_else(|| Error::Config(format!("no parameter {full}")))?;
            store.assign(&full, &var.zeros_like()?)?;
        }
        Ok(())
    }
}
