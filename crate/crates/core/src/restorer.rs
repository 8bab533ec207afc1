//! Semantics-guided image restoration.
//!
//! Two encoder–decoder branches see the lit-up image: one through a random
//! pixel mask, one unmasked. Each encoder stage is a Transformer–Conv block
//! (axial attention plus a double convolution) followed by a Fuse block that
//! cross-attends to the aligned text feature. The bottleneck modulates features
//! with text-conditioned FiLM parameters. Branch outputs are summed and squashed
//! by a sigmoid.

use candle_core::{DType, Device, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::resample::upsample_nearest2x;
use crate::nn::{BatchNorm2d, Conv2d, Init, LayerNorm, Linear, MultiHeadAttention, Scope};

/// Output is kept this far inside `(0, 1)` so saturated sigmoids never hit the bounds.
pub const OUTPUT_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestorerConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub share_branch_weights: bool,
    pub attention_heads: usize,
}

impl Default for RestorerConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            depth: 3,
            share_branch_weights: false,
            attention_heads: 4,
        }
    }
}

impl RestorerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("restorer depth must be at least 1".into()));
        }
        if self.attention_heads == 0 || self.base_channels % self.attention_heads != 0 {
            return Err(Error::Config(format!(
                "base_channels {} must be a multiple of attention_heads {}",
                self.base_channels, self.attention_heads
            )));
        }
        Ok(())
    }

    pub fn channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }
}

/// Architectural switches used by ablation variants.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RestorerVariant {
    /// Bottleneck is a plain Transformer–Conv block instead of the FiLM module.
    pub no_cfm: bool,
    /// Fuse blocks use self-attention over image tokens instead of text cross-attention.
    pub mha_swap: bool,
}

/// Binary `[1, H, W]` mask; zeros mark dropped pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMask {
    data: Vec<u8>,
    height: usize,
    width: usize,
    ratio: f64,
    seed: u64,
}

impl PixelMask {
    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            data: vec![1; height * width],
            height,
            width,
            ratio: 0.0,
            seed: 0,
        }
    }

    pub fn values(&self) -> &[u8] {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn zero_fraction(&self) -> f64 {
        self.data.iter().filter(|v| **v == 0).count() as f64 / self.data.len().max(1) as f64
    }

    /// `[1, 1, H, W]` tensor in `dtype`.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let v: Vec<f32> = self.data.iter().map(|&b| f32::from(b)).collect();
        Ok(Tensor::from_vec(v, (1, 1, self.height, self.width), device)?.to_dtype(dtype)?)
    }
}

/// Zeroes each pixel independently with probability `ratio`, deterministically in `seed`.
pub fn make_mask(height: usize, width: usize, ratio: f64, seed: u64) -> Result<PixelMask> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::BadRatio(ratio));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..height * width)
        .map(|_| u8::from(rng.random::<f64>() >= ratio))
        .collect();
    Ok(PixelMask {
        data,
        height,
        width,
        ratio,
        seed,
    })
}

/// Stacks per-sample masks into `[B, 1, H, W]`.
pub fn stack_masks(masks: &[PixelMask], dtype: DType, device: &Device) -> Result<Tensor> {
    let parts = masks
        .iter()
        .map(|m| m.to_tensor(dtype, device))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 0)?)
}

fn to_tokens(x: &Tensor) -> Result<Tensor> {
    // [B, C, H, W] -> [B, H*W, C]
    Ok(x.flatten_from(2)?.transpose(1, 2)?.contiguous()?)
}

fn from_tokens(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, _, c) = t.dims3()?;
    Ok(t.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

/// Row attention then column attention, each pre-norm and residual.
#[derive(Debug, Clone)]
struct AxialAttention {
    row_norm: LayerNorm,
    row: MultiHeadAttention,
    col_norm: LayerNorm,
    col: MultiHeadAttention,
}

impl AxialAttention {
    fn new(scope: &Scope, channels: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            row_norm: LayerNorm::new(&scope.pp("row_norm"), channels)?,
            row: MultiHeadAttention::new(&scope.pp("row"), channels, channels, heads, false)?,
            col_norm: LayerNorm::new(&scope.pp("col_norm"), channels)?,
            col: MultiHeadAttention::new(&scope.pp("col"), channels, channels, heads, false)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        // Rows: sequences of length W.
        let t = x.permute((0, 2, 3, 1))?.contiguous()?.reshape((b * h, w, c))?;
        let n = self.row_norm.forward(&t)?;
        let t = (&t + self.row.forward(&n, &n)?)?;
        // Columns: sequences of length H.
        let t = t
            .reshape((b, h, w, c))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * w, h, c))?;
        let n = self.col_norm.forward(&t)?;
        let t = (&t + self.col.forward(&n, &n)?)?;
        Ok(t.reshape((b, w, h, c))?.permute((0, 3, 2, 1))?.contiguous()?)
    }
}

/// Axial self-attention plus two 3×3 conv → BN → ReLU layers, summed.
#[derive(Debug, Clone)]
pub struct TransformerConv {
    attn: AxialAttention,
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

impl TransformerConv {
    pub fn new(scope: &Scope, channels: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            attn: AxialAttention::new(&scope.pp("axial"), channels, heads)?,
            conv1: Conv2d::same3(&scope.pp("conv1"), channels, channels)?,
            bn1: BatchNorm2d::new(&scope.pp("bn1"), channels)?,
            conv2: Conv2d::same3(&scope.pp("conv2"), channels, channels)?,
            bn2: BatchNorm2d::new(&scope.pp("bn2"), channels)?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let global = self.attn.forward(x)?;
        let local = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let local = self.bn2.forward(&self.conv2.forward(&local)?, train)?.relu()?;
        Ok((global + local)?)
    }
}

/// `LayerNorm(CA(F, text) + F)` with image tokens as queries.
#[derive(Debug, Clone)]
pub struct FuseBlock {
    attn: MultiHeadAttention,
    norm: LayerNorm,
    text_dim: usize,
    self_attention: bool,
}

impl FuseBlock {
    pub fn new(scope: &Scope, channels: usize, text_dim: usize, heads: usize, self_attention: bool) -> Result<Self> {
        let attn = if self_attention {
            MultiHeadAttention::new(&scope.pp("attn"), channels, channels, heads, false)?
        } else {
            MultiHeadAttention::new(&scope.pp("attn"), channels, text_dim, heads, true)?
        };
        Ok(Self {
            attn,
            norm: LayerNorm::new(&scope.pp("norm"), channels)?,
            text_dim,
            self_attention,
        })
    }

    /// `x`: `[B, C, H, W]`, `text`: `[B, text_dim]`.
    pub fn forward(&self, x: &Tensor, text: &Tensor) -> Result<Tensor> {
        check_text(text, self.text_dim)?;
        let (_, _, h, w) = x.dims4()?;
        let tokens = to_tokens(x)?;
        let attended = if self.self_attention {
            self.attn.forward(&tokens, &tokens)?
        } else {
            self.attn.forward(&tokens, &text.unsqueeze(1)?)?
        };
        let out = self.norm.forward(&(attended + &tokens)?)?;
        from_tokens(&out, h, w)
    }
}

fn check_text(text: &Tensor, dim: usize) -> Result<()> {
    let d = text.dim(D::Minus1)?;
    if d != dim {
        return Err(Error::DimMismatch { expected: dim, got: d });
    }
    Ok(())
}

/// Per-sample, per-channel FiLM parameters.
#[derive(Debug, Clone)]
pub struct ModulationParams {
    /// `[B, C]`
    pub gamma: Tensor,
    /// `[B, C]`
    pub beta: Tensor,
}

/// `F ⊙ γ + β` with `γ, β` broadcast over space.
pub fn apply_film(x: &Tensor, params: &ModulationParams) -> Result<Tensor> {
    let (b, c, _, _) = x.dims4()?;
    if params.gamma.dims() != [b, c] || params.beta.dims() != [b, c] {
        return Err(Error::ShapeMismatch(format!(
            "FiLM params {:?}/{:?} for features {:?}",
            params.gamma.dims(),
            params.beta.dims(),
            x.dims()
        )));
    }
    let g = params.gamma.reshape((b, c, 1, 1))?;
    let bt = params.beta.reshape((b, c, 1, 1))?;
    Ok(x.broadcast_mul(&g)?.broadcast_add(&bt)?)
}

/// Cross-attention FiLM module: `(γ, β) = MLP(GAP(CA(F, text)))`, output `F ⊙ γ + β`.
#[derive(Debug, Clone)]
pub struct CrossAttentionFilm {
    attn: MultiHeadAttention,
    fc1: Linear,
    fc2: Linear,
    channels: usize,
    text_dim: usize,
}

impl CrossAttentionFilm {
    pub fn new(scope: &Scope, channels: usize, text_dim: usize, heads: usize) -> Result<Self> {
        let hidden = channels;
        // Output bias starts at γ = 1, β = 0 so the module begins near the identity.
        let fc2_scope = scope.pp("fc2");
        let fc2 = Linear::with_init(
            &fc2_scope,
            hidden,
            2 * channels,
            Init::Uniform(0.1 / (hidden as f64).sqrt()),
            Init::Zeros,
        )?;
        let bias: Vec<f64> = (0..2 * channels).map(|i| if i < channels { 1.0 } else { 0.0 }).collect();
        if let Some(var) = scope_store_get(scope, "fc2.bias") {
            var.set(&Tensor::from_vec(bias, 2 * channels, var.device())?.to_dtype(var.dtype())?)?;
        }
        Ok(Self {
            attn: MultiHeadAttention::new(&scope.pp("attn"), channels, text_dim, heads, true)?,
            fc1: Linear::new(&scope.pp("fc1"), channels, hidden)?,
            fc2,
            channels,
            text_dim,
        })
    }

    pub fn modulation(&self, x: &Tensor, text: &Tensor) -> Result<ModulationParams> {
        check_text(text, self.text_dim)?;
        let c = x.dim(1)?;
        if c != self.channels {
            return Err(Error::DimMismatch { expected: self.channels, got: c });
        }
        let tokens = to_tokens(x)?;
        let attended = self.attn.forward(&tokens, &text.unsqueeze(1)?)?;
        let pooled = attended.mean(1)?; // [B, C]
        let params = self.fc2.forward(&self.fc1.forward(&pooled)?.gelu_erf()?)?;
        Ok(ModulationParams {
            gamma: params.narrow(1, 0, self.channels)?,
            beta: params.narrow(1, self.channels, self.channels)?,
        })
    }

    pub fn forward(&self, x: &Tensor, text: &Tensor) -> Result<Tensor> {
        apply_film(x, &self.modulation(x, text)?)
    }
}

fn scope_store_get(scope: &Scope, name: &str) -> Option<candle_core::Var> {
    scope.store().get(&scope.full_name(name))
}

#[derive(Debug, Clone)]
enum Bottleneck {
    Film(CrossAttentionFilm),
    Plain(TransformerConv),
}

#[derive(Debug, Clone)]
struct EncoderStage {
    tc: TransformerConv,
    fuse: FuseBlock,
    down: Conv2d,
}

#[derive(Debug, Clone)]
struct DecoderStage {
    up: Conv2d,
    tc: TransformerConv,
}

/// Semantics-guided encoder–decoder.
#[derive(Debug, Clone)]
pub struct Sged {
    stem: Conv2d,
    encoder: Vec<EncoderStage>,
    bottleneck: Bottleneck,
    decoder: Vec<DecoderStage>,
    head: Conv2d,
    depth: usize,
}

impl Sged {
    pub fn new(scope: &Scope, cfg: &RestorerConfig, text_dim: usize, variant: RestorerVariant) -> Result<Self> {
        cfg.validate()?;
        let heads = cfg.attention_heads;
        let encoder = (0..cfg.depth)
            .map(|i| {
                let s = scope.pp(format!("enc{i}"));
                let c = cfg.channels(i);
                Ok(EncoderStage {
                    tc: TransformerConv::new(&s.pp("tc"), c, heads)?,
                    fuse: FuseBlock::new(&s.pp("fuse"), c, text_dim, heads, variant.mha_swap)?,
                    down: Conv2d::new(&s.pp("down"), c, cfg.channels(i + 1), 3, 2, 1)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let cb = cfg.channels(cfg.depth);
        let bottleneck = if variant.no_cfm {
            Bottleneck::Plain(TransformerConv::new(&scope.pp("bottleneck"), cb, heads)?)
        } else {
            Bottleneck::Film(CrossAttentionFilm::new(&scope.pp("cfm"), cb, text_dim, heads)?)
        };
        let decoder = (0..cfg.depth)
            .map(|i| {
                let s = scope.pp(format!("dec{i}"));
                let c = cfg.channels(i);
                Ok(DecoderStage {
                    up: Conv2d::same3(&s.pp("up"), cfg.channels(i + 1), c)?,
                    tc: TransformerConv::new(&s.pp("tc"), c, heads)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stem: Conv2d::same3(&scope.pp("stem"), 3, cfg.base_channels)?,
            encoder,
            bottleneck,
            decoder,
            head: Conv2d::same3(&scope.pp("head"), cfg.base_channels, 3)?,
            depth: cfg.depth,
        })
    }

    /// `x`: `[B, 3, H, W]`, `text`: `[B, text_dim]` → unnormalized `[B, 3, H, W]`.
    pub fn forward(&self, x: &Tensor, text: &Tensor, train: bool) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let factor = 1usize << self.depth;
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::BadShape(format!(
                "{h}x{w} is not divisible by 2^{} for the encoder depth",
                self.depth
            )));
        }
        let mut f = self.stem.forward(x)?;
        let mut skips = Vec::with_capacity(self.depth);
        for stage in &self.encoder {
            let t = stage.tc.forward(&f, train)?;
            let fused = stage.fuse.forward(&t, text)?;
            f = stage.down.forward(&fused)?;
            skips.push(fused);
        }
        f = match &self.bottleneck {
            Bottleneck::Film(cfm) => cfm.forward(&f, text)?,
            Bottleneck::Plain(tc) => tc.forward(&f, train)?,
        };
        for (stage, skip) in self.decoder.iter().zip(skips.iter()).rev() {
            let up = stage.up.forward(&upsample_nearest2x(&f)?)?;
            f = stage.tc.forward(&(up + skip)?, train)?;
        }
        self.head.forward(&f)
    }

    pub fn cfm(&self) -> Option<&CrossAttentionFilm> {
        match &self.bottleneck {
            Bottleneck::Film(c) => Some(c),
            Bottleneck::Plain(_) => None,
        }
    }
}

/// Intermediate and final restorer outputs for one batch.
#[derive(Debug, Clone)]
pub struct RestoreOutput {
    pub semantic: Tensor,
    pub image: Tensor,
    pub enhanced: Tensor,
}

/// The dual-branch restorer.
#[derive(Debug, Clone)]
pub struct Restorer {
    semantic: Sged,
    image: Option<Sged>,
    config: RestorerConfig,
}

impl Restorer {
    pub fn new(scope: &Scope, cfg: &RestorerConfig, text_dim: usize, variant: RestorerVariant) -> Result<Self> {
        cfg.validate()?;
        let semantic = Sged::new(&scope.pp("semantic"), cfg, text_dim, variant)?;
        let image = if cfg.share_branch_weights {
            None
        } else {
            Some(Sged::new(&scope.pp("image"), cfg, text_dim, variant)?)
        };
        Ok(Self {
            semantic,
            image,
            config: cfg.clone(),
        })
    }

    pub fn config(&self) -> &RestorerConfig {
        &self.config
    }

    pub fn semantic_branch(&self) -> &Sged {
        &self.semantic
    }

    pub fn image_branch(&self) -> &Sged {
        self.image.as_ref().unwrap_or(&self.semantic)
    }

    /// `lit`: `[B, 3, H, W]`, `text`: `[B, D]`, `mask`: `[B, 1, H, W]`.
    pub fn forward(&self, lit: &Tensor, text: &Tensor, mask: &Tensor, train: bool) -> Result<RestoreOutput> {
        let (b, _, h, w) = lit.dims4()?;
        let (mb, mc, mh, mw) = mask.dims4()?;
        if (mc, mh, mw) != (1, h, w) || (mb != b && mb != 1) {
            return Err(Error::ShapeMismatch(format!(
                "mask {:?} for image {:?}",
                mask.dims(),
                lit.dims()
            )));
        }
        let masked = lit.broadcast_mul(mask)?;
        let semantic = self.semantic.forward(&masked, text, train)?;
        let image = self.image_branch().forward(lit, text, train)?;
        let enhanced = candle_nn::ops::sigmoid(&(&semantic + &image)?)?
            .clamp(OUTPUT_MARGIN, 1.0 - OUTPUT_MARGIN)?;
        Ok(RestoreOutput {
            semantic,
            image,
            enhanced,
        })
    }

    pub fn restore(&self, lit: &ImageTensor, text_feature: &Tensor, mask: &PixelMask) -> Result<ImageTensor> {
        if (mask.height(), mask.width()) != (lit.height(), lit.width()) {
            return Err(Error::ShapeMismatch(format!(
                "mask {}x{} for image {}x{}",
                mask.height(),
                mask.width(),
                lit.height(),
                lit.width()
            )));
        }
        let dtype = self.semantic.head.dtype();
        let x = lit.batch(dtype)?;
        let m = mask.to_tensor(dtype, x.device())?;
        let text = text_feature.to_dtype(dtype)?;
        let text = if text.rank() == 1 { text.unsqueeze(0)? } else { text };
        let out = self.forward(&x, &text, &m, false)?;
        ImageTensor::from_clamped(&out.enhanced.squeeze(0)?)
    }
}
