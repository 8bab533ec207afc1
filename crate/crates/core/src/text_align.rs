//! Frozen text encoders and the cross-modal text aligner.
//!
//! Text embeddings come either from a precomputed embedding file (`TEMB`) or a
//! deterministic hashed-trigram encoder. The aligner runs a small Transformer
//! encoder over the two-token sequence `[image, text]` and returns both output
//! tokens; the text-position token guides restoration.

use std::collections::HashMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::fnv1a64;
use crate::image::ImageTensor;
use crate::nn::{Conv2d, EncoderLayer, Init, LayerNorm, Linear, Scope};

pub const TEMB_MAGIC: &[u8; 4] = b"TEMB";
pub const TEMB_VERSION: u32 = 1;
pub const DEFAULT_EMBED_DIM: usize = 512;

const TRIGRAM_BINS: usize = 2048;
const TOY_SEED: u64 = 0x7e47_e11c_0de5_eed5;

/// A finite embedding vector produced by a frozen encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding(Vec<f32>);

impl TextEmbedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::BadShape("text embedding must be non-empty and finite".into()));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::new(self.0.as_slice(), device)?.to_dtype(dtype)?)
    }
}

/// Hashed character-trigram histogram times a fixed seeded projection, L2-normalized.
#[derive(Debug, Clone)]
pub struct ToyTextEncoder {
    dim: usize,
    projection: Vec<f64>,
}

impl ToyTextEncoder {
    pub fn new(dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(TOY_SEED);
        let projection = (0..TRIGRAM_BINS * dim)
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect();
        Self { dim, projection }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn trigram_counts(text: &str) -> Vec<f64> {
        let padded: Vec<char> = format!(" {text} ").chars().collect();
        let mut counts = vec![0.0; TRIGRAM_BINS];
        let mut buf = [0u8; 12];
        for w in padded.windows(3) {
            let mut len = 0;
            for c in w {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            counts[(fnv1a64(&buf[..len]) % TRIGRAM_BINS as u64) as usize] += 1.0;
        }
        counts
    }

    pub fn encode(&self, text: &str) -> Result<TextEmbedding> {
        if text.is_empty() {
            return Err(Error::EmptyText);
        }
        let counts = Self::trigram_counts(text);
        let mut out = vec![0.0f64; self.dim];
        for (bin, &c) in counts.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let row = &self.projection[bin * self.dim..(bin + 1) * self.dim];
            for (o, w) in out.iter_mut().zip(row) {
                *o += c * w;
            }
        }
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroVector);
        }
        TextEmbedding::new(out.iter().map(|v| (v / norm) as f32).collect())
    }
}

/// In-memory view of a `TEMB` file: FNV-1a hash of the UTF-8 text → vector.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingTable {
    dim: usize,
    order: Vec<u64>,
    vectors: HashMap<u64, Vec<f32>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Inserts a vector for `text`; returns false if that text hash is already present.
    pub fn insert(&mut self, text: &str, vector: Vec<f32>) -> Result<bool> {
        if vector.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: vector.len(),
            });
        }
        let h = fnv1a64(text.as_bytes());
        if self.vectors.contains_key(&h) {
            return Ok(false);
        }
        self.order.push(h);
        self.vectors.insert(h, vector);
        Ok(true)
    }

    pub fn lookup(&self, text: &str) -> Option<&[f32]> {
        self.vectors.get(&fnv1a64(text.as_bytes())).map(Vec::as_slice)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TEMB_MAGIC {
            return Err(Error::DataError(format!("{path:?} is not a TEMB file")));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != TEMB_VERSION {
            return Err(Error::DataError(format!("unsupported TEMB version {version}")));
        }
        let count = r.read_u32::<LittleEndian>()? as usize;
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let mut table = Self::new(dim);
        for _ in 0..count {
            let h = r.read_u64::<LittleEndian>()?;
            let mut v = vec![0f32; dim];
            r.read_f32_into::<LittleEndian>(&mut v)?;
            if table.vectors.insert(h, v).is_none() {
                table.order.push(h);
            }
        }
        Ok(table)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(TEMB_MAGIC)?;
        w.write_u32::<LittleEndian>(TEMB_VERSION)?;
        w.write_u32::<LittleEndian>(self.order.len() as u32)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        for h in &self.order {
            w.write_u64::<LittleEndian>(*h)?;
            for v in &self.vectors[h] {
                w.write_f32::<LittleEndian>(*v)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Which frozen encoder supplies text embeddings.
#[derive(Debug, Clone)]
pub enum TextEncoderBackend {
    PretrainedExport(EmbeddingTable),
    ToyDeterministic(ToyTextEncoder),
}

impl TextEncoderBackend {
    pub fn toy(dim: usize) -> Self {
        Self::ToyDeterministic(ToyTextEncoder::new(dim))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Ok(Self::PretrainedExport(EmbeddingTable::read(path)?))
    }

    pub fn embed_dim(&self) -> usize {
        match self {
            Self::PretrainedExport(t) => t.dim(),
            Self::ToyDeterministic(t) => t.dim(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::PretrainedExport(_) => "pretrained-export",
            Self::ToyDeterministic(_) => "toy-deterministic",
        }
    }
}

pub fn encode_text(text: &str, backend: &TextEncoderBackend) -> Result<TextEmbedding> {
    if text.is_empty() {
        return Err(Error::EmptyText);
    }
    match backend {
        TextEncoderBackend::ToyDeterministic(enc) => enc.encode(text),
        TextEncoderBackend::PretrainedExport(table) => table
            .lookup(text)
            .map(|v| TextEmbedding::new(v.to_vec()))
            .unwrap_or_else(|| Err(Error::MissingEmbedding(text.to_string()))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextAlignConfig {
    pub embed_dim: usize,
    pub patch_size: usize,
    pub patch_width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

impl Default for TextAlignConfig {
    fn default() -> Self {
        Self {
            embed_dim: DEFAULT_EMBED_DIM,
            patch_size: 16,
            patch_width: 256,
            layers: 2,
            heads: 8,
            ffn_dim: 1024,
        }
    }
}

impl TextAlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "aligner embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.patch_size == 0 || self.patch_width == 0 || self.layers == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("aligner sizes must be positive".into()));
        }
        Ok(())
    }
}

/// The learnable projection block: patchify, project, mean-pool, map to `embed_dim`.
#[derive(Debug, Clone)]
pub struct ImageProjector {
    patch: Conv2d,
    proj: Linear,
    patch_size: usize,
}

impl ImageProjector {
    pub fn new(scope: &Scope, cfg: &TextAlignConfig) -> Result<Self> {
        Ok(Self {
            patch: Conv2d::new(&scope.pp("patch"), 3, cfg.patch_width, cfg.patch_size, cfg.patch_size, 0)?,
            proj: Linear::new(&scope.pp("proj"), cfg.patch_width, cfg.embed_dim)?,
            patch_size: cfg.patch_size,
        })
    }

    /// `[B, 3, H, W]` → `[B, embed_dim]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let p = self.patch_size;
        if h % p != 0 || w % p != 0 {
            return Err(Error::BadShape(format!(
                "{h}x{w} is not divisible by patch size {p}"
            )));
        }
        let patches = self.patch.forward(x)?; // [B, width, H/p, W/p]
        let pooled = patches.flatten_from(2)?.mean(2)?;
        self.proj.forward(&pooled)
    }

    pub fn project_image(&self, image: &ImageTensor) -> Result<Tensor> {
        let x = image.batch(self.patch.dtype())?;
        Ok(self.forward(&x)?.squeeze(0)?)
    }
}

/// Aligned image-side and text-side tokens.
#[derive(Debug, Clone)]
pub struct AlignedFeatures {
    pub image_feature: Tensor,
    pub text_feature: Tensor,
}

/// Transformer encoder over the `[image, text]` token pair.
#[derive(Debug, Clone)]
pub struct TextAligner {
    token_type: Tensor,
    layers: Vec<EncoderLayer>,
    norm: LayerNorm,
    dim: usize,
}

impl TextAligner {
    pub fn new(scope: &Scope, cfg: &TextAlignConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.layers)
            .map(|i| EncoderLayer::new(&scope.pp(format!("layer{i}")), cfg.embed_dim, cfg.heads, cfg.ffn_dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            token_type: scope.param((2, cfg.embed_dim), "token_type", Init::Uniform(0.02))?,
            layers,
            norm: LayerNorm::new(&scope.pp("norm"), cfg.embed_dim)?,
            dim: cfg.embed_dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `image`, `text`: `[B, dim]` → (`E′_img`, `F′_text`), each `[B, dim]`.
    pub fn forward(&self, image: &Tensor, text: &Tensor) -> Result<(Tensor, Tensor)> {
        for t in [image, text] {
            let d = t.dim(candle_core::D::Minus1)?;
            if d != self.dim {
                return Err(Error::DimMismatch {
                    expected: self.dim,
                    got: d,
                });
            }
        }
        let mut x = Tensor::stack(&[image, text], 1)?.broadcast_add(&self.token_type.unsqueeze(0)?)?;
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        let x = self.norm.forward(&x)?;
        Ok((x.narrow(1, 0, 1)?.squeeze(1)?, x.narrow(1, 1, 1)?.squeeze(1)?))
    }

    /// Single-sample form over plain vectors.
    pub fn align(&self, image_emb: &Tensor, text_emb: &TextEmbedding) -> Result<AlignedFeatures> {
        let img_dim = image_emb.dims1()?;
        if img_dim != text_emb.dim() {
            return Err(Error::DimMismatch {
                expected: img_dim,
                got: text_emb.dim(),
            });
        }
        let dtype = self.token_type.dtype();
        let text = text_emb.to_tensor(dtype, image_emb.device())?.unsqueeze(0)?;
        let (img, txt) = self.forward(&image_emb.to_dtype(dtype)?.unsqueeze(0)?, &text)?;
        Ok(AlignedFeatures {
            image_feature: img.squeeze(0)?,
            text_feature: txt.squeeze(0)?,
        })
    }
}
