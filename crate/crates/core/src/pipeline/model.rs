use candle_core::{DType, Device, Tensor};

use crate::data::prompt_or_default;
use crate::error::{Error, Result};
use crate::illumination::IlluminationEstimator;
use crate::image::ImageTensor;
use crate::losses::{FrozenImageEncoder, LossBackends, PerceptualBackend};
use crate::nn::{Init, ParamStore};
use crate::restorer::{make_mask, Restorer, RestorerVariant};
use crate::text_align::{encode_text, ImageProjector, TextAligner, TextEmbedding, TextEncoderBackend};

use super::config::{Ablation, PerceptualSpec, TextBackendSpec, TrainConfig};

/// Mask seed used at inference unless overridden.
pub const INFERENCE_MASK_SEED: u64 = 0;

enum TextPath {
    Aligned {
        projector: ImageProjector,
        aligner: TextAligner,
    },
    Raw,
    Constant(Tensor),
}

/// Outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub lit: Tensor,
    pub text_feature: Tensor,
    pub enhanced: Tensor,
}

/// The assembled network for one configuration, including ablation variants.
pub struct PsgNet {
    config: TrainConfig,
    store: ParamStore,
    illumination: Option<IlluminationEstimator>,
    text: TextPath,
    restorer: Option<Restorer>,
    text_backend: TextEncoderBackend,
}

/// Resolves the configured text backend.
pub fn text_backend(spec: &TextBackendSpec, dim: usize) -> Result<TextEncoderBackend> {
    let backend = match spec {
        TextBackendSpec::Toy => TextEncoderBackend::toy(dim),
        TextBackendSpec::Export { path } => TextEncoderBackend::from_file(path)?,
    };
    if backend.embed_dim() != dim {
        return Err(Error::DimMismatch {
            expected: dim,
            got: backend.embed_dim(),
        });
    }
    Ok(backend)
}

/// Frozen networks behind the perceptual and semantic-similarity losses.
pub fn loss_backends(config: &TrainConfig, dtype: DType, device: &Device) -> Result<LossBackends> {
    let perceptual = match &config.model.perceptual {
        PerceptualSpec::Toy => PerceptualBackend::toy(dtype, device)?,
        PerceptualSpec::Export { path, layers } => PerceptualBackend::pretrained(path, layers.clone(), dtype, device)?,
    };
    Ok(LossBackends {
        perceptual,
        itss_encoder: FrozenImageEncoder::toy(config.model.aligner.embed_dim, config.model.itss_patch, dtype, device)?,
    })
}

impl PsgNet {
    /// Builds the variant described by `config.ablation` with parameters
    /// seeded from `config.seed`.
    pub fn build_variant(config: &TrainConfig) -> Result<Self> {
        Self::build_in(config, ParamStore::new(config.seed, DType::F32, &Device::Cpu))
    }

    /// Builds into a caller-provided store (e.g. double precision for gradient checks).
    pub fn build_in(config: &TrainConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let flags = &config.ablation;
        let model = &config.model;
        let root = store.root();
        let illumination = if flags.has(Ablation::NoIe) {
            None
        } else {
            Some(IlluminationEstimator::new(&root.pp("illumination"), &model.illumination)?)
        };
        let dim = model.aligner.embed_dim;
        let text = if flags.has(Ablation::NoText) {
            TextPath::Constant(root.param(dim, "text_constant", Init::Uniform(0.1))?)
        } else if flags.has(Ablation::NoTa) {
            TextPath::Raw
        } else {
            TextPath::Aligned {
                projector: ImageProjector::new(&root.pp("projector"), &model.aligner)?,
                aligner: TextAligner::new(&root.pp("aligner"), &model.aligner)?,
            }
        };
        let restorer = if flags.has(Ablation::NoIr) {
            None
        } else {
            let variant = RestorerVariant {
                no_cfm: flags.has(Ablation::NoCfm),
                mha_swap: flags.has(Ablation::MhaSwap),
            };
            Some(Restorer::new(&root.pp("restorer"), &model.restorer, dim, variant)?)
        };
        Ok(Self {
            config: config.clone(),
            text_backend: text_backend(&model.text_backend, dim)?,
            store,
            illumination,
            text,
            restorer,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn illumination(&self) -> Option<&IlluminationEstimator> {
        self.illumination.as_ref()
    }

    pub fn restorer(&self) -> Option<&Restorer> {
        self.restorer.as_ref()
    }

    pub fn text_backend(&self) -> &TextEncoderBackend {
        &self.text_backend
    }

    pub fn encode_text(&self, text: Option<&str>) -> Result<TextEmbedding> {
        encode_text(&prompt_or_default(text), &self.text_backend)
    }

    /// Lit-up batch; the identity when illumination estimation is ablated.
    pub fn light(&self, raw: &Tensor) -> Result<Tensor> {
        match &self.illumination {
            Some(ie) => Ok(ie.forward_batch(raw)?.0),
            None => Ok(raw.clone()),
        }
    }

    /// Text feature handed to the restorer, `[B, D]`.
    pub fn text_feature(&self, raw: &Tensor, text: &Tensor) -> Result<Tensor> {
        let b = raw.dim(0)?;
        match &self.text {
            TextPath::Aligned { projector, aligner } => {
                let image = projector.forward(raw)?;
                Ok(aligner.forward(&image, text)?.1)
            }
            TextPath::Raw => Ok(text.clone()),
            TextPath::Constant(c) => Ok(c.unsqueeze(0)?.repeat((b, 1))?),
        }
    }

    /// `raw`: `[B, 3, H, W]`, `text`: `[B, D]` frozen embeddings, `mask`: `[B|1, 1, H, W]`.
    pub fn forward(&self, raw: &Tensor, text: &Tensor, mask: &Tensor, train: bool) -> Result<Forward> {
        let raw = raw.to_dtype(self.dtype())?;
        let text = text.to_dtype(self.dtype())?;
        let lit = self.light(&raw)?;
        let text_feature = self.text_feature(&raw, &text)?;
        let enhanced = match &self.restorer {
            Some(r) => r.forward(&lit, &text_feature, &mask.to_dtype(self.dtype())?, train)?.enhanced,
            None => lit.clone(),
        };
        Ok(Forward {
            lit,
            text_feature,
            enhanced,
        })
    }

    /// Enhances one image with the inference mask drawn from `mask_seed`.
    pub fn enhance_image(&self, raw: &ImageTensor, text: Option<&str>, mask_seed: u64) -> Result<ImageTensor> {
        let emb = self.encode_text(text)?;
        self.enhance_with_embedding(raw, &emb, mask_seed)
    }

    pub fn enhance_with_embedding(&self, raw: &ImageTensor, text: &TextEmbedding, mask_seed: u64) -> Result<ImageTensor> {
        let device = self.store.device().clone();
        let x = raw.batch(self.dtype())?.to_device(&device)?;
        let t = text.to_tensor(self.dtype(), &device)?.unsqueeze(0)?;
        let mask = make_mask(raw.height(), raw.width(), self.config.mask_ratio, mask_seed)?.to_tensor(self.dtype(), &device)?;
        let out = self.forward(&x, &t, &mask, false)?;
        ImageTensor::from_clamped(&out.enhanced.squeeze(0)?)
    }
}
