use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::illumination::IlluminationEstimatorConfig;
use crate::losses::LossWeights;
use crate::restorer::RestorerConfig;
use crate::text_align::TextAlignConfig;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "PSG_SEED";

/// One architectural ablation switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Ablation {
    /// Skip illumination estimation: the restorer sees the raw image.
    NoIe,
    /// Skip the restorer: the output is the lit-up image.
    NoIr,
    /// Feed the raw text embedding to the restorer without the aligner.
    NoTa,
    /// Plain Transformer–Conv bottleneck instead of the FiLM module.
    NoCfm,
    /// A learned constant vector replaces the text feature.
    NoText,
    /// Fuse blocks self-attend over image tokens instead of attending to text.
    MhaSwap,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::NoIe,
        Ablation::NoIr,
        Ablation::NoTa,
        Ablation::NoCfm,
        Ablation::NoText,
        Ablation::MhaSwap,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::NoIe => "no_ie",
            Ablation::NoIr => "no_ir",
            Ablation::NoTa => "no_ta",
            Ablation::NoCfm => "no_cfm",
            Ablation::NoText => "no_text",
            Ablation::MhaSwap => "mha_swap",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown ablation flag {s:?}")))
    }
}

/// A set of ablation switches.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct AblationFlags(BTreeSet<Ablation>);

impl AblationFlags {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn from_flags(flags: &[Ablation]) -> Self {
        Self(flags.iter().copied().collect())
    }

    /// Parses a comma-separated list such as `no_ie,no_cfm`.
    pub fn parse_list(list: &str) -> Result<Self> {
        let flags = list
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(Ablation::from_str)
            .collect::<Result<BTreeSet<_>>>()?;
        Ok(Self(flags))
    }

    pub fn has(&self, flag: Ablation) -> bool {
        self.0.contains(&flag)
    }

    pub fn iter(&self) -> impl Iterator<Item = Ablation> + '_ {
        self.0.iter().copied()
    }

    pub fn validate(&self) -> Result<()> {
        if self.has(Ablation::NoIr) {
            for dependent in [Ablation::NoCfm, Ablation::MhaSwap] {
                if self.has(dependent) {
                    return Err(Error::InconsistentFlags(format!(
                        "{dependent} modifies the restorer, which no_ir removes"
                    )));
                }
            }
        }
        Ok(())
    }
}

impl TryFrom<Vec<String>> for AblationFlags {
    type Error = Error;

    fn try_from(v: Vec<String>) -> Result<Self> {
        Ok(Self(v.iter().map(|s| Ablation::from_str(s)).collect::<Result<_>>()?))
    }
}

impl From<AblationFlags> for Vec<String> {
    fn from(f: AblationFlags) -> Self {
        f.0.iter().map(|a| a.as_str().to_string()).collect()
    }
}

/// Where text embeddings come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TextBackendSpec {
    /// The deterministic trigram-hash encoder.
    Toy,
    /// A precomputed embedding table file.
    Export { path: PathBuf },
}

/// Frozen perceptual network used by the loss and the evaluation metric.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PerceptualSpec {
    Toy,
    Export { path: PathBuf, layers: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub illumination: IlluminationEstimatorConfig,
    pub aligner: TextAlignConfig,
    pub restorer: RestorerConfig,
    pub text_backend: TextBackendSpec,
    pub perceptual: PerceptualSpec,
    /// Patch size of the frozen image encoder behind the semantic-similarity loss.
    pub itss_patch: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            illumination: IlluminationEstimatorConfig::default(),
            aligner: TextAlignConfig::default(),
            restorer: RestorerConfig::default(),
            text_backend: TextBackendSpec::Toy,
            perceptual: PerceptualSpec::Toy,
            itss_patch: 16,
        }
    }
}

/// Everything needed to train, and later rebuild, a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub image_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub mask_ratio: f64,
    /// Validate and checkpoint every this many epochs (the last epoch always is).
    pub eval_every: usize,
    pub weights: LossWeights,
    pub ablation: AblationFlags,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 4,
            epochs: 100,
            image_size: 256,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-2,
            adam_eps: 1e-8,
            mask_ratio: 0.5,
            eval_every: 1,
            weights: LossWeights::default(),
            ablation: AblationFlags::none(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size, epochs and eval_every must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("AdamW betas must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::BadRatio(self.mask_ratio));
        }
        self.weights.validate()?;
        self.ablation.validate()?;
        self.model.illumination.validate()?;
        self.model.aligner.validate()?;
        self.model.restorer.validate()?;
        let factor = 1usize << self.model.restorer.depth;
        for (what, m) in [
            ("restorer depth", factor),
            ("aligner patch", self.model.aligner.patch_size),
            ("loss encoder patch", self.model.itss_patch),
        ] {
            if m == 0 || self.image_size % m != 0 {
                return Err(Error::Config(format!(
                    "image_size {} must be a multiple of {m} ({what})",
                    self.image_size
                )));
            }
        }
        if self.image_size < crate::losses::SSIM_WINDOW {
            return Err(Error::Config(format!("image_size {} is too small", self.image_size)));
        }
        Ok(())
    }

    /// Parses TOML text; unknown keys are errors.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies seed precedence: command line, then `PSG_SEED`, then the file.
    pub fn resolve_seed(&mut self, cli: Option<u64>, env: Option<&str>) -> Result<()> {
        if let Some(s) = cli {
            self.seed = s;
        } else if let Some(v) = env {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }
}
