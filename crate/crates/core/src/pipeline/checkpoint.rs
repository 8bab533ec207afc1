use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};

use super::config::TrainConfig;
use super::model::PsgNet;

pub const CHECKPOINT_KIND: &str = "psg-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training progress stored alongside the weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub step: usize,
    pub val_psnr_db: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    version: u32,
    config: TrainConfig,
    meta: CheckpointMeta,
}

/// Writes every parameter and buffer of `model` with its configuration.
pub fn save_checkpoint(model: &PsgNet, meta: CheckpointMeta, path: &Path) -> Result<()> {
    let header = Header {
        kind: CHECKPOINT_KIND.into(),
        version: CHECKPOINT_VERSION,
        config: model.config().clone(),
        meta,
    };
    let mut archive = Archive::new(serde_json::to_value(&header)?);
    for (name, var) in model.store().named_all() {
        archive.push(name, var.as_tensor().clone());
    }
    archive.write(path)
}

/// Rebuilds the model from its stored configuration, then loads the weights.
///
/// The configuration is validated before any weight is touched, and the stored
/// parameter names must match the rebuilt model exactly.
pub fn load_checkpoint(path: &Path) -> Result<(PsgNet, CheckpointMeta)> {
    let archive = Archive::read(path)?;
    let kind = archive.header.get("kind").and_then(|k| k.as_str());
    if kind != Some(CHECKPOINT_KIND) {
        return Err(Error::CheckpointError(format!("{path:?} is not a model checkpoint")));
    }
    let header: Header = serde_json::from_value(archive.header.clone())
        .map_err(|e| Error::CheckpointError(format!("bad checkpoint header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointError(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    header
        .config
        .validate()
        .map_err(|e| Error::CheckpointError(format!("stored configuration is invalid: {e}")))?;
    let model = PsgNet::build_variant(&header.config)?;
    let expected: BTreeSet<String> = model.store().named_all().into_iter().map(|(n, _)| n).collect();
    let stored: BTreeSet<String> = archive.tensors.iter().map(|(n, _)| n.clone()).collect();
    if expected != stored {
        let missing: Vec<_> = expected.difference(&stored).take(3).collect();
        let extra: Vec<_> = stored.difference(&expected).take(3).collect();
        return Err(Error::CheckpointError(format!(
            "parameter names differ from the configured model (missing {missing:?}, unexpected {extra:?})"
        )));
    }
    for (name, tensor) in &archive.tensors {
        model.store().assign(name, tensor)?;
    }
    Ok((model, header.meta))
}
