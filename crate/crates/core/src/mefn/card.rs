use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelState, NetId};
use crate::diffcore::checkpoint::Checkpoint;
use crate::diffcore::{AdamConfig, DenseNet};
use crate::error::{Error, Result};

/// Human-readable description stored next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub config: ModelConfig,
    pub text_dim: usize,
    pub visual_dim: usize,
    pub domains: usize,
    /// Layer widths of each network, keyed by network name.
    pub topology: Vec<(String, Vec<usize>)>,
    pub seed: u64,
    /// SHA-256 of the serialised run configuration that produced the model.
    pub config_hash: String,
}

impl ModelCard {
    pub fn describe(state: &ModelState, seed: u64, run_config: &serde_json::Value) -> Self {
        ModelCard {
            config: state.config().clone(),
            text_dim: state.text_dim(),
            visual_dim: state.visual_dim(),
            domains: state.domains(),
            topology: NetId::ALL.iter().map(|&id| (id.name().to_string(), state.net(id).widths())).collect(),
            seed,
            config_hash: config_hash(run_config),
        }
    }
}

/// Hex SHA-256 of a JSON value's compact serialisation.
pub fn config_hash(value: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

/// Writes the checkpoint to `path` and the card to `path` with a `.json`
/// extension.
pub fn save_model(state: &ModelState, card: &ModelCard, path: &Path) -> Result<()> {
    let meta = serde_json::to_value(card).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut ckpt = Checkpoint::new(meta);
    for id in NetId::ALL {
        ckpt.push(id.name(), state.net(id).clone());
    }
    ckpt.save(path)?;
    let card_path = path.with_extension("json");
    let text = serde_json::to_string_pretty(card).map_err(|e| Error::json(&card_path, e))?;
    std::fs::write(&card_path, text).map_err(|e| Error::io(&card_path, e))
}

/// Reads a checkpoint written by [`save_model`]. Optimiser moments are not
/// stored; the returned model starts with fresh ones.
pub fn load_model(path: &Path, adam: AdamConfig) -> Result<(ModelState, ModelCard)> {
    let ckpt = Checkpoint::load(path)?;
    let card: ModelCard =
        serde_json::from_value(ckpt.metadata.clone()).map_err(|e| Error::Checkpoint(format!("model card: {e}")))?;
    let take = |id: NetId| -> Result<DenseNet> {
        ckpt.get(id.name())
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("missing network {}", id.name())))
    };
    let nets = [
        take(NetId::TextEncoder)?,
        take(NetId::VisualEncoder)?,
        take(NetId::TextAlign)?,
        take(NetId::VisualAlign)?,
        take(NetId::TextDiscriminator)?,
        take(NetId::VisualDiscriminator)?,
        take(NetId::TextClassifier)?,
        take(NetId::VisualClassifier)?,
        take(NetId::CrossClassifier)?,
    ];
    let state = ModelState::from_nets(card.config.clone(), nets, adam)?;
    Ok((state, card))
}
