//! JSON checkpoints: format id, resolved config, vocabulary and every named
//! parameter tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::MalmConfig;
use crate::data::Vocab;
use crate::error::{MalmError, Result};
use crate::model::Malm;
use crate::nn::ParamStore;

pub const FORMAT: &str = "malm-checkpoint/1";

#[derive(Serialize, Deserialize)]
struct Stored {
    format: String,
    config: MalmConfig,
    vocab: Vocab,
    params: ParamStore,
}

pub fn to_string(model: &Malm) -> Result<String> {
    Ok(serde_json::to_string(&Stored {
        format: FORMAT.into(),
        config: model.cfg.clone(),
        vocab: model.vocab.clone(),
        params: model.params.clone(),
    })?)
}

/// Parses a checkpoint and checks that its parameters match the layout the
/// stored config implies.
pub fn from_str(text: &str) -> Result<Malm> {
    let stored: Stored = serde_json::from_str(text)?;
    if stored.format != FORMAT {
        return Err(MalmError::Checkpoint(format!(
            "unsupported format `{}` (expected `{FORMAT}`)",
            stored.format
        )));
    }
    let vocab = stored.vocab.reindexed();
    let expected = Malm::new(stored.config.clone(), vocab.clone())?;
    for (name, t) in expected.params.iter() {
        match stored.params.get(name) {
            None => return Err(MalmError::Checkpoint(format!("missing parameter `{name}`"))),
            Some(s) if s.shape() != t.shape() => {
                return Err(MalmError::Checkpoint(format!(
                    "`{name}` has shape {:?}, config implies {:?}",
                    s.shape(),
                    t.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = stored
        .params
        .names()
        .find(|n| expected.params.get(n).is_none())
    {
        return Err(MalmError::Checkpoint(format!(
            "unexpected parameter `{extra}`"
        )));
    }
    if !stored.params.all_finite() {
        return Err(MalmError::Checkpoint("non-finite parameter values".into()));
    }
    Ok(Malm {
        cfg: stored.config,
        params: stored.params,
        vocab,
    })
}

pub fn save(model: &Malm, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, to_string(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Malm> {
    from_str(&fs::read_to_string(path)?)
}
