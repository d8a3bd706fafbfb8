//! JSON checkpoints. Floats round-trip exactly, so a reloaded model is
//! bitwise identical to the one that was saved.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{reference_network, StudentSpec};
use crate::nn::{Network, StateDict};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub spec: StudentSpec,
    pub stage: usize,
    pub num_stages: usize,
    pub state: StateDict,
}

impl ModelCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Loads the weights into a freshly built network for `spec`. Fails on
    /// any missing, unexpected or mis-shaped entry.
    pub fn into_network(&self, spec: &StudentSpec) -> Result<Network> {
        let mut net = reference_network(spec, 0)?;
        net.load_state_dict(&self.state)?;
        Ok(net)
    }
}

/// Writes through a temporary sibling and renames, so readers never see a
/// half-written file.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let bytes = serde_json::to_vec(value).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })
}
