use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{GlobalModel, ModelSpec};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    offset: usize,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    spec: ModelSpec,
    num_params: usize,
    param_index: BTreeMap<String, ParamEntry>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes θ as little-endian f64 to `path` and the parameter index to
/// `path` with a `.json` extension.
pub fn save_checkpoint(model: &GlobalModel, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(model.theta.len() * 8);
    for v in &model.theta {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    let sidecar = Sidecar {
        spec: model.spec.clone(),
        num_params: model.theta.len(),
        param_index: model
            .topology
            .param_index_map()
            .into_iter()
            .map(|(k, (offset, shape))| (k, ParamEntry { offset, shape }))
            .collect(),
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<GlobalModel> {
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    let bytes = fs::read(path)?;
    let expected = sidecar.num_params * 8;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "checkpoint {} has {} bytes, expected {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let topology = sidecar.spec.topology()?;
    for (name, entry) in &sidecar.param_index {
        let idx = topology
            .param_index(name)
            .ok_or_else(|| Error::Data(format!("checkpoint names unknown parameter {name}")))?;
        let p = &topology.params[idx];
        if p.offset != entry.offset || p.shape != entry.shape {
            return Err(Error::Data(format!("checkpoint layout of {name} does not match the model")));
        }
    }
    if sidecar.param_index.len() != topology.params.len() || topology.num_params() != sidecar.num_params {
        return Err(Error::Data("checkpoint parameter index does not cover the model".into()));
    }
    let theta = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(GlobalModel {
        spec: sidecar.spec,
        topology,
        theta,
    })
}
