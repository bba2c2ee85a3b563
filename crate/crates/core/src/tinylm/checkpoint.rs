// SPDX-License-Identifier: MIT OR Apache-2.0

//! JSON checkpoint container.
//!
//! Tensors are stored row-major in the order of [`LmWeights::named`]:
//! embeddings, then every layer in order, then the final norm and the output
//! projection. The stored hash is [`LmParams::content_hash`] and is checked
//! on load.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{LmConfig, LmParams, LmWeights};
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const LM_FORMAT: &str = "ctxdetox-lm/1";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Container {
    format: String,
    config: LmConfig,
    hash: String,
    /// Free-form provenance (resolved run config, training summary).
    manifest: serde_json::Value,
    tensors: Vec<NamedTensor>,
}

/// A loaded checkpoint: frozen parameters plus their provenance record.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: LmParams,
    pub hash: String,
    pub manifest: serde_json::Value,
}

pub fn save_checkpoint(
    params: &LmParams,
    manifest: &serde_json::Value,
    path: &Path,
) -> Result<String> {
    let hash = params.content_hash();
    let tensors = params
        .weights
        .named()
        .into_iter()
        .map(|(name, t)| NamedTensor {
            name,
            rows: t.rows(),
            cols: t.cols(),
            data: t.as_slice().to_vec(),
        })
        .collect();
    let c = Container {
        format: LM_FORMAT.into(),
        config: params.config.clone(),
        hash: hash.clone(),
        manifest: manifest.clone(),
        tensors,
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = serde_json::to_vec(&c)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(hash)
}

/// Load and verify a checkpoint. The returned parameters are frozen.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let c: Container = serde_json::from_slice(&bytes)?;
    if c.format != LM_FORMAT {
        return Err(Error::HeaderMismatch(format!(
            "{} has format {:?}, expected {LM_FORMAT:?}",
            path.display(),
            c.format
        )));
    }
    let mut weights = LmWeights::zeros(&c.config);
    let expected: Vec<String> = weights.named().into_iter().map(|(n, _)| n).collect();
    if expected.len() != c.tensors.len() {
        return Err(Error::Shape(format!(
            "{} holds {} tensors, config implies {}",
            path.display(),
            c.tensors.len(),
            expected.len()
        )));
    }
    for ((slot, name), t) in weights
        .tensors_mut()
        .into_iter()
        .zip(&expected)
        .zip(c.tensors)
    {
        if &t.name != name {
            return Err(Error::Shape(format!(
                "tensor {} found where {name} was expected",
                t.name
            )));
        }
        let m = Mat::from_vec(t.rows, t.cols, t.data)?;
        m.check_shape(slot.rows(), slot.cols(), name)?;
        *slot = m;
    }
    let params = LmParams::new(c.config, weights)?.frozen();
    let computed = params.content_hash();
    if computed != c.hash {
        return Err(Error::HashMismatch {
            path: path.to_path_buf(),
            stored: c.hash,
            computed,
        });
    }
    Ok(Checkpoint {
        params,
        hash: computed,
        manifest: c.manifest,
    })
}
