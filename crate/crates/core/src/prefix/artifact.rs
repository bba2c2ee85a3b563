// SPDX-License-Identifier: MIT OR Apache-2.0

//! Control-artifact container shared by every trained controller.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Mat;
use crate::tinylm::LmParams;

pub const CONTROL_FORMAT: &str = "ctxdetox-control/1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactHeader {
    /// Prefix length M.
    pub m: usize,
    pub n_layers: usize,
    pub hidden: usize,
    /// Reparameterization width used during training.
    pub p: usize,
}

/// Named tensors for generation-time use, optional training state kept only
/// for warm starts, and provenance. `hash` covers everything except the
/// manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlArtifact {
    pub format: String,
    pub method: String,
    pub header: ArtifactHeader,
    pub backbone_hash: String,
    pub tensors: BTreeMap<String, Mat>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub training_state: BTreeMap<String, Mat>,
    pub manifest: serde_json::Value,
    #[serde(default)]
    pub hash: String,
}

impl ControlArtifact {
    pub fn new(method: &str, header: ArtifactHeader, backbone_hash: &str) -> Self {
        Self {
            format: CONTROL_FORMAT.into(),
            method: method.into(),
            header,
            backbone_hash: backbone_hash.into(),
            tensors: BTreeMap::new(),
            training_state: BTreeMap::new(),
            manifest: serde_json::Value::Null,
            hash: String::new(),
        }
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        let body = (
            &self.format,
            &self.method,
            &self.header,
            &self.backbone_hash,
            &self.tensors,
            &self.training_state,
        );
        h.update(serde_json::to_vec(&body).expect("artifact serializes"));
        hex::encode(h.finalize())
    }

    pub fn tensor(&self, name: &str) -> Result<&Mat> {
        self.tensors.get(name).ok_or_else(|| {
            Error::Mismatch(format!("{} artifact has no tensor {name:?}", self.method))
        })
    }

    pub fn state(&self, name: &str) -> Result<&Mat> {
        self.training_state.get(name).ok_or_else(|| {
            Error::Mismatch(format!(
                "{} artifact has no training state {name:?}",
                self.method
            ))
        })
    }

    /// Number of scalars in the generation-time tensors.
    pub fn persisted_len(&self) -> usize {
        self.tensors.values().map(Mat::len).sum()
    }

    /// Refuse artifacts trained against a different backbone.
    pub fn check_backbone(&self, lm: &LmParams, lm_hash: &str) -> Result<()> {
        if self.header.n_layers != lm.config.n_layers || self.header.hidden != lm.config.hidden {
            return Err(Error::HeaderMismatch(format!(
                "{} artifact expects L={} E={}, backbone has L={} E={}",
                self.method,
                self.header.n_layers,
                self.header.hidden,
                lm.config.n_layers,
                lm.config.hidden
            )));
        }
        if self.backbone_hash != lm_hash {
            return Err(Error::HeaderMismatch(format!(
                "{} artifact was trained on backbone {}, loaded backbone is {}",
                self.method, self.backbone_hash, lm_hash
            )));
        }
        Ok(())
    }
}

pub fn save_artifact(artifact: &ControlArtifact, path: &Path) -> Result<String> {
    let mut a = artifact.clone();
    a.hash = a.content_hash();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_vec(&a)?).map_err(|e| Error::io(path, e))?;
    Ok(a.hash)
}

/// Load an artifact and verify its content hash.
pub fn load_artifact(path: &Path) -> Result<ControlArtifact> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let a: ControlArtifact = serde_json::from_slice(&bytes)?;
    if a.format != CONTROL_FORMAT {
        return Err(Error::HeaderMismatch(format!(
            "unknown control format {:?}",
            a.format
        )));
    }
    let computed = a.content_hash();
    if computed != a.hash {
        return Err(Error::HashMismatch {
            path: path.to_path_buf(),
            stored: a.hash,
            computed,
        });
    }
    let d = 2 * a.header.n_layers * a.header.hidden;
    for (name, t) in &a.tensors {
        let is_prefix = t.cols() == d && !name.starts_with("readout.");
        if is_prefix && t.rows() % a.header.m != 0 {
            return Err(Error::HeaderMismatch(format!(
                "tensor {name} does not match M={}",
                a.header.m
            )));
        }
    }
    Ok(a)
}
