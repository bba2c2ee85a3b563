// SPDX-License-Identifier: MIT OR Apache-2.0

//! Trainable prefixes, the meta-prefix stance generator and the control
//! artifact container.

mod artifact;
mod meta;
mod reparam;

pub use artifact::{load_artifact, save_artifact, ArtifactHeader, ControlArtifact, CONTROL_FORMAT};
pub use meta::{
    generate_stance_prefix, MetaGrads, MetaInference, MetaPrefixModel, StanceGeneration,
};
pub use reparam::{PrefixBank, ReparamGrads, ReparamPrefix};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;
use crate::tinylm::{KvPrefix, LmConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrefixConfig {
    /// Prefix length M.
    pub len: usize,
    /// Reparameterization width P.
    pub hidden: usize,
    /// Standard deviation of the initial materialized entries.
    pub init_std: f64,
}

impl Default for PrefixConfig {
    fn default() -> Self {
        Self {
            len: 5,
            hidden: 64,
            init_std: 0.1,
        }
    }
}

impl PrefixConfig {
    pub fn validate(&self) -> Result<()> {
        if self.len == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "prefix len and hidden must be positive".into(),
            ));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config(
                "prefix init_std must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Structured key/value view of a flat `M x 2LE` prefix.
pub fn to_kv(flat: &Mat, config: &LmConfig) -> Result<KvPrefix> {
    KvPrefix::from_flat(flat, config.n_layers, config.hidden)
}

/// Element-wise sum of two flat prefixes.
pub fn combine(generated: &Mat, toxicity: &Mat) -> Result<Mat> {
    generated.add(toxicity)
}

/// Values that must be saved for generation: the index-0 meta and toxicity
/// prefixes in materialized form plus the readout machinery. Without the
/// meta part only the toxicity prefix remains.
pub fn persisted_parameter_count(
    m: usize,
    d: usize,
    _p: usize,
    e: usize,
    include_meta: bool,
) -> usize {
    if include_meta {
        m * d + m * d + m * e + e * d
    } else {
        m * d
    }
}

/// Values updated during hierarchical training: both reparameterized
/// entries of both banks plus the readout machinery.
pub fn training_parameter_count(m: usize, d: usize, p: usize, e: usize) -> usize {
    4 * (m * p + p * d) + m * e + e * d
}
