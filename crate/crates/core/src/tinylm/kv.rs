// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Keys and values for one layer, `len x hidden` each.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerKv {
    pub keys: Mat,
    pub values: Mat,
}

/// Per-layer key/value slots prepended to every attention context.
///
/// The same structure doubles as the decoding cache: after a forward pass the
/// model returns the full key/value history, which can be fed back as the
/// prefix of the next step.
///
/// Flat layout (one row per slot, `D = 2 * L * E` columns): layer-major,
/// keys before values, so column `l * 2E + e` is layer `l` key coordinate `e`
/// and column `l * 2E + E + e` is layer `l` value coordinate `e`.
#[derive(Clone, Debug, PartialEq)]
pub struct KvPrefix {
    hidden: usize,
    layers: Vec<LayerKv>,
}

impl KvPrefix {
    pub fn empty(n_layers: usize, hidden: usize) -> Self {
        Self::zeros(n_layers, hidden, 0)
    }

    pub fn zeros(n_layers: usize, hidden: usize, len: usize) -> Self {
        let layers = (0..n_layers)
            .map(|_| LayerKv {
                keys: Mat::zeros(len, hidden),
                values: Mat::zeros(len, hidden),
            })
            .collect();
        Self { hidden, layers }
    }

    pub fn from_layers(layers: Vec<LayerKv>) -> Result<Self> {
        let hidden = layers.first().map_or(0, |l| l.keys.cols());
        let len = layers.first().map_or(0, |l| l.keys.rows());
        for l in &layers {
            l.keys.check_shape(len, hidden, "prefix keys")?;
            l.values.check_shape(len, hidden, "prefix values")?;
        }
        Ok(Self { hidden, layers })
    }

    /// Structured view of a flat `len x 2LE` prefix.
    pub fn from_flat(flat: &Mat, n_layers: usize, hidden: usize) -> Result<Self> {
        let d = 2 * n_layers * hidden;
        if flat.cols() != d {
            return Err(Error::Shape(format!(
                "flat prefix has {} columns, expected D = 2*{n_layers}*{hidden} = {d}",
                flat.cols()
            )));
        }
        let len = flat.rows();
        let mut out = Self::zeros(n_layers, hidden, len);
        for m in 0..len {
            let row = flat.row(m);
            for (l, kv) in out.layers.iter_mut().enumerate() {
                let base = l * 2 * hidden;
                kv.keys
                    .row_mut(m)
                    .copy_from_slice(&row[base..base + hidden]);
                kv.values
                    .row_mut(m)
                    .copy_from_slice(&row[base + hidden..base + 2 * hidden]);
            }
        }
        Ok(out)
    }

    /// Inverse of [`KvPrefix::from_flat`].
    pub fn to_flat(&self) -> Mat {
        let len = self.len();
        let e = self.hidden;
        let mut flat = Mat::zeros(len, 2 * self.layers.len() * e);
        for m in 0..len {
            let row = flat.row_mut(m);
            for (l, kv) in self.layers.iter().enumerate() {
                let base = l * 2 * e;
                row[base..base + e].copy_from_slice(kv.keys.row(m));
                row[base + e..base + 2 * e].copy_from_slice(kv.values.row(m));
            }
        }
        flat
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.keys.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn layers(&self) -> &[LayerKv] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerKv] {
        &mut self.layers
    }

    /// Slots of `self` followed by slots of `other`.
    pub fn concat(&self, other: &KvPrefix) -> Result<KvPrefix> {
        if self.layers.len() != other.layers.len() || self.hidden != other.hidden {
            return Err(Error::Shape(
                "cannot concatenate prefixes of different models".into(),
            ));
        }
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| {
                Ok(LayerKv {
                    keys: a.keys.vstack(&b.keys)?,
                    values: a.values.vstack(&b.values)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(KvPrefix {
            hidden: self.hidden,
            layers,
        })
    }
}
