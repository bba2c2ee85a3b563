// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hierarchical prefix training: the language-modeling loss, the stance and
//! context margin losses, and the optimization loop over a frozen backbone.

mod hier;
mod sampler;

pub use hier::{
    batch_loss, context_contrastive_loss, lm_loss, margin_report, stance_contrastive_loss,
    total_loss, train_hierarchical, train_toxicity_bank, trainable_mut, write_loss_trace,
    BatchGrads, HierarchicalRun, LossBreakdown, LossRow, MarginReport, TrainExample,
};
pub use sampler::StratifiedSampler;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::AdamWConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w1: 0.5,
            w2: 0.3,
            w3: 0.4,
            margin: 0.8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.w1, self.w2, self.w3]
            .iter()
            .all(|w| *w >= 0.0 && w.is_finite());
        if !ok || !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(
                "loss weights must be nonnegative and the margin positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    #[default]
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "no_Ls")]
    NoLs,
    #[serde(rename = "no_Lc")]
    NoLc,
    #[serde(rename = "no_both")]
    NoBoth,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoLs,
        Ablation::NoLc,
        Ablation::NoBoth,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoLs => "no_Ls",
            Ablation::NoLc => "no_Lc",
            Ablation::NoBoth => "no_both",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Ablation::Full),
            "no_ls" => Ok(Ablation::NoLs),
            "no_lc" => Ok(Ablation::NoLc),
            "no_both" => Ok(Ablation::NoBoth),
            other => Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
    }

    /// The weights actually applied: ablated terms get weight zero.
    pub fn effective(self, w: &LossWeights) -> LossWeights {
        let mut out = w.clone();
        if matches!(self, Ablation::NoLs | Ablation::NoBoth) {
            out.w2 = 0.0;
        }
        if matches!(self, Ablation::NoLc | Ablation::NoBoth) {
            out.w3 = 0.0;
        }
        out
    }
}

/// Denominator of the stance loss across a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LsReduction {
    /// Mean over every batch example, zeros included.
    #[default]
    BatchMean,
    /// Mean over offensive-context examples only.
    OffensiveMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr_meta: f64,
    pub lr_toxicity: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub ls_reduction: LsReduction,
    /// Standard deviation of the generated prefix entries at initialization.
    pub readout_std: f64,
    pub adam: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 16,
            lr_meta: 2e-3,
            lr_toxicity: 1e-3,
            seed: 42,
            ablation: Ablation::Full,
            ls_reduction: LsReduction::BatchMean,
            readout_std: 0.01,
            adam: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.lr_meta > 0.0 && self.lr_toxicity > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.lr_toxicity > self.lr_meta {
            return Err(Error::Config("lr_toxicity must not exceed lr_meta".into()));
        }
        Ok(())
    }
}

/// Selects the violating meta prefix: offensive context and supportive
/// response.
pub fn meta_index(t_c: bool, s_r: bool) -> bool {
    t_c && s_r
}

/// `max(m - d, 0)^2`.
pub fn squared_hinge(margin: f64, d: f64) -> f64 {
    let gap = (margin - d).max(0.0);
    gap * gap
}

/// Derivative of [`squared_hinge`] with respect to `d`.
pub fn squared_hinge_grad(margin: f64, d: f64) -> f64 {
    if d < margin {
        -2.0 * (margin - d)
    } else {
        0.0
    }
}

/// `w1 * l_lm + w2 * l_s + w3 * l_c` after applying the ablation.
pub fn weighted_total(w: &LossWeights, ablation: Ablation, l_lm: f64, l_s: f64, l_c: f64) -> f64 {
    let e = ablation.effective(w);
    let mut total = e.w1 * l_lm;
    if e.w2 != 0.0 {
        total += e.w2 * l_s;
    }
    if e.w3 != 0.0 {
        total += e.w3 * l_c;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn meta_index_truth_table() {
        assert!(meta_index(true, true));
        assert!(!meta_index(false, true));
        assert!(!meta_index(true, false));
        assert!(!meta_index(false, false));
    }

    #[test]
    fn hinge_values() {
        assert!((squared_hinge(0.8, 0.5) - 0.09).abs() < 1e-12);
        assert!((squared_hinge(0.8, 0.0) - 0.64).abs() < 1e-12);
        assert_eq!(squared_hinge(0.8, 0.8), 0.0);
        assert_eq!(squared_hinge_grad(0.8, 0.9), 0.0);
        assert_eq!(squared_hinge(0.8, 1.3), 0.0);
    }

    #[test]
    fn totals() {
        let w = LossWeights::default();
        assert!((weighted_total(&w, Ablation::Full, 2.0, 0.09, 0.64) - 1.283).abs() < 1e-12);
        assert_eq!(
            weighted_total(&w, Ablation::NoBoth, 2.0, 0.09, 0.64),
            0.5 * 2.0
        );
        let unit = LossWeights {
            w1: 1.0,
            w2: 0.0,
            w3: 0.0,
            ..w
        };
        assert_eq!(weighted_total(&unit, Ablation::Full, 2.5, 0.3, 0.1), 2.5);
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(Ablation::parse(a.as_str()).unwrap(), a);
            let s = serde_json::to_string(&a).unwrap();
            assert_eq!(serde_json::from_str::<Ablation>(&s).unwrap(), a);
        }
        assert_eq!(Ablation::NoLc.effective(&LossWeights::default()).w3, 0.0);
    }
}
