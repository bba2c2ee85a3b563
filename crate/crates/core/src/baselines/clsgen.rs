// SPDX-License-Identifier: MIT OR Apache-2.0

//! Classify-then-generate: route each context through the offense
//! classifier, then pick the prefix stack accordingly.

use serde::{Deserialize, Serialize};

use super::classifier::OffenseClassifier;
use crate::corpus::{dialogue_context, Vocab};
use crate::error::Result;
use crate::prefix::to_kv;
use crate::tensor::Mat;
use crate::tinylm::{sample, GenConfig, KvPrefix, LmParams};

pub const TOXICITY_PREFIX: &str = "toxicity.0";
pub const STANCE_PREFIX: &str = "stance.0";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConcatOrder {
    #[default]
    ToxicityFirst,
    StanceFirst,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlRoute {
    pub verdict: bool,
    pub prefixes_applied: Vec<String>,
}

impl ControlRoute {
    pub fn for_verdict(verdict: bool, order: ConcatOrder) -> Self {
        let prefixes_applied = match (verdict, order) {
            (false, _) => vec![TOXICITY_PREFIX],
            (true, ConcatOrder::ToxicityFirst) => vec![TOXICITY_PREFIX, STANCE_PREFIX],
            (true, ConcatOrder::StanceFirst) => vec![STANCE_PREFIX, TOXICITY_PREFIX],
        };
        Self {
            verdict,
            prefixes_applied: prefixes_applied.into_iter().map(String::from).collect(),
        }
    }
}

/// One line of the routing log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteRecord {
    pub example_id: usize,
    pub verdict: bool,
    pub prefixes_applied: Vec<String>,
    pub seed: u64,
}

/// The KV prefix for `route`: the toxicity prefix alone (length M) or both
/// prefixes stacked along the position axis (length 2M).
pub fn clsgen_prefix(
    lm: &LmParams,
    route: &ControlRoute,
    toxicity: &Mat,
    stance: &Mat,
) -> Result<KvPrefix> {
    let mut stack: Option<Mat> = None;
    for name in &route.prefixes_applied {
        let part = if name == STANCE_PREFIX {
            stance
        } else {
            toxicity
        };
        stack = Some(match stack {
            None => part.clone(),
            Some(s) => s.vstack(part)?,
        });
    }
    to_kv(&stack.unwrap_or_else(|| toxicity.clone()), &lm.config)
}

/// Classify the raw context `c`, then sample one response under the routed
/// prefix stack.
#[allow(clippy::too_many_arguments)]
pub fn clsgen_generate(
    lm: &LmParams,
    classifier: &OffenseClassifier,
    toxicity: &Mat,
    stance: &Mat,
    order: ConcatOrder,
    vocab: &Vocab,
    c: &[u32],
    gen: &GenConfig,
    seed: u64,
) -> Result<(Vec<u32>, ControlRoute)> {
    let route = ControlRoute::for_verdict(classifier.predict(c)?, order);
    let kv = clsgen_prefix(lm, &route, toxicity, stance)?;
    let tokens = sample(
        lm,
        &dialogue_context(vocab, c),
        Some(&kv),
        gen,
        vocab.special.eos,
        seed,
    )?;
    Ok((tokens, route))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn routes_are_a_function_of_the_verdict() {
        for order in [ConcatOrder::ToxicityFirst, ConcatOrder::StanceFirst] {
            assert_eq!(
                ControlRoute::for_verdict(false, order).prefixes_applied,
                vec![TOXICITY_PREFIX]
            );
            let on = ControlRoute::for_verdict(true, order);
            assert_eq!(on.prefixes_applied.len(), 2);
            assert!(on.prefixes_applied.iter().any(|p| p == STANCE_PREFIX));
        }
        assert_eq!(
            ControlRoute::for_verdict(true, ConcatOrder::ToxicityFirst).prefixes_applied[0],
            TOXICITY_PREFIX
        );
    }
}
