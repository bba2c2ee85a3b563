// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sampling completions for a test split under each controller, scoring them
//! with the lexicon oracles, and tabulating reports.

mod metrics;
mod report;

pub use metrics::{
    class_breakdown, perplexity_metric, self_toxicity, shift_from_means, stance_means,
    stance_shift, stance_shift_per_example, support_stance_score, ClassBreakdown, ShiftMode,
};
pub use report::{
    build_report, compare, split_hash, Comparison, EvalReport, RoutingSummary, REPORT_FORMAT,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{clsgen_prefix, ConcatOrder, ControlRoute, OffenseClassifier, RouteRecord};
use crate::corpus::{dialogue_context, DialogueExample, Vocab};
use crate::error::Result;
use crate::prefix::{combine, to_kv, MetaInference};
use crate::tensor::Mat;
use crate::tinylm::{sample, GenConfig, KvPrefix, LmParams};

/// Completions for one test example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationItem {
    pub example_id: usize,
    /// Raw user utterance `c`.
    pub context: Vec<u32>,
    pub t_c: bool,
    pub completions: Vec<Vec<u32>>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationSet {
    pub method: String,
    pub run_seed: u64,
    pub items: Vec<GenerationItem>,
}

impl GenerationSet {
    pub fn n_completions(&self) -> usize {
        self.items.iter().map(|i| i.completions.len()).sum()
    }
}

/// Per-completion sampling seed, independent of evaluation order.
pub fn completion_seed(run_seed: u64, example_id: usize, k: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(run_seed.to_le_bytes());
    h.update((example_id as u64).to_le_bytes());
    h.update((k as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// How responses are steered at generation time.
#[derive(Clone, Debug)]
pub enum Controller {
    Uncontrolled,
    /// One context-independent prefix (prefix tuning, the safe entry of the
    /// contrastive pair).
    Static(KvPrefix),
    /// Stance prefix generated from the context by meta entry 0, added to
    /// toxicity entry 0.
    Hierarchical {
        meta: MetaInference,
        toxicity: Mat,
    },
    ClsGen {
        classifier: OffenseClassifier,
        toxicity: Mat,
        stance: Mat,
        order: ConcatOrder,
    },
}

impl Controller {
    /// The KV prefix applied for raw context `c`, and the route taken if
    /// the controller routes.
    pub fn prefix_for(
        &self,
        lm: &LmParams,
        vocab: &Vocab,
        c: &[u32],
    ) -> Result<(Option<KvPrefix>, Option<ControlRoute>)> {
        Ok(match self {
            Controller::Uncontrolled => (None, None),
            Controller::Static(kv) => (Some(kv.clone()), None),
            Controller::Hierarchical { meta, toxicity } => {
                let stance = meta.generate(lm, &dialogue_context(vocab, c))?;
                (Some(to_kv(&combine(&stance, toxicity)?, &lm.config)?), None)
            }
            Controller::ClsGen {
                classifier,
                toxicity,
                stance,
                order,
            } => {
                let route = ControlRoute::for_verdict(classifier.predict(c)?, *order);
                (
                    Some(clsgen_prefix(lm, &route, toxicity, stance)?),
                    Some(route),
                )
            }
        })
    }
}

/// Sample `gen.num_completions` responses for every example. Example ids are
/// positions in `examples`. Routing records are returned for controllers
/// that route, one per completion.
pub fn generate_set(
    lm: &LmParams,
    controller: &Controller,
    vocab: &Vocab,
    examples: &[DialogueExample],
    gen: &GenConfig,
    run_seed: u64,
    method: &str,
) -> Result<(GenerationSet, Vec<RouteRecord>)> {
    gen.validate()?;
    let per_example: Vec<(GenerationItem, Vec<RouteRecord>)> = examples
        .par_iter()
        .enumerate()
        .map(|(id, ex)| {
            let (kv, route) = controller.prefix_for(lm, vocab, &ex.c)?;
            let ctx = dialogue_context(vocab, &ex.c);
            let mut item = GenerationItem {
                example_id: id,
                context: ex.c.clone(),
                t_c: ex.t_c,
                completions: Vec::with_capacity(gen.num_completions),
                seeds: Vec::with_capacity(gen.num_completions),
            };
            let mut routes = Vec::new();
            for k in 0..gen.num_completions {
                let seed = completion_seed(run_seed, id, k);
                item.completions
                    .push(sample(lm, &ctx, kv.as_ref(), gen, vocab.special.eos, seed)?);
                item.seeds.push(seed);
                if let Some(r) = &route {
                    routes.push(RouteRecord {
                        example_id: id,
                        verdict: r.verdict,
                        prefixes_applied: r.prefixes_applied.clone(),
                        seed,
                    });
                }
            }
            Ok((item, routes))
        })
        .collect::<Result<_>>()?;
    let mut items = Vec::with_capacity(per_example.len());
    let mut routes = Vec::new();
    for (item, r) in per_example {
        items.push(item);
        routes.extend(r);
    }
    Ok((
        GenerationSet {
            method: method.into(),
            run_seed,
            items,
        },
        routes,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_depend_on_every_coordinate() {
        let s = completion_seed(42, 3, 1);
        assert_eq!(s, completion_seed(42, 3, 1));
        assert_ne!(s, completion_seed(43, 3, 1));
        assert_ne!(s, completion_seed(42, 4, 1));
        assert_ne!(s, completion_seed(42, 3, 2));
        assert_ne!(completion_seed(0, 1, 0), completion_seed(0, 0, 1));
    }
}
