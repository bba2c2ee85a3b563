// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{LmParams, LmWeights};
use super::nll_grad;
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub adam: AdamWConfig,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch: 16,
            lr: 3e-3,
            seed: 42,
            adam: AdamWConfig {
                weight_decay: 0.01,
                ..AdamWConfig::default()
            },
        }
    }
}

/// Next-token training on whole sequences. Each sequence is scored from its
/// second token onward given the first (normally BOS). Returns the per-step
/// mean per-token loss.
pub fn train_lm(
    params: &mut LmParams,
    sequences: &[Vec<u32>],
    cfg: &LmTrainConfig,
) -> Result<Vec<f64>> {
    if params.is_frozen() {
        return Err(Error::Frozen("train_lm called on a frozen backbone".into()));
    }
    if sequences.is_empty() {
        return Err(Error::Empty("no training sequences".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    if let Some(s) = sequences.iter().find(|s| s.len() < 2) {
        return Err(Error::Empty(format!(
            "training sequence of length {} has no target",
            s.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let refs: Vec<_> = params.weights.named().into_iter().map(|(_, t)| t).collect();
    let mut opt = AdamW::for_params(cfg.adam.clone(), &refs);
    let n_tensors = refs.len();
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let frozen_view: &LmParams = params;
        let parts: Vec<(f64, LmWeights)> = batch
            .par_iter()
            .map(|&i| {
                let s = &sequences[i];
                let (v, g) = nll_grad(frozen_view, &s[..1], &s[1..], None, true)?;
                Ok((v, g.weights.expect("weight grads requested")))
            })
            .collect::<Result<_>>()?;
        let n_tokens: usize = batch.iter().map(|&i| sequences[i].len() - 1).sum();
        let scale = 1.0 / n_tokens as f64;
        let mut total = 0.0;
        let mut grad = LmWeights::zeros(&params.config);
        for (v, g) in &parts {
            total += v;
            for (acc, t) in grad.tensors_mut().into_iter().zip(g.named()) {
                acc.axpy(scale, t.1);
            }
        }
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("lm loss {loss}"),
            });
        }
        trace.push(loss);
        let grads: Vec<_> = grad.named().into_iter().map(|(_, t)| t).collect();
        let lrs = vec![cfg.lr; n_tensors];
        let mut weights = params.weights_mut()?.tensors_mut();
        opt.update(&mut weights, &grads, &lrs)?;
    }
    Ok(trace)
}
