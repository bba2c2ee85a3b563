// SPDX-License-Identifier: MIT OR Apache-2.0

//! The compared controllers: single-prefix tuning on safe data, a
//! likelihood-contrast prefix pair, and the classify-then-generate flow.

mod classifier;
mod clsgen;

pub use classifier::{
    train_offense_classifier, ClassifierConfig, ClassifierMetrics, OffenseClassifier,
};
pub use clsgen::{
    clsgen_generate, clsgen_prefix, ConcatOrder, ControlRoute, RouteRecord, STANCE_PREFIX,
    TOXICITY_PREFIX,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::prefix::{to_kv, PrefixBank, PrefixConfig, ReparamPrefix};
use crate::tensor::Mat;
use crate::tinylm::{nll_grad, LmParams};
use crate::training::{StratifiedSampler, TrainExample};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub lm_weight: f64,
    pub disc_weight: f64,
    pub adam: AdamWConfig,
}

impl Default for BankTrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch: 16,
            lr: 2e-3,
            seed: 42,
            lm_weight: 0.8,
            disc_weight: 0.2,
            adam: AdamWConfig::default(),
        }
    }
}

impl BankTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::Config(
                "bank training needs a positive batch and learning rate".into(),
            ));
        }
        if self.lm_weight < 0.0 || self.disc_weight < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankLossRow {
    pub step: usize,
    pub l_lm: f64,
    pub l_disc: f64,
    pub total: f64,
}

pub struct BankTrainRun {
    pub bank: PrefixBank,
    pub trace: Vec<BankLossRow>,
}

/// Cross-entropy of the true category under `softmax(-nll_k)`.
pub fn discriminative_loss(nlls: [f64; 2], category: bool) -> f64 {
    let (a, b) = (-nlls[0], -nlls[1]);
    let mx = a.max(b);
    let lse = mx + ((a - mx).exp() + (b - mx).exp()).ln();
    lse - if category { b } else { a }
}

fn ensure_frozen(lm: &LmParams) -> Result<()> {
    if lm.is_frozen() {
        Ok(())
    } else {
        Err(Error::Config(
            "controller training requires a frozen backbone".into(),
        ))
    }
}

/// Train a two-entry bank where entry `k` models category `k` under the
/// joint loss `lm_weight * nll_cat + disc_weight * L_disc`.
///
/// `examples` are `(context, target, category)` triples.
pub fn train_supervised_contrastive(
    lm: &LmParams,
    examples: &[(&[u32], &[u32], bool)],
    prefix_cfg: &PrefixConfig,
    cfg: &BankTrainConfig,
    init: Option<&PrefixBank>,
) -> Result<BankTrainRun> {
    ensure_frozen(lm)?;
    cfg.validate()?;
    prefix_cfg.validate()?;
    let labels: Vec<bool> = examples.iter().map(|e| e.2).collect();
    for cat in [false, true] {
        if !labels.contains(&cat) {
            return Err(Error::Empty(format!(
                "category {} has no examples",
                u8::from(cat)
            )));
        }
    }
    let d = lm.config.prefix_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut bank = match init {
        Some(b) => b.clone(),
        None => PrefixBank::init(prefix_cfg, d, &mut rng),
    };
    let mut sampler = StratifiedSampler::new(&labels, cfg.seed ^ 0xba5e);
    let sizes: Vec<usize> = bank.factors().iter().map(|t| t.len()).collect();
    let mut opt = AdamW::new(cfg.adam.clone(), &sizes);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = sampler.next_batch(cfg.batch);
        let b = idx.len() as f64;
        let kv = [
            to_kv(&bank.materialize(false), &lm.config)?,
            to_kv(&bank.materialize(true), &lm.config)?,
        ];
        let parts: Vec<([f64; 2], [Mat; 2])> = idx
            .par_iter()
            .map(|&i| {
                let (ctx, tgt, _) = examples[i];
                let (v0, g0) = nll_grad(lm, ctx, tgt, Some(&kv[0]), false)?;
                let (v1, g1) = nll_grad(lm, ctx, tgt, Some(&kv[1]), false)?;
                Ok((
                    [v0, v1],
                    [
                        g0.prefix.expect("prefix").to_flat(),
                        g1.prefix.expect("prefix").to_flat(),
                    ],
                ))
            })
            .collect::<Result<_>>()?;
        let mut dflat = [Mat::zeros(prefix_cfg.len, d), Mat::zeros(prefix_cfg.len, d)];
        let (mut l_lm, mut l_disc) = (0.0, 0.0);
        for (&i, (nlls, g)) in idx.iter().zip(&parts) {
            let cat = examples[i].2;
            let k = usize::from(cat);
            l_lm += nlls[k] / b;
            l_disc += discriminative_loss(*nlls, cat) / b;
            // d L_disc / d nll_j = [j == cat] - p_j with p = softmax(-nll)
            let p1 = 1.0 / (1.0 + (nlls[1] - nlls[0]).exp());
            let p = [1.0 - p1, p1];
            for j in 0..2 {
                let delta = if j == k { 1.0 } else { 0.0 };
                let coef = cfg.lm_weight * delta + cfg.disc_weight * (delta - p[j]);
                dflat[j].axpy(coef / b, &g[j]);
            }
        }
        let total = cfg.lm_weight * l_lm + cfg.disc_weight * l_disc;
        if !total.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("L_LM={l_lm} L_disc={l_disc}"),
            });
        }
        trace.push(BankLossRow {
            step,
            l_lm,
            l_disc,
            total,
        });
        let g0 = bank.entry(false).backward(&dflat[0])?;
        let g1 = bank.entry(true).backward(&dflat[1])?;
        let grads = [&g0.h_small, &g0.w, &g1.h_small, &g1.w];
        let lrs = [cfg.lr; 4];
        let mut params = bank.factors_mut();
        opt.update(&mut params, &grads, &lrs)?;
    }
    Ok(BankTrainRun { bank, trace })
}

/// Safe examples: non-offensive responses that do not support an offensive
/// context.
pub fn is_safe(ex: &TrainExample) -> bool {
    !ex.t_r && !ex.m_r()
}

pub struct PrefixTuningRun {
    pub prefix: ReparamPrefix,
    /// Mean nll per step.
    pub trace: Vec<f64>,
}

/// A single prefix trained by maximum likelihood on the safe examples only.
pub fn train_prefix_tuning(
    lm: &LmParams,
    examples: &[TrainExample],
    prefix_cfg: &PrefixConfig,
    cfg: &BankTrainConfig,
) -> Result<PrefixTuningRun> {
    ensure_frozen(lm)?;
    cfg.validate()?;
    prefix_cfg.validate()?;
    let safe: Vec<&TrainExample> = examples.iter().filter(|e| is_safe(e)).collect();
    if safe.is_empty() {
        return Err(Error::Empty("no safe examples for prefix tuning".into()));
    }
    let d = lm.config.prefix_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut prefix = ReparamPrefix::init(prefix_cfg, d, &mut rng);
    let mut sampler = StratifiedSampler::new(&vec![false; safe.len()], cfg.seed ^ 0x7e57);
    let sizes: Vec<usize> = prefix.factors().iter().map(|t| t.len()).collect();
    let mut opt = AdamW::new(cfg.adam.clone(), &sizes);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = sampler.next_batch(cfg.batch);
        let b = idx.len() as f64;
        let kv = to_kv(&prefix.materialize(), &lm.config)?;
        let parts: Vec<(f64, Mat)> = idx
            .par_iter()
            .map(|&i| {
                let (v, g) = nll_grad(lm, &safe[i].ctx, &safe[i].tgt, Some(&kv), false)?;
                Ok((v, g.prefix.expect("prefix").to_flat()))
            })
            .collect::<Result<_>>()?;
        let mut dflat = Mat::zeros(prefix_cfg.len, d);
        let mut loss = 0.0;
        for (v, g) in &parts {
            loss += v / b;
            dflat.axpy(1.0 / b, g);
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("L_LM={loss}"),
            });
        }
        trace.push(loss);
        let g = prefix.backward(&dflat)?;
        let mut params = prefix.factors_mut();
        opt.update(&mut params, &[&g.h_small, &g.w], &[cfg.lr; 2])?;
    }
    Ok(PrefixTuningRun { prefix, trace })
}

/// Safe (entry 0) versus unsafe (entry 1) prefixes trained jointly.
pub fn train_contrastive_prefixes(
    lm: &LmParams,
    examples: &[TrainExample],
    prefix_cfg: &PrefixConfig,
    cfg: &BankTrainConfig,
) -> Result<BankTrainRun> {
    let triples: Vec<(&[u32], &[u32], bool)> = examples
        .iter()
        .map(|e| (e.ctx.as_slice(), e.tgt.as_slice(), !is_safe(e)))
        .collect();
    train_supervised_contrastive(lm, &triples, prefix_cfg, cfg, None)
}

/// Non-supportive (entry 0) versus supportive (entry 1) prefixes trained on
/// offensive contexts only.
pub fn train_stance_bank(
    lm: &LmParams,
    examples: &[TrainExample],
    prefix_cfg: &PrefixConfig,
    cfg: &BankTrainConfig,
) -> Result<BankTrainRun> {
    let triples: Vec<(&[u32], &[u32], bool)> = examples
        .iter()
        .filter(|e| e.t_c)
        .map(|e| (e.ctx.as_slice(), e.tgt.as_slice(), e.s_r))
        .collect();
    train_supervised_contrastive(lm, &triples, prefix_cfg, cfg, None)
}
