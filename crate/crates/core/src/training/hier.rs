// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sampler::StratifiedSampler;
use super::{
    meta_index, squared_hinge, squared_hinge_grad, weighted_total, Ablation, LossWeights,
    LsReduction, TrainConfig,
};
use crate::baselines::{train_supervised_contrastive, BankTrainConfig, BankTrainRun};
use crate::corpus::{dialogue_context, dialogue_target, DialogueExample, Vocab};
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::prefix::{
    combine, to_kv, MetaGrads, MetaPrefixModel, PrefixBank, PrefixConfig, StanceGeneration,
};
use crate::tensor::Mat;
use crate::tinylm::{nll, nll_grad, LmParams};

/// A prefix-training example in model-ready form.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    /// `[BOS] c [SEP]`
    pub ctx: Vec<u32>,
    /// `r [EOS]`
    pub tgt: Vec<u32>,
    pub t_c: bool,
    pub t_r: bool,
    pub s_r: bool,
}

impl TrainExample {
    pub fn from_dialogue(ex: &DialogueExample, vocab: &Vocab) -> Result<Self> {
        let s_r = ex.s_r.ok_or_else(|| {
            Error::Config("prefix training needs examples with a defined s_r".into())
        })?;
        Ok(Self {
            ctx: dialogue_context(vocab, &ex.c),
            tgt: dialogue_target(vocab, &ex.r),
            t_c: ex.t_c,
            t_r: ex.t_r,
            s_r,
        })
    }

    pub fn from_split(examples: &[DialogueExample], vocab: &Vocab) -> Result<Vec<Self>> {
        examples
            .iter()
            .map(|e| Self::from_dialogue(e, vocab))
            .collect()
    }

    pub fn m_r(&self) -> bool {
        meta_index(self.t_c, self.s_r)
    }
}

/// Loss components of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_lm: f64,
    pub l_s: f64,
    /// `None` when the batch lacks one of the context classes.
    pub l_c: Option<f64>,
    pub total: f64,
    pub d_s_mean: Option<f64>,
    pub d_c: Option<f64>,
}

/// Gradients of a batch loss: meta gradients (bank entries materialized)
/// and gradients on the two materialized toxicity prefixes.
pub struct BatchGrads {
    pub meta: MetaGrads,
    pub tox: [Mat; 2],
}

impl BatchGrads {
    /// Gradients in the order of [`trainable_mut`]: meta factors, readout
    /// embeddings, readout projection, toxicity factors.
    pub fn factor_grads(&self, meta: &MetaPrefixModel, tox: &PrefixBank) -> Result<Vec<Mat>> {
        let mut out = Vec::with_capacity(10);
        for idx in [false, true] {
            let g = meta
                .bank
                .entry(idx)
                .backward(&self.meta.bank[usize::from(idx)])?;
            out.push(g.h_small);
            out.push(g.w);
        }
        out.push(self.meta.readout_embeddings.clone());
        out.push(self.meta.readout_projection.clone());
        for idx in [false, true] {
            let g = tox.entry(idx).backward(&self.tox[usize::from(idx)])?;
            out.push(g.h_small);
            out.push(g.w);
        }
        Ok(out)
    }
}

/// Every trainable tensor: the six meta (alpha) tensors then the four
/// toxicity (beta) factors.
pub fn trainable_mut<'a>(
    meta: &'a mut MetaPrefixModel,
    tox: &'a mut PrefixBank,
) -> Vec<&'a mut Mat> {
    let mut out: Vec<&mut Mat> = meta.bank.factors_mut().into_iter().collect();
    out.push(&mut meta.readout_embeddings);
    out.push(&mut meta.readout_projection);
    out.extend(tox.factors_mut());
    out
}

const N_ALPHA: usize = 6;

struct ExamplePass {
    gen_mr: StanceGeneration,
    gen_not: Option<StanceGeneration>,
    nll: f64,
    dprefix: Option<Mat>,
}

fn l2(a: &Mat, b: &Mat) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Forward (and optionally backward) pass of the weighted loss over a batch.
///
/// Gradients follow the effective weights of `ablation`, so ablated terms
/// are still reported but contribute nothing to the update.
pub fn batch_loss(
    lm: &LmParams,
    meta: &MetaPrefixModel,
    tox: &PrefixBank,
    batch: &[&TrainExample],
    weights: &LossWeights,
    ablation: Ablation,
    reduction: LsReduction,
    want_grads: bool,
) -> Result<(LossBreakdown, Option<BatchGrads>)> {
    if batch.is_empty() {
        return Err(Error::Empty("loss batch".into()));
    }
    if !lm.is_frozen() {
        return Err(Error::Config(
            "prefix training requires a frozen backbone".into(),
        ));
    }
    let tox_flat = [tox.materialize(false), tox.materialize(true)];
    let passes: Vec<ExamplePass> = batch
        .par_iter()
        .map(|ex| {
            let gen_mr = meta.generate(lm, ex.m_r(), &ex.ctx)?;
            let gen_not = if ex.t_c {
                Some(meta.generate(lm, !ex.m_r(), &ex.ctx)?)
            } else {
                None
            };
            let p = combine(&gen_mr.output, &tox_flat[usize::from(ex.t_r)])?;
            let kv = to_kv(&p, &lm.config)?;
            let (v, dprefix) = if want_grads {
                let (v, g) = nll_grad(lm, &ex.ctx, &ex.tgt, Some(&kv), false)?;
                (v, Some(g.prefix.expect("prefix present").to_flat()))
            } else {
                (nll(lm, &ex.ctx, &ex.tgt, Some(&kv))?, None)
            };
            Ok(ExamplePass {
                gen_mr,
                gen_not,
                nll: v,
                dprefix,
            })
        })
        .collect::<Result<_>>()?;

    let b = batch.len() as f64;
    let margin = weights.margin;
    let l_lm = passes.iter().map(|p| p.nll).sum::<f64>() / b;

    let d_s: Vec<Option<f64>> = passes
        .iter()
        .map(|p| p.gen_not.as_ref().map(|n| l2(&p.gen_mr.output, &n.output)))
        .collect();
    let n_off = d_s.iter().flatten().count();
    let ls_denom = match reduction {
        LsReduction::BatchMean => b,
        LsReduction::OffensiveMean => n_off as f64,
    };
    let l_s = if n_off == 0 {
        0.0
    } else {
        d_s.iter()
            .flatten()
            .map(|d| squared_hinge(margin, *d))
            .sum::<f64>()
            / ls_denom
    };
    let d_s_mean = (n_off > 0).then(|| d_s.iter().flatten().sum::<f64>() / n_off as f64);

    // f(h_alpha^0, c) for every example, with its context class
    let g0: Vec<(&Mat, bool)> = passes
        .iter()
        .zip(batch)
        .map(|(p, ex)| {
            let out = if ex.m_r() {
                &p.gen_not
                    .as_ref()
                    .expect("offensive examples generate both entries")
                    .output
            } else {
                &p.gen_mr.output
            };
            (out, ex.t_c)
        })
        .collect();
    let n1 = g0.iter().filter(|(_, c)| *c).count();
    let n0 = g0.len() - n1;
    let (m, d) = (meta.bank.len(), meta.bank.width());
    let class_means = (n0 > 0 && n1 > 0).then(|| {
        let mut e0 = Mat::zeros(m, d);
        let mut e1 = Mat::zeros(m, d);
        for (g, c) in &g0 {
            if *c {
                e1.axpy(1.0 / n1 as f64, g);
            } else {
                e0.axpy(1.0 / n0 as f64, g);
            }
        }
        (e0, e1)
    });
    let d_c = class_means.as_ref().map(|(e0, e1)| l2(e0, e1));
    let l_c = d_c.map(|d| squared_hinge(margin, d));
    let total = weighted_total(weights, ablation, l_lm, l_s, l_c.unwrap_or(0.0));
    let breakdown = LossBreakdown {
        l_lm,
        l_s,
        l_c,
        total,
        d_s_mean,
        d_c,
    };
    if !want_grads {
        return Ok((breakdown, None));
    }

    let eff = ablation.effective(weights);
    let mut dout_mr: Vec<Mat> = Vec::with_capacity(passes.len());
    let mut dout_not: Vec<Option<Mat>> = Vec::with_capacity(passes.len());
    let mut tox_grad = [Mat::zeros(m, d), Mat::zeros(m, d)];
    for (p, ex) in passes.iter().zip(batch) {
        let dp = p.dprefix.as_ref().expect("gradients requested");
        dout_mr.push(dp.scaled(eff.w1 / b));
        tox_grad[usize::from(ex.t_r)].axpy(eff.w1 / b, dp);
        dout_not.push(p.gen_not.as_ref().map(|_| Mat::zeros(m, d)));
    }
    if eff.w2 != 0.0 && n_off > 0 {
        for (i, p) in passes.iter().enumerate() {
            let (Some(ds), Some(not)) = (d_s[i], p.gen_not.as_ref()) else {
                continue;
            };
            if ds <= 0.0 {
                continue;
            }
            let c = eff.w2 / ls_denom * squared_hinge_grad(margin, ds) / ds;
            if c == 0.0 {
                continue;
            }
            let diff = p.gen_mr.output.sub(&not.output)?;
            dout_mr[i].axpy(c, &diff);
            dout_not[i].as_mut().expect("offensive").axpy(-c, &diff);
        }
    }
    if let (true, Some((e0, e1)), Some(dc)) = (eff.w3 != 0.0, class_means.as_ref(), d_c) {
        let c = eff.w3 * squared_hinge_grad(margin, dc);
        if c != 0.0 && dc > 0.0 {
            let v = e0.sub(e1)?.scaled(c / dc);
            for (i, ex) in batch.iter().enumerate() {
                let scale = if ex.t_c {
                    -1.0 / n1 as f64
                } else {
                    1.0 / n0 as f64
                };
                let slot = if ex.m_r() {
                    dout_not[i].as_mut().expect("offensive")
                } else {
                    &mut dout_mr[i]
                };
                slot.axpy(scale, &v);
            }
        }
    }

    let parts: Vec<MetaGrads> = passes
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut g = meta.zero_grads();
            p.gen_mr.backward(lm, meta, &dout_mr[i], &mut g)?;
            if let (Some(gen), Some(dn)) = (p.gen_not.as_ref(), dout_not[i].as_ref()) {
                if dn.as_slice().iter().any(|v| *v != 0.0) {
                    gen.backward(lm, meta, dn, &mut g)?;
                }
            }
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let mut meta_grads = meta.zero_grads();
    for g in &parts {
        meta_grads.add_assign(g);
    }
    Ok((
        breakdown,
        Some(BatchGrads {
            meta: meta_grads,
            tox: tox_grad,
        }),
    ))
}

/// Mean negative log-likelihood of the responses under
/// `f(h_alpha^{m_r}, c) + h_beta^{t_r}`.
pub fn lm_loss(
    lm: &LmParams,
    meta: &MetaPrefixModel,
    tox: &PrefixBank,
    batch: &[&TrainExample],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("loss batch".into()));
    }
    let tox_flat = [tox.materialize(false), tox.materialize(true)];
    let vals: Vec<f64> = batch
        .par_iter()
        .map(|ex| {
            let g = meta.generate(lm, ex.m_r(), &ex.ctx)?;
            let kv = to_kv(
                &combine(&g.output, &tox_flat[usize::from(ex.t_r)])?,
                &lm.config,
            )?;
            nll(lm, &ex.ctx, &ex.tgt, Some(&kv))
        })
        .collect::<Result<_>>()?;
    Ok(vals.iter().sum::<f64>() / batch.len() as f64)
}

/// Batch-mean squared hinge on the distance between the two meta entries'
/// generated prefixes, counted only for offensive contexts.
pub fn stance_contrastive_loss(
    lm: &LmParams,
    meta: &MetaPrefixModel,
    batch: &[&TrainExample],
    margin: f64,
    reduction: LsReduction,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("loss batch".into()));
    }
    let terms: Vec<Option<f64>> = batch
        .par_iter()
        .map(|ex| {
            if !ex.t_c {
                return Ok(None);
            }
            let a = meta.generate(lm, ex.m_r(), &ex.ctx)?.output;
            let b = meta.generate(lm, !ex.m_r(), &ex.ctx)?.output;
            Ok(Some(squared_hinge(margin, l2(&a, &b))))
        })
        .collect::<Result<_>>()?;
    let n_off = terms.iter().flatten().count();
    if n_off == 0 {
        return Ok(0.0);
    }
    let denom = match reduction {
        LsReduction::BatchMean => batch.len(),
        LsReduction::OffensiveMean => n_off,
    };
    Ok(terms.iter().flatten().sum::<f64>() / denom as f64)
}

/// Squared hinge on the distance between the class means of
/// `f(h_alpha^0, c)`; `None` if a context class is missing.
pub fn context_contrastive_loss(
    lm: &LmParams,
    meta: &MetaPrefixModel,
    batch: &[&TrainExample],
    margin: f64,
) -> Result<Option<f64>> {
    let outs: Vec<Mat> = batch
        .par_iter()
        .map(|ex| Ok(meta.generate(lm, false, &ex.ctx)?.output))
        .collect::<Result<_>>()?;
    Ok(
        class_mean_distance(&outs, &batch.iter().map(|e| e.t_c).collect::<Vec<_>>())
            .map(|d| squared_hinge(margin, d)),
    )
}

fn class_mean_distance(outs: &[Mat], labels: &[bool]) -> Option<f64> {
    let n1 = labels.iter().filter(|l| **l).count();
    let n0 = labels.len() - n1;
    if n0 == 0 || n1 == 0 {
        return None;
    }
    let (r, c) = outs[0].shape();
    let mut e0 = Mat::zeros(r, c);
    let mut e1 = Mat::zeros(r, c);
    for (o, l) in outs.iter().zip(labels) {
        if *l {
            e1.axpy(1.0 / n1 as f64, o);
        } else {
            e0.axpy(1.0 / n0 as f64, o);
        }
    }
    Some(l2(&e0, &e1))
}

/// Weighted total loss of a batch (no gradients).
pub fn total_loss(
    lm: &LmParams,
    meta: &MetaPrefixModel,
    tox: &PrefixBank,
    batch: &[&TrainExample],
    weights: &LossWeights,
    ablation: Ablation,
) -> Result<f64> {
    let (b, _) = batch_loss(
        lm,
        meta,
        tox,
        batch,
        weights,
        ablation,
        LsReduction::BatchMean,
        false,
    )?;
    Ok(b.total)
}

/// One line of the loss-trace CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    #[serde(rename = "L_LM")]
    pub l_lm: f64,
    #[serde(rename = "L_s")]
    pub l_s: f64,
    #[serde(rename = "L_c")]
    pub l_c: Option<f64>,
    pub total: f64,
    pub d_s_mean: Option<f64>,
    pub d_c: Option<f64>,
}

pub fn write_loss_trace(rows: &[LossRow], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Result of [`train_hierarchical`].
pub struct HierarchicalRun {
    pub meta: MetaPrefixModel,
    pub tox: PrefixBank,
    pub trace: Vec<LossRow>,
}

/// Train the meta model (alpha) and fine-tune the toxicity bank (beta) with
/// the weighted three-term loss. The backbone is only read.
pub fn train_hierarchical(
    lm: &LmParams,
    examples: &[TrainExample],
    tox_init: &PrefixBank,
    prefix_cfg: &PrefixConfig,
    weights: &LossWeights,
    cfg: &TrainConfig,
) -> Result<HierarchicalRun> {
    cfg.validate()?;
    weights.validate()?;
    prefix_cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Empty("prefix-training split".into()));
    }
    if !lm.is_frozen() {
        return Err(Error::Config(
            "prefix training requires a frozen backbone".into(),
        ));
    }
    let d = lm.config.prefix_dim();
    if tox_init.width() != d || tox_init.len() != prefix_cfg.len {
        return Err(Error::Shape(
            "toxicity bank does not match the prefix config".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut meta = MetaPrefixModel::init(prefix_cfg, &lm.config, cfg.readout_std, &mut rng);
    let mut tox = tox_init.clone();
    let labels: Vec<bool> = examples.iter().map(|e| e.t_c).collect();
    let mut sampler = StratifiedSampler::new(&labels, cfg.seed ^ 0x5eed);
    let sizes: Vec<usize> = trainable_mut(&mut meta, &mut tox)
        .iter()
        .map(|t| t.len())
        .collect();
    let mut opt = AdamW::new(cfg.adam.clone(), &sizes);
    let lrs: Vec<f64> = (0..sizes.len())
        .map(|i| {
            if i < N_ALPHA {
                cfg.lr_meta
            } else {
                cfg.lr_toxicity
            }
        })
        .collect();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = sampler.next_batch(cfg.batch);
        let batch: Vec<&TrainExample> = idx.iter().map(|&i| &examples[i]).collect();
        let (b, grads) = batch_loss(
            lm,
            &meta,
            &tox,
            &batch,
            weights,
            cfg.ablation,
            cfg.ls_reduction,
            true,
        )?;
        let finite = [b.l_lm, b.l_s, b.l_c.unwrap_or(0.0), b.total]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite {
                step,
                detail: format!(
                    "L_LM={} L_s={} L_c={:?} total={}",
                    b.l_lm, b.l_s, b.l_c, b.total
                ),
            });
        }
        trace.push(LossRow {
            step,
            l_lm: b.l_lm,
            l_s: b.l_s,
            l_c: b.l_c,
            total: b.total,
            d_s_mean: b.d_s_mean,
            d_c: b.d_c,
        });
        let g = grads
            .expect("gradients requested")
            .factor_grads(&meta, &tox)?;
        let grefs: Vec<&Mat> = g.iter().collect();
        let mut params = trainable_mut(&mut meta, &mut tox);
        opt.update(&mut params, &grefs, &lrs)?;
    }
    Ok(HierarchicalRun { meta, tox, trace })
}

/// Margin statistics of a trained meta model on held-out examples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    /// Mean distance between the two entries' prefixes over offensive contexts.
    pub d_s_mean: f64,
    /// Distance between the class means of the index-0 prefix.
    pub d_c: f64,
    pub n_offensive: usize,
    pub n_clean: usize,
}

pub fn margin_report(
    lm: &LmParams,
    meta: &MetaPrefixModel,
    examples: &[DialogueExample],
    vocab: &Vocab,
) -> Result<MarginReport> {
    let rows: Vec<(Mat, Option<f64>, bool)> = examples
        .par_iter()
        .map(|ex| {
            let ctx = dialogue_context(vocab, &ex.c);
            let g0 = meta.generate(lm, false, &ctx)?.output;
            let ds = if ex.t_c {
                let g1 = meta.generate(lm, true, &ctx)?.output;
                Some(l2(&g0, &g1))
            } else {
                None
            };
            Ok((g0, ds, ex.t_c))
        })
        .collect::<Result<_>>()?;
    let n_offensive = rows.iter().filter(|r| r.2).count();
    let n_clean = rows.len() - n_offensive;
    if n_offensive == 0 || n_clean == 0 {
        return Err(Error::Empty(
            "margin report needs both context classes".into(),
        ));
    }
    let d_s_mean = rows.iter().filter_map(|r| r.1).sum::<f64>() / n_offensive as f64;
    let outs: Vec<Mat> = rows.iter().map(|r| r.0.clone()).collect();
    let labels: Vec<bool> = rows.iter().map(|r| r.2).collect();
    let d_c = class_mean_distance(&outs, &labels).expect("both classes present");
    Ok(MarginReport {
        d_s_mean,
        d_c,
        n_offensive,
        n_clean,
    })
}

/// Toxicity bank trained with the supervised likelihood-contrast recipe,
/// categories keyed by the response's own offensiveness.
pub fn train_toxicity_bank(
    lm: &LmParams,
    examples: &[TrainExample],
    prefix_cfg: &PrefixConfig,
    cfg: &BankTrainConfig,
) -> Result<BankTrainRun> {
    let pairs: Vec<(&[u32], &[u32], bool)> = examples
        .iter()
        .map(|e| (e.ctx.as_slice(), e.tgt.as_slice(), e.t_r))
        .collect();
    train_supervised_contrastive(lm, &pairs, prefix_cfg, cfg, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::{init_lm, LmConfig};

    fn toy() -> (LmParams, MetaPrefixModel, PrefixBank, Vec<TrainExample>) {
        let cfg = LmConfig {
            n_layers: 2,
            hidden: 16,
            n_heads: 2,
            vocab: 20,
            max_seq: 24,
            ff_mult: 2,
            seed: 11,
        };
        let lm = init_lm(&cfg).unwrap().frozen();
        let pc = PrefixConfig {
            len: 2,
            hidden: 4,
            init_std: 0.3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let meta = MetaPrefixModel::init(&pc, &cfg, 0.3, &mut rng);
        let tox = PrefixBank::init(&pc, cfg.prefix_dim(), &mut rng);
        let ex = |ctx: &[u32], tgt: &[u32], t_c, t_r, s_r| TrainExample {
            ctx: ctx.to_vec(),
            tgt: tgt.to_vec(),
            t_c,
            t_r,
            s_r,
        };
        let batch = vec![
            ex(&[1, 5, 6, 3], &[7, 8, 2], false, false, false),
            ex(&[1, 9, 3], &[10, 2], false, false, true),
            ex(&[1, 12, 6, 3], &[13, 6, 2], true, false, false),
            ex(&[1, 12, 14, 3], &[15, 12, 2], true, true, true),
        ];
        (lm, meta, tox, batch)
    }

    #[test]
    fn stance_loss_vanishes_without_offensive_contexts() {
        let (lm, meta, tox, ex) = toy();
        let clean: Vec<&TrainExample> = ex.iter().filter(|e| !e.t_c).collect();
        let w = LossWeights::default();
        let (b, _) = batch_loss(
            &lm,
            &meta,
            &tox,
            &clean,
            &w,
            Ablation::Full,
            LsReduction::BatchMean,
            false,
        )
        .unwrap();
        assert_eq!(b.l_s, 0.0);
        assert!(b.l_c.is_none());
        assert_eq!(
            stance_contrastive_loss(&lm, &meta, &clean, w.margin, LsReduction::BatchMean).unwrap(),
            0.0
        );
    }

    #[test]
    fn value_helpers_agree_with_batch_loss() {
        let (lm, meta, tox, ex) = toy();
        let batch: Vec<&TrainExample> = ex.iter().collect();
        let w = LossWeights::default();
        let (b, _) = batch_loss(
            &lm,
            &meta,
            &tox,
            &batch,
            &w,
            Ablation::Full,
            LsReduction::BatchMean,
            false,
        )
        .unwrap();
        assert!((lm_loss(&lm, &meta, &tox, &batch).unwrap() - b.l_lm).abs() < 1e-12);
        let ls =
            stance_contrastive_loss(&lm, &meta, &batch, w.margin, LsReduction::BatchMean).unwrap();
        assert!((ls - b.l_s).abs() < 1e-12);
        let lc = context_contrastive_loss(&lm, &meta, &batch, w.margin)
            .unwrap()
            .unwrap();
        assert!((lc - b.l_c.unwrap()).abs() < 1e-12);
        assert!(
            (total_loss(&lm, &meta, &tox, &batch, &w, Ablation::Full).unwrap() - b.total).abs()
                < 1e-12
        );
    }

    #[test]
    fn offensive_mean_rescales_the_stance_loss() {
        let (lm, meta, _, ex) = toy();
        let batch: Vec<&TrainExample> = ex.iter().collect();
        let a = stance_contrastive_loss(&lm, &meta, &batch, 0.8, LsReduction::BatchMean).unwrap();
        let b =
            stance_contrastive_loss(&lm, &meta, &batch, 0.8, LsReduction::OffensiveMean).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn total_gradient_matches_finite_differences() {
        let (lm, meta, tox, ex) = toy();
        let batch: Vec<&TrainExample> = ex.iter().collect();
        let w = LossWeights {
            margin: 5.0,
            ..LossWeights::default()
        };
        let (_, g) = batch_loss(
            &lm,
            &meta,
            &tox,
            &batch,
            &w,
            Ablation::Full,
            LsReduction::BatchMean,
            true,
        )
        .unwrap();
        let grads = g.unwrap().factor_grads(&meta, &tox).unwrap();
        let value = |meta: &MetaPrefixModel, tox: &PrefixBank| {
            batch_loss(
                &lm,
                meta,
                tox,
                &batch,
                &w,
                Ablation::Full,
                LsReduction::BatchMean,
                false,
            )
            .unwrap()
            .0
            .total
        };
        let h = 1e-5;
        for (t, gt) in grads.iter().enumerate() {
            for j in [0, gt.len() / 2, gt.len() - 1] {
                let (mut m1, mut t1) = (meta.clone(), tox.clone());
                trainable_mut(&mut m1, &mut t1)[t].as_mut_slice()[j] += h;
                let (mut m2, mut t2) = (meta.clone(), tox.clone());
                trainable_mut(&mut m2, &mut t2)[t].as_mut_slice()[j] -= h;
                let numeric = (value(&m1, &t1) - value(&m2, &t2)) / (2.0 * h);
                let analytic = gt.as_slice()[j];
                let err = (numeric - analytic).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    err < 1e-4,
                    "tensor {t}[{j}]: analytic {analytic} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn ablations_share_initialization_and_batches() {
        let (lm, _, tox, ex) = toy();
        let pc = PrefixConfig {
            len: 2,
            hidden: 4,
            init_std: 0.3,
        };
        let runs: Vec<HierarchicalRun> = Ablation::ALL
            .iter()
            .map(|&ablation| {
                let cfg = TrainConfig {
                    steps: 2,
                    batch: 4,
                    ablation,
                    ..TrainConfig::default()
                };
                train_hierarchical(&lm, &ex, &tox, &pc, &LossWeights::default(), &cfg).unwrap()
            })
            .collect();
        for r in &runs[1..] {
            let (a, b) = (&runs[0].trace[0], &r.trace[0]);
            assert_eq!((a.l_lm, a.l_s, a.l_c), (b.l_lm, b.l_s, b.l_c));
        }
        assert_ne!(runs[0].trace[1].l_lm, runs[3].trace[1].l_lm);
    }
}
