// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tiny decoder-only transformer used as the frozen backbone, the
//! uncontrolled baseline and the reference perplexity judge.

mod checkpoint;
mod kv;
mod model;
mod sample;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, LM_FORMAT};
pub use kv::{KvPrefix, LayerKv};
pub use model::{
    backward, forward, forward_with_hidden, init_lm, run, Forward, Grads, LayerWeights, LmConfig,
    LmParams, LmWeights, Trace,
};
pub use sample::{filtered_distribution, greedy, sample, sample_token, GenConfig};
pub use train::{train_lm, LmTrainConfig};

use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, Mat};

/// Negative log-likelihood of `target` after `context`, plus the gradient
/// seed at the logits. Logit row `i` predicts input token `i + 1`.
pub(crate) fn nll_from_logits(logits: &Mat, first_row: usize, target: &[u32]) -> (f64, Mat) {
    let mut d = Mat::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (k, &tok) in target.iter().enumerate() {
        let row = logits.row(first_row + k);
        let lse = log_sum_exp(row);
        total += lse - row[tok as usize];
        let drow = d.row_mut(first_row + k);
        for (dv, &x) in drow.iter_mut().zip(row) {
            *dv = (x - lse).exp();
        }
        drow[tok as usize] -= 1.0;
    }
    (total, d)
}

fn teacher_forced(context: &[u32], target: &[u32]) -> Result<Vec<u32>> {
    if target.is_empty() {
        return Err(Error::Empty("nll target".into()));
    }
    if context.is_empty() {
        return Err(Error::Empty("nll context (start with BOS)".into()));
    }
    let mut input = context.to_vec();
    input.extend_from_slice(&target[..target.len() - 1]);
    Ok(input)
}

/// Summed negative log-likelihood of `target` given `prefix` and `context`.
pub fn nll(
    params: &LmParams,
    context: &[u32],
    target: &[u32],
    prefix: Option<&KvPrefix>,
) -> Result<f64> {
    let input = teacher_forced(context, target)?;
    let logits = forward(params, &input, prefix)?;
    let (v, _) = nll_from_logits(&logits, context.len() - 1, target);
    Ok(v)
}

/// [`nll`] and its gradient. Weight gradients are only computed when
/// `weight_grads` is set; prefix gradients whenever a prefix is supplied.
pub fn nll_grad(
    params: &LmParams,
    context: &[u32],
    target: &[u32],
    prefix: Option<&KvPrefix>,
    weight_grads: bool,
) -> Result<(f64, Grads)> {
    let input = teacher_forced(context, target)?;
    if input.len() + prefix.map_or(0, KvPrefix::len) > params.config.max_seq {
        return Err(Error::SequenceOverflow {
            len: input.len() + prefix.map_or(0, KvPrefix::len),
            max_seq: params.config.max_seq,
        });
    }
    let trace = run(
        params,
        &input,
        Forward {
            prefix,
            ..Default::default()
        },
    )?;
    let logits = trace.logits.as_ref().expect("logits requested");
    let (v, d) = nll_from_logits(logits, context.len() - 1, target);
    let grads = backward(params, &trace, Some(&d), None, weight_grads)?;
    Ok((v, grads))
}

/// `exp` of the mean per-token negative log-likelihood of `text` after a
/// lone `bos` token.
pub fn perplexity(params: &LmParams, bos: u32, text: &[u32]) -> Result<f64> {
    perplexity_given(params, &[bos], text)
}

/// Perplexity of `text` conditioned on `context`.
pub fn perplexity_given(params: &LmParams, context: &[u32], text: &[u32]) -> Result<f64> {
    let total = nll(params, context, text, None)?;
    Ok((total / text.len() as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> LmConfig {
        LmConfig {
            n_layers: 2,
            hidden: 16,
            n_heads: 2,
            vocab: 20,
            max_seq: 24,
            ff_mult: 2,
            seed: 3,
        }
    }

    fn uniform() -> LmParams {
        let c = cfg();
        LmParams::new(c.clone(), LmWeights::zeros(&c)).unwrap()
    }

    #[test]
    fn uniform_model_costs_ln_v_per_token() {
        let p = uniform();
        let v = nll(&p, &[1, 4], &[5, 6, 7], None).unwrap();
        assert!((v - 3.0 * 20f64.ln()).abs() < 1e-12);
        assert!((perplexity(&p, 1, &[5, 6, 7]).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn nll_matches_stepwise_product() {
        let p = init_lm(&cfg()).unwrap();
        let (c, r) = (vec![1u32, 9, 4, 3], vec![7u32, 8, 2]);
        let total = nll(&p, &c, &r, None).unwrap();
        let mut seq = c.clone();
        let mut log_prob = 0.0;
        for &tok in &r {
            let logits = forward(&p, &seq, None).unwrap();
            let last = logits.row(seq.len() - 1);
            log_prob += last[tok as usize] - log_sum_exp(last);
            seq.push(tok);
        }
        assert!((total + log_prob).abs() < 1e-10);
    }

    #[test]
    fn doubling_the_target_raises_nll() {
        let p = init_lm(&cfg()).unwrap();
        let r = [7u32, 8, 2];
        let rr = [7u32, 8, 2, 7, 8, 2];
        assert!(nll(&p, &[1], &rr, None).unwrap() > nll(&p, &[1], &r, None).unwrap());
    }

    #[test]
    fn empty_target_or_context_errors() {
        let p = uniform();
        assert!(matches!(nll(&p, &[1], &[], None), Err(Error::Empty(_))));
        assert!(matches!(nll(&p, &[], &[3], None), Err(Error::Empty(_))));
    }

    #[test]
    fn probabilities_are_normalized() {
        let p = init_lm(&cfg()).unwrap();
        let logits = forward(&p, &[1, 2, 3, 4, 5], None).unwrap();
        for i in 0..logits.rows() {
            let mut row = logits.row(i).to_vec();
            crate::tensor::softmax_in_place(&mut row);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_token_perplexity_is_exp_nll() {
        let p = init_lm(&cfg()).unwrap();
        let v = nll(&p, &[1], &[6], None).unwrap();
        assert!((perplexity(&p, 1, &[6]).unwrap() - v.exp()).abs() < 1e-12);
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let mut p = init_lm(&cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let prefix = KvPrefix::from_flat(&Mat::randn(2, 64, 0.5, &mut rng), 2, 16).unwrap();
        let (c, r) = ([1u32, 9, 4, 3], [7u32, 8, 2]);
        let (_, g) = nll_grad(&p, &c, &r, Some(&prefix), true).unwrap();
        let g = g.weights.unwrap();
        let h = 1e-5;
        let names: Vec<String> = g.named().into_iter().map(|(n, _)| n).collect();
        for (ti, name) in names.iter().enumerate() {
            let n = g.named()[ti].1.len();
            for &j in &[0, n / 2, n - 1] {
                let analytic = g.named()[ti].1.as_slice()[j];
                let orig = p.weights.tensors_mut()[ti].as_slice()[j];
                p.weights.tensors_mut()[ti].as_mut_slice()[j] = orig + h;
                let up = nll(&p, &c, &r, Some(&prefix)).unwrap();
                p.weights.tensors_mut()[ti].as_mut_slice()[j] = orig - h;
                let down = nll(&p, &c, &r, Some(&prefix)).unwrap();
                p.weights.tensors_mut()[ti].as_mut_slice()[j] = orig;
                let numeric = (up - down) / (2.0 * h);
                let err =
                    (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()).max(1e-6));
                assert!(
                    err < 1e-4,
                    "{name}[{j}]: analytic {analytic} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn prefix_gradient_matches_finite_differences() {
        let p = init_lm(&cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let flat = Mat::randn(3, 64, 0.5, &mut rng);
        let (c, r) = ([1u32, 9, 4, 3], [7u32, 8, 2]);
        let prefix = KvPrefix::from_flat(&flat, 2, 16).unwrap();
        let (_, g) = nll_grad(&p, &c, &r, Some(&prefix), false).unwrap();
        assert!(g.weights.is_none());
        let gflat = g.prefix.unwrap().to_flat();
        let h = 1e-5;
        for j in [0, 17, 40, 63, 64, 100, 191] {
            let mut up = flat.clone();
            up.as_mut_slice()[j] += h;
            let mut down = flat.clone();
            down.as_mut_slice()[j] -= h;
            let fu = nll(&p, &c, &r, Some(&KvPrefix::from_flat(&up, 2, 16).unwrap())).unwrap();
            let fd = nll(
                &p,
                &c,
                &r,
                Some(&KvPrefix::from_flat(&down, 2, 16).unwrap()),
            )
            .unwrap();
            let numeric = (fu - fd) / (2.0 * h);
            let analytic = gflat.as_slice()[j];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                err < 1e-4,
                "coord {j}: analytic {analytic} numeric {numeric}"
            );
        }
    }

    #[test]
    fn extra_embedding_gradient_matches_finite_differences() {
        let p = init_lm(&cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let extra = Mat::randn(2, 16, 0.3, &mut rng);
        let probe = Mat::randn(6, 16, 1.0, &mut rng);
        let f = |x: &Mat| -> f64 {
            let t = run(
                &p,
                &[1, 5, 6, 3],
                Forward {
                    extra: Some(x),
                    skip_logits: true,
                    ..Default::default()
                },
            )
            .unwrap();
            t.hidden
                .as_slice()
                .iter()
                .zip(probe.as_slice())
                .map(|(a, b)| a * b)
                .sum()
        };
        let t = run(
            &p,
            &[1, 5, 6, 3],
            Forward {
                extra: Some(&extra),
                skip_logits: true,
                ..Default::default()
            },
        )
        .unwrap();
        let g = backward(&p, &t, None, Some(&probe), false)
            .unwrap()
            .extra
            .unwrap();
        let h = 1e-5;
        for j in 0..extra.len() {
            let mut up = extra.clone();
            up.as_mut_slice()[j] += h;
            let mut down = extra.clone();
            down.as_mut_slice()[j] -= h;
            let numeric = (f(&up) - f(&down)) / (2.0 * h);
            let analytic = g.as_slice()[j];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                err < 1e-4,
                "coord {j}: analytic {analytic} numeric {numeric}"
            );
        }
    }

    #[test]
    fn kv_cache_equivalence() {
        let p = init_lm(&cfg()).unwrap();
        let s = [1u32, 8, 9, 10];
        let x = [11u32, 12, 13];
        let own = run(&p, &s, Forward::default()).unwrap().own_kv();
        let injected = run(
            &p,
            &x,
            Forward {
                prefix: Some(&own),
                position_offset: s.len(),
                ..Default::default()
            },
        )
        .unwrap()
        .logits
        .unwrap();
        let mut sx = s.to_vec();
        sx.extend_from_slice(&x);
        let full = forward(&p, &sx, None).unwrap();
        assert!(injected.max_abs_diff(&full.slice_rows(s.len(), sx.len())) < 1e-10);
    }

    #[test]
    fn causality() {
        let p = init_lm(&cfg()).unwrap();
        let a = forward(&p, &[1, 2, 3, 4, 5, 6], None).unwrap();
        let b = forward(&p, &[1, 2, 3, 4, 6, 5], None).unwrap();
        assert_eq!(a.slice_rows(0, 4), b.slice_rows(0, 4));
        assert_ne!(a.slice_rows(4, 6), b.slice_rows(4, 6));
    }
}
