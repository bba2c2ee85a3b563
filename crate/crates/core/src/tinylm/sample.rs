// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kv::KvPrefix;
use super::model::{run, Forward, LmParams};
use crate::error::{Error, Result};
use crate::tensor::softmax_in_place;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub top_k: usize,
    pub top_p: f64,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub num_completions: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            top_k: 50,
            top_p: 0.9,
            temperature: 1.0,
            max_new_tokens: 10,
            num_completions: 10,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!(
                "top_p {} outside (0, 1]",
                self.top_p
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.num_completions == 0 {
            return Err(Error::Config("num_completions must be at least 1".into()));
        }
        Ok(())
    }
}

/// The filtered next-token distribution as `(token, probability)` pairs in
/// descending probability order.
pub fn filtered_distribution(logits: &[f64], gen: &GenConfig) -> Vec<(u32, f64)> {
    let mut probs: Vec<f64> = logits.iter().map(|x| x / gen.temperature).collect();
    softmax_in_place(&mut probs);
    let mut order: Vec<u32> = (0..probs.len() as u32).collect();
    // Stable sort keeps lower ids first among ties.
    order.sort_by(|&a, &b| probs[b as usize].total_cmp(&probs[a as usize]));
    order.truncate(gen.top_k.min(order.len()));
    let kept_mass: f64 = order.iter().map(|&t| probs[t as usize]).sum();
    let mut out = Vec::with_capacity(order.len());
    let mut cum = 0.0;
    for &t in &order {
        let p = probs[t as usize] / kept_mass;
        out.push((t, p));
        cum += p;
        if cum >= gen.top_p {
            break;
        }
    }
    let z: f64 = out.iter().map(|(_, p)| p).sum();
    out.iter_mut().for_each(|(_, p)| *p /= z);
    out
}

/// Draw one token from `logits` after temperature, top-k and top-p filtering.
pub fn sample_token<R: Rng + ?Sized>(logits: &[f64], gen: &GenConfig, rng: &mut R) -> u32 {
    let mut dist = filtered_distribution(logits, gen);
    // Walking the kept tokens in id order makes a shared seed pick the same
    // token under nearby distributions.
    dist.sort_unstable_by_key(|&(t, _)| t);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(t, p) in &dist {
        acc += p;
        if u < acc {
            return t;
        }
    }
    dist.last()
        .expect("at least one token survives filtering")
        .0
}

fn decode(
    params: &LmParams,
    context: &[u32],
    prefix: Option<&KvPrefix>,
    max_new: usize,
    eos: u32,
    mut pick: impl FnMut(&[f64]) -> u32,
) -> Result<Vec<u32>> {
    if context.is_empty() {
        return Err(Error::Empty("generation context".into()));
    }
    let max_seq = params.config.max_seq;
    let mut out = Vec::new();
    let mut trace = run(
        params,
        context,
        Forward {
            prefix,
            ..Default::default()
        },
    )?;
    let mut pos = context.len();
    while out.len() < max_new {
        let logits = trace.logits.as_ref().expect("logits requested");
        let tok = pick(logits.row(logits.rows() - 1));
        if tok == eos {
            break;
        }
        out.push(tok);
        if pos + 1 > max_seq || out.len() == max_new {
            break;
        }
        let cache = trace.present();
        trace = run(
            params,
            &[tok],
            Forward {
                prefix: Some(&cache),
                position_offset: pos,
                ..Default::default()
            },
        )?;
        pos += 1;
    }
    Ok(out)
}

/// Sample a continuation of `context`, stopping at `eos` (not included) or
/// after `gen.max_new_tokens` tokens.
pub fn sample(
    params: &LmParams,
    context: &[u32],
    prefix: Option<&KvPrefix>,
    gen: &GenConfig,
    eos: u32,
    seed: u64,
) -> Result<Vec<u32>> {
    gen.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    decode(params, context, prefix, gen.max_new_tokens, eos, |l| {
        sample_token(l, gen, &mut rng)
    })
}

/// Argmax decoding.
pub fn greedy(
    params: &LmParams,
    context: &[u32],
    prefix: Option<&KvPrefix>,
    max_new: usize,
    eos: u32,
) -> Result<Vec<u32>> {
    decode(params, context, prefix, max_new, eos, |l| {
        let mut best = 0;
        for (i, v) in l.iter().enumerate() {
            if *v > l[best] {
                best = i;
            }
        }
        best as u32
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::{forward, init_lm, LmConfig};

    #[test]
    fn top_p_keeps_smallest_covering_set() {
        let logits = [0.5f64.ln(), 0.3f64.ln(), 0.15f64.ln(), 0.05f64.ln()];
        let gen = GenConfig {
            top_p: 0.75,
            ..Default::default()
        };
        let d = filtered_distribution(&logits, &gen);
        assert_eq!(d.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1]);
        assert!((d[0].1 - 0.625).abs() < 1e-12);
        // top_p below the best probability still keeps the best token.
        let d = filtered_distribution(
            &logits,
            &GenConfig {
                top_p: 0.01,
                ..Default::default()
            },
        );
        assert_eq!(d, vec![(0, 1.0)]);
    }

    #[test]
    fn top_k_one_is_greedy() {
        let cfg = LmConfig {
            vocab: 20,
            hidden: 16,
            n_heads: 2,
            ..Default::default()
        };
        let p = init_lm(&cfg).unwrap();
        let gen = GenConfig {
            top_k: 1,
            max_new_tokens: 8,
            ..Default::default()
        };
        let ctx = [1, 7, 8, 3];
        let g = greedy(&p, &ctx, None, 8, 2).unwrap();
        for seed in 0..5 {
            assert_eq!(sample(&p, &ctx, None, &gen, 2, seed).unwrap(), g);
        }
    }

    #[test]
    fn cached_decoding_matches_full_recompute() {
        let cfg = LmConfig {
            vocab: 20,
            hidden: 16,
            n_heads: 2,
            ..Default::default()
        };
        let p = init_lm(&cfg).unwrap();
        let ctx = vec![1u32, 7, 8, 3];
        let g = greedy(&p, &ctx, None, 6, 99).unwrap();
        let mut seq = ctx.clone();
        for _ in 0..6 {
            let logits = forward(&p, &seq, None).unwrap();
            let last = logits.row(seq.len() - 1);
            let best = (0..last.len()).fold(0, |b, i| if last[i] > last[b] { i } else { b });
            seq.push(best as u32);
        }
        assert_eq!(&seq[ctx.len()..], &g[..]);
    }

    #[test]
    fn invalid_gen_configs() {
        assert!(GenConfig {
            top_k: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(GenConfig {
            top_p: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(GenConfig {
            top_p: 1.1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(GenConfig {
            temperature: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
