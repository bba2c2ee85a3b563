// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mean-pooled embedding classifier for context offensiveness.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::DialogueExample;
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub embed: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            embed: 16,
            hidden: 16,
            epochs: 8,
            batch: 32,
            lr: 1e-2,
            threshold: 0.5,
            seed: 42,
        }
    }
}

/// `sigmoid(w2 . tanh(W1^T mean(emb[c]) + b1) + b2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffenseClassifier {
    pub emb: Mat,
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
    pub threshold: f64,
}

struct Cache {
    pooled: Vec<f64>,
    h: Vec<f64>,
    p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub n: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl OffenseClassifier {
    pub fn init(vocab: usize, cfg: &ClassifierConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Self {
            emb: Mat::randn(vocab, cfg.embed, 0.1, &mut rng),
            w1: Mat::randn(
                cfg.embed,
                cfg.hidden,
                1.0 / (cfg.embed as f64).sqrt(),
                &mut rng,
            ),
            b1: Mat::zeros(1, cfg.hidden),
            w2: Mat::randn(cfg.hidden, 1, 1.0 / (cfg.hidden as f64).sqrt(), &mut rng),
            b2: Mat::zeros(1, 1),
            threshold: cfg.threshold,
        }
    }

    fn forward(&self, c: &[u32]) -> Result<Cache> {
        if c.is_empty() {
            return Err(Error::Empty("classifier input".into()));
        }
        let (e, h) = (self.emb.cols(), self.w1.cols());
        let mut pooled = vec![0.0; e];
        for &t in c {
            if t as usize >= self.emb.rows() {
                return Err(Error::UnknownToken {
                    token: t,
                    vocab: self.emb.rows(),
                });
            }
            for (p, v) in pooled.iter_mut().zip(self.emb.row(t as usize)) {
                *p += v / c.len() as f64;
            }
        }
        let mut hid = self.b1.as_slice().to_vec();
        for (i, p) in pooled.iter().enumerate() {
            for (j, hv) in hid.iter_mut().enumerate() {
                *hv += p * self.w1[(i, j)];
            }
        }
        hid.iter_mut().for_each(|v| *v = v.tanh());
        let mut z = self.b2[(0, 0)];
        for j in 0..h {
            z += hid[j] * self.w2[(j, 0)];
        }
        Ok(Cache {
            pooled,
            h: hid,
            p: 1.0 / (1.0 + (-z).exp()),
        })
    }

    /// Probability that `c` is offensive.
    pub fn prob(&self, c: &[u32]) -> Result<f64> {
        Ok(self.forward(c)?.p)
    }

    pub fn predict(&self, c: &[u32]) -> Result<bool> {
        Ok(self.prob(c)? >= self.threshold)
    }

    fn tensors_mut(&mut self) -> [&mut Mat; 5] {
        [
            &mut self.emb,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    /// Mean binary cross-entropy and its gradient in `tensors_mut` order.
    fn loss_grad(&self, batch: &[(&[u32], bool)]) -> Result<(f64, [Mat; 5])> {
        let mut g = [
            Mat::zeros(self.emb.rows(), self.emb.cols()),
            Mat::zeros(self.w1.rows(), self.w1.cols()),
            Mat::zeros(1, self.b1.cols()),
            Mat::zeros(self.w2.rows(), 1),
            Mat::zeros(1, 1),
        ];
        let n = batch.len() as f64;
        let mut loss = 0.0;
        for &(c, y) in batch {
            let cache = self.forward(c)?;
            let p = cache.p.clamp(1e-12, 1.0 - 1e-12);
            loss -= if y { p.ln() } else { (1.0 - p).ln() } / n;
            let dz = (cache.p - f64::from(u8::from(y))) / n;
            g[4][(0, 0)] += dz;
            let mut dpre = vec![0.0; cache.h.len()];
            for (j, hj) in cache.h.iter().enumerate() {
                g[3][(j, 0)] += dz * hj;
                dpre[j] = dz * self.w2[(j, 0)] * (1.0 - hj * hj);
                g[2][(0, j)] += dpre[j];
            }
            let mut dpool = vec![0.0; cache.pooled.len()];
            for (i, pi) in cache.pooled.iter().enumerate() {
                for (j, dj) in dpre.iter().enumerate() {
                    g[1][(i, j)] += pi * dj;
                    dpool[i] += self.w1[(i, j)] * dj;
                }
            }
            for &t in c {
                for (gv, d) in g[0].row_mut(t as usize).iter_mut().zip(&dpool) {
                    *gv += d / c.len() as f64;
                }
            }
        }
        Ok((loss, g))
    }

    pub fn evaluate(&self, examples: &[DialogueExample]) -> Result<ClassifierMetrics> {
        if examples.is_empty() {
            return Err(Error::Empty("classifier evaluation set".into()));
        }
        let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
        for ex in examples {
            match (self.predict(&ex.c)?, ex.t_c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fneg += 1,
            }
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fneg);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Ok(ClassifierMetrics {
            n: examples.len(),
            accuracy: ratio(tp + tn, examples.len()),
            precision,
            recall,
            f1,
        })
    }

    pub fn to_tensors(&self) -> BTreeMap<String, Mat> {
        let mut m = BTreeMap::new();
        m.insert("classifier.emb".into(), self.emb.clone());
        m.insert("classifier.w1".into(), self.w1.clone());
        m.insert("classifier.b1".into(), self.b1.clone());
        m.insert("classifier.w2".into(), self.w2.clone());
        m.insert("classifier.b2".into(), self.b2.clone());
        m
    }

    pub fn from_tensors(t: &BTreeMap<String, Mat>, threshold: f64) -> Result<Self> {
        let get = |k: &str| {
            t.get(k)
                .cloned()
                .ok_or_else(|| Error::Mismatch(format!("classifier tensor {k} missing")))
        };
        let c = Self {
            emb: get("classifier.emb")?,
            w1: get("classifier.w1")?,
            b1: get("classifier.b1")?,
            w2: get("classifier.w2")?,
            b2: get("classifier.b2")?,
            threshold,
        };
        let (e, h) = (c.emb.cols(), c.w1.cols());
        c.w1.check_shape(e, h, "classifier.w1")?;
        c.b1.check_shape(1, h, "classifier.b1")?;
        c.w2.check_shape(h, 1, "classifier.w2")?;
        c.b2.check_shape(1, 1, "classifier.b2")?;
        Ok(c)
    }
}

/// Train on the context labels of `examples` (normally the balanced
/// classifier split).
pub fn train_offense_classifier(
    examples: &[DialogueExample],
    vocab_size: usize,
    cfg: &ClassifierConfig,
) -> Result<OffenseClassifier> {
    let n_pos = examples.iter().filter(|e| e.t_c).count();
    if n_pos == 0 || n_pos == examples.len() {
        return Err(Error::Config(
            "classifier training needs both context classes".into(),
        ));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("classifier batch must be positive".into()));
    }
    let mut clf = OffenseClassifier::init(vocab_size, cfg);
    let sizes: Vec<usize> = clf.tensors_mut().iter().map(|t| t.len()).collect();
    let mut opt = AdamW::new(AdamWConfig::default(), &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc1a5);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<(&[u32], bool)> = chunk
                .iter()
                .map(|&i| (examples[i].c.as_slice(), examples[i].t_c))
                .collect();
            let (_, g) = clf.loss_grad(&batch)?;
            let grefs: Vec<&Mat> = g.iter().collect();
            let mut params = clf.tensors_mut();
            opt.update(&mut params, &grefs, &[cfg.lr; 5])?;
        }
    }
    Ok(clf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = ClassifierConfig {
            embed: 4,
            hidden: 3,
            ..Default::default()
        };
        let clf = OffenseClassifier::init(10, &cfg);
        let data: Vec<(Vec<u32>, bool)> = vec![
            (vec![1, 2, 3], true),
            (vec![4, 4, 5, 6], false),
            (vec![7], true),
        ];
        let batch: Vec<(&[u32], bool)> = data.iter().map(|(c, y)| (c.as_slice(), *y)).collect();
        let (_, g) = clf.loss_grad(&batch).unwrap();
        let h = 1e-6;
        for t in 0..5 {
            let n = g[t].len();
            for j in [0, n / 2, n - 1] {
                let mut up = clf.clone();
                up.tensors_mut()[t].as_mut_slice()[j] += h;
                let mut down = clf.clone();
                down.tensors_mut()[t].as_mut_slice()[j] -= h;
                let numeric = (up.loss_grad(&batch).unwrap().0 - down.loss_grad(&batch).unwrap().0)
                    / (2.0 * h);
                let analytic = g[t].as_slice()[j];
                assert!(
                    (numeric - analytic).abs() < 1e-6 + 1e-4 * analytic.abs(),
                    "tensor {t}[{j}]"
                );
            }
        }
    }

    #[test]
    fn single_class_data_is_rejected() {
        let ex = DialogueExample {
            c: vec![5],
            r: vec![5],
            t_c: false,
            t_r: false,
            s_r: Some(false),
            stance4: crate::corpus::Stance::Comment,
        };
        assert!(train_offense_classifier(&[ex], 10, &ClassifierConfig::default()).is_err());
    }
}
