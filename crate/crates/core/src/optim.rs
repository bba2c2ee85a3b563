// SPDX-License-Identifier: MIT OR Apache-2.0

//! Adaptive-moment optimizer with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
        }
    }
}

/// Moment state for one ordered list of tensors.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, shapes: &[usize]) -> Self {
        Self {
            cfg,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(cfg: AdamWConfig, params: &[&Mat]) -> Self {
        let shapes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        Self::new(cfg, &shapes)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `lrs[i]` is the learning rate of tensor `i`, which lets a
    /// single optimizer carry parameter groups with different rates.
    pub fn update(&mut self, params: &mut [&mut Mat], grads: &[&Mat], lrs: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() || lrs.len() != params.len()
        {
            return Err(Error::Shape("optimizer group size mismatch".into()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != p.len() {
                return Err(Error::Shape(format!("optimizer tensor {i} changed size")));
            }
        }
        self.step += 1;
        let c = &self.cfg;
        let mut scale = 1.0;
        if c.clip_norm > 0.0 {
            let norm = global_norm(grads);
            if norm > c.clip_norm {
                scale = c.clip_norm / norm;
            }
        }
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let lr = lrs[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
                let gj = gj * scale;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *w);
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[&Mat]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.as_slice())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first step is lr * g / |g| per coordinate.
        let mut p = Mat::from_vec(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        let g = Mat::from_vec(1, 3, vec![0.3, -0.1, 4.0]).unwrap();
        let cfg = AdamWConfig {
            clip_norm: 0.0,
            eps: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::for_params(cfg, &[&p]);
        opt.update(&mut [&mut p], &[&g], &[0.01]).unwrap();
        assert!((p[(0, 0)] - 0.99).abs() < 1e-12);
        assert!((p[(0, 1)] + 1.99).abs() < 1e-12);
        assert!((p[(0, 2)] - 0.49).abs() < 1e-12);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut p = Mat::from_vec(1, 1, vec![2.0]).unwrap();
        let g = Mat::zeros(1, 1);
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut opt = AdamW::for_params(cfg, &[&p]);
        opt.update(&mut [&mut p], &[&g], &[0.5]).unwrap();
        assert!((p[(0, 0)] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Mat::from_vec(1, 2, vec![3.0, -4.0]).unwrap();
        let mut opt = AdamW::for_params(AdamWConfig::default(), &[&p]);
        for _ in 0..2000 {
            let g = p.scaled(2.0);
            opt.update(&mut [&mut p], &[&g], &[0.05]).unwrap();
        }
        assert!(p.norm() < 1e-2, "{p:?}");
    }
}
