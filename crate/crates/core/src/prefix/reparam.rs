// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::Rng;

use super::PrefixConfig;
use crate::error::{Error, Result};
use crate::tensor::{add_matmul_tn, matmul, matmul_nt, Mat};

/// A prefix factored as `h_small (M x P) * W (P x D)`.
///
/// The materialized product is recomputed from the factors on every read, so
/// it can never go stale.
#[derive(Clone, Debug, PartialEq)]
pub struct ReparamPrefix {
    h_small: Mat,
    w: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReparamGrads {
    pub h_small: Mat,
    pub w: Mat,
}

impl ReparamPrefix {
    pub fn new(h_small: Mat, w: Mat) -> Result<Self> {
        if h_small.cols() != w.rows() {
            return Err(Error::Shape(format!(
                "h_small is {}x{} but W is {}x{}",
                h_small.rows(),
                h_small.cols(),
                w.rows(),
                w.cols()
            )));
        }
        if h_small.rows() == 0 {
            return Err(Error::Shape("prefix length must be at least 1".into()));
        }
        Ok(Self { h_small, w })
    }

    /// Unit-variance `h_small` and a projection scaled so that materialized
    /// entries have standard deviation `cfg.init_std`.
    pub fn init<R: Rng + ?Sized>(cfg: &PrefixConfig, d: usize, rng: &mut R) -> Self {
        let h_small = Mat::randn(cfg.len, cfg.hidden, 1.0, rng);
        let w = Mat::randn(
            cfg.hidden,
            d,
            cfg.init_std / (cfg.hidden as f64).sqrt(),
            rng,
        );
        Self { h_small, w }
    }

    pub fn len(&self) -> usize {
        self.h_small.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.w.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w.rows()
    }

    pub fn h_small(&self) -> &Mat {
        &self.h_small
    }

    pub fn w(&self) -> &Mat {
        &self.w
    }

    pub fn materialize(&self) -> Mat {
        matmul(&self.h_small, &self.w)
    }

    /// Pull a gradient on the materialized prefix back onto both factors.
    pub fn backward(&self, dflat: &Mat) -> Result<ReparamGrads> {
        dflat.check_shape(self.len(), self.width(), "prefix gradient")?;
        let h_small = matmul_nt(dflat, &self.w);
        let mut w = Mat::zeros(self.w.rows(), self.w.cols());
        add_matmul_tn(&mut w, &self.h_small, dflat);
        Ok(ReparamGrads { h_small, w })
    }

    pub fn factors_mut(&mut self) -> [&mut Mat; 2] {
        [&mut self.h_small, &mut self.w]
    }

    pub fn factors(&self) -> [&Mat; 2] {
        [&self.h_small, &self.w]
    }
}

/// Two same-shaped prefixes addressed by a binary index.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixBank {
    entries: [ReparamPrefix; 2],
}

impl PrefixBank {
    pub fn new(e0: ReparamPrefix, e1: ReparamPrefix) -> Result<Self> {
        if e0.h_small.shape() != e1.h_small.shape() || e0.w.shape() != e1.w.shape() {
            return Err(Error::Shape(
                "bank entries must have identical shapes".into(),
            ));
        }
        Ok(Self { entries: [e0, e1] })
    }

    pub fn init<R: Rng + ?Sized>(cfg: &PrefixConfig, d: usize, rng: &mut R) -> Self {
        let e0 = ReparamPrefix::init(cfg, d, rng);
        let e1 = ReparamPrefix::init(cfg, d, rng);
        Self { entries: [e0, e1] }
    }

    pub fn entry(&self, idx: bool) -> &ReparamPrefix {
        &self.entries[usize::from(idx)]
    }

    pub fn entry_mut(&mut self, idx: bool) -> &mut ReparamPrefix {
        &mut self.entries[usize::from(idx)]
    }

    pub fn materialize(&self, idx: bool) -> Mat {
        self.entry(idx).materialize()
    }

    pub fn len(&self) -> usize {
        self.entries[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.entries[0].width()
    }

    /// The four factor tensors, entry 0 first.
    pub fn factors(&self) -> [&Mat; 4] {
        let [a, b] = self.entries[0].factors();
        let [c, d] = self.entries[1].factors();
        [a, b, c, d]
    }

    pub fn factors_mut(&mut self) -> [&mut Mat; 4] {
        let [e0, e1] = &mut self.entries;
        let [a, b] = e0.factors_mut();
        let [c, d] = e1.factors_mut();
        [a, b, c, d]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_product() {
        let h = Mat::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let w = Mat::from_vec(2, 3, vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        let rp = ReparamPrefix::new(h, w).unwrap();
        assert_eq!(rp.materialize().as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn zero_factor_gives_zero_prefix() {
        let mut w = Mat::zeros(2, 4);
        w[(0, 0)] = 1.0;
        w[(1, 1)] = 1.0;
        let rp = ReparamPrefix::new(Mat::zeros(3, 2), w).unwrap();
        assert_eq!(rp.materialize(), Mat::zeros(3, 4));
    }

    #[test]
    fn shape_mismatch_errors() {
        assert!(ReparamPrefix::new(Mat::zeros(1, 2), Mat::zeros(3, 4)).is_err());
    }

    #[test]
    fn factor_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rp = ReparamPrefix::new(
            Mat::randn(2, 3, 1.0, &mut rng),
            Mat::randn(3, 4, 1.0, &mut rng),
        )
        .unwrap();
        let probe = Mat::randn(2, 4, 1.0, &mut rng);
        // f = sum(probe * materialized^2)
        let f = |r: &ReparamPrefix| -> f64 {
            r.materialize()
                .as_slice()
                .iter()
                .zip(probe.as_slice())
                .map(|(x, p)| p * x * x)
                .sum()
        };
        let out = rp.materialize();
        let mut d = Mat::zeros(2, 4);
        for (i, v) in d.as_mut_slice().iter_mut().enumerate() {
            *v = 2.0 * probe.as_slice()[i] * out.as_slice()[i];
        }
        let g = rp.backward(&d).unwrap();
        let h = 1e-6;
        for which in 0..2 {
            let n = rp.factors()[which].len();
            for j in 0..n {
                let mut up = rp.clone();
                up.factors_mut()[which].as_mut_slice()[j] += h;
                let mut down = rp.clone();
                down.factors_mut()[which].as_mut_slice()[j] -= h;
                let numeric = (f(&up) - f(&down)) / (2.0 * h);
                let analytic = if which == 0 { &g.h_small } else { &g.w }.as_slice()[j];
                let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
                assert!(err < 1e-4, "factor {which}[{j}]: {analytic} vs {numeric}");
            }
        }
    }

    #[test]
    fn init_scale_tracks_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = PrefixConfig {
            len: 40,
            hidden: 64,
            init_std: 0.2,
        };
        let rp = ReparamPrefix::init(&cfg, 200, &mut rng);
        let m = rp.materialize();
        let std = (m.as_slice().iter().map(|v| v * v).sum::<f64>() / m.len() as f64).sqrt();
        assert!((std - 0.2).abs() < 0.03, "{std}");
    }
}
