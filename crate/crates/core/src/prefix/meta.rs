// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::Rng;

use super::reparam::PrefixBank;
use super::{to_kv, PrefixConfig};
use crate::error::{Error, Result};
use crate::tensor::{add_matmul_tn, matmul, matmul_nt, Mat};
use crate::tinylm::{backward, run, Forward, LmConfig, LmParams, Trace};

/// Meta-prefix bank plus the readout that turns the LM's final hidden
/// states into a full-width prefix.
///
/// The generator runs the frozen LM over the context with a bank entry as
/// its key/value prefix, appends `M` learned readout embeddings as extra
/// input positions, and projects the final hidden states at those positions
/// from `E` to `D = 2LE` with one shared matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaPrefixModel {
    pub bank: PrefixBank,
    /// `M x E` embeddings fed at the readout positions.
    pub readout_embeddings: Mat,
    /// `E x D` projection shared by every readout slot.
    pub readout_projection: Mat,
}

impl MetaPrefixModel {
    pub fn init<R: Rng + ?Sized>(
        cfg: &PrefixConfig,
        lm: &LmConfig,
        readout_std: f64,
        rng: &mut R,
    ) -> Self {
        let d = lm.prefix_dim();
        let bank = PrefixBank::init(cfg, d, rng);
        let readout_embeddings = Mat::randn(cfg.len, lm.hidden, 0.02, rng);
        let readout_projection =
            Mat::randn(lm.hidden, d, readout_std / (lm.hidden as f64).sqrt(), rng);
        Self {
            bank,
            readout_embeddings,
            readout_projection,
        }
    }

    pub fn len(&self) -> usize {
        self.bank.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bank.is_empty()
    }

    pub fn check(&self, lm: &LmConfig) -> Result<()> {
        let (m, d, e) = (self.bank.len(), lm.prefix_dim(), lm.hidden);
        if self.bank.width() != d {
            return Err(Error::Shape(format!(
                "meta bank width {} != D {d}",
                self.bank.width()
            )));
        }
        self.readout_embeddings
            .check_shape(m, e, "readout embeddings")?;
        self.readout_projection
            .check_shape(e, d, "readout projection")
    }

    /// Differentiable generation: keeps the activations needed by
    /// [`StanceGeneration::backward`].
    pub fn generate(&self, lm: &LmParams, idx: bool, context: &[u32]) -> Result<StanceGeneration> {
        self.check(&lm.config)?;
        let (trace, readout, output) = readout_pass(
            lm,
            &self.bank.materialize(idx),
            &self.readout_embeddings,
            &self.readout_projection,
            context,
        )?;
        Ok(StanceGeneration {
            idx,
            trace,
            readout,
            output,
        })
    }

    pub fn zero_grads(&self) -> MetaGrads {
        let (m, d) = (self.bank.len(), self.bank.width());
        MetaGrads {
            bank: [Mat::zeros(m, d), Mat::zeros(m, d)],
            readout_embeddings: Mat::zeros(
                self.readout_embeddings.rows(),
                self.readout_embeddings.cols(),
            ),
            readout_projection: Mat::zeros(
                self.readout_projection.rows(),
                self.readout_projection.cols(),
            ),
        }
    }
}

fn readout_pass(
    lm: &LmParams,
    entry: &Mat,
    emb: &Mat,
    proj: &Mat,
    context: &[u32],
) -> Result<(Trace, Mat, Mat)> {
    if !lm.is_frozen() {
        return Err(Error::Config(
            "stance generation requires a frozen backbone".into(),
        ));
    }
    if context.is_empty() {
        return Err(Error::Empty("stance generation context".into()));
    }
    let kv = to_kv(entry, &lm.config)?;
    let trace = run(
        lm,
        context,
        Forward {
            prefix: Some(&kv),
            extra: Some(emb),
            position_offset: 0,
            skip_logits: true,
        },
    )?;
    let readout = trace.hidden.slice_rows(context.len(), trace.len());
    let output = matmul(&readout, proj);
    Ok((trace, readout, output))
}

/// The generation-time remainder of a trained meta model: entry 0 in
/// materialized form plus the readout. Entry 1 is not needed after training.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaInference {
    pub prefix: Mat,
    pub readout_embeddings: Mat,
    pub readout_projection: Mat,
}

impl MetaInference {
    pub fn from_model(meta: &MetaPrefixModel) -> Self {
        Self {
            prefix: meta.bank.materialize(false),
            readout_embeddings: meta.readout_embeddings.clone(),
            readout_projection: meta.readout_projection.clone(),
        }
    }

    pub fn generate(&self, lm: &LmParams, context: &[u32]) -> Result<Mat> {
        let (m, d, e) = (self.prefix.rows(), lm.config.prefix_dim(), lm.config.hidden);
        self.prefix.check_shape(m, d, "meta prefix")?;
        self.readout_embeddings
            .check_shape(m, e, "readout embeddings")?;
        self.readout_projection
            .check_shape(e, d, "readout projection")?;
        Ok(readout_pass(
            lm,
            &self.prefix,
            &self.readout_embeddings,
            &self.readout_projection,
            context,
        )?
        .2)
    }
}

/// One generated stance prefix with its forward activations.
pub struct StanceGeneration {
    pub idx: bool,
    trace: Trace,
    readout: Mat,
    /// The generated `M x D` prefix.
    pub output: Mat,
}

/// Gradients of the meta model. Bank gradients are with respect to the
/// materialized entries; pull them onto the factors with
/// [`crate::prefix::ReparamPrefix::backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct MetaGrads {
    pub bank: [Mat; 2],
    pub readout_embeddings: Mat,
    pub readout_projection: Mat,
}

impl MetaGrads {
    pub fn add_assign(&mut self, other: &MetaGrads) {
        self.bank[0].axpy(1.0, &other.bank[0]);
        self.bank[1].axpy(1.0, &other.bank[1]);
        self.readout_embeddings.axpy(1.0, &other.readout_embeddings);
        self.readout_projection.axpy(1.0, &other.readout_projection);
    }
}

impl StanceGeneration {
    /// Accumulate into `grads` the gradient of a loss whose gradient with
    /// respect to [`StanceGeneration::output`] is `dout`. The backbone
    /// receives no gradient.
    pub fn backward(
        &self,
        lm: &LmParams,
        meta: &MetaPrefixModel,
        dout: &Mat,
        grads: &mut MetaGrads,
    ) -> Result<()> {
        dout.check_shape(
            self.output.rows(),
            self.output.cols(),
            "generated prefix gradient",
        )?;
        add_matmul_tn(&mut grads.readout_projection, &self.readout, dout);
        let dread = matmul_nt(dout, &meta.readout_projection);
        let t = self.trace.len();
        let n_ctx = t - dread.rows();
        let mut dhidden = Mat::zeros(t, dread.cols());
        for i in 0..dread.rows() {
            dhidden.row_mut(n_ctx + i).copy_from_slice(dread.row(i));
        }
        let g = backward(lm, &self.trace, None, Some(&dhidden), false)?;
        debug_assert!(g.weights.is_none());
        let dkv = g.prefix.expect("meta prefix is nonempty").to_flat();
        grads.bank[usize::from(self.idx)].axpy(1.0, &dkv);
        grads
            .readout_embeddings
            .axpy(1.0, &g.extra.expect("readout slots are present"));
        Ok(())
    }
}

/// The stance prefix generated from `context` with meta entry `idx`.
pub fn generate_stance_prefix(
    lm: &LmParams,
    meta: &MetaPrefixModel,
    idx: bool,
    context: &[u32],
) -> Result<Mat> {
    Ok(meta.generate(lm, idx, context)?.output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::init_lm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (LmParams, MetaPrefixModel) {
        let cfg = LmConfig {
            n_layers: 2,
            hidden: 16,
            n_heads: 2,
            vocab: 20,
            max_seq: 16,
            ff_mult: 2,
            seed: 4,
        };
        let lm = init_lm(&cfg).unwrap().frozen();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pc = PrefixConfig {
            len: 2,
            hidden: 4,
            init_std: 0.5,
        };
        let meta = MetaPrefixModel::init(&pc, &cfg, 0.5, &mut rng);
        (lm, meta)
    }

    #[test]
    fn shape_and_context_dependence() {
        let (lm, meta) = setup();
        let a = generate_stance_prefix(&lm, &meta, false, &[1, 5, 6, 3]).unwrap();
        let b = generate_stance_prefix(&lm, &meta, false, &[1, 7, 3]).unwrap();
        assert_eq!(a.shape(), (2, 64));
        assert_ne!(a, b);
    }

    #[test]
    fn equal_entries_give_equal_outputs() {
        let (lm, mut meta) = setup();
        let e0 = meta.bank.entry(false).clone();
        meta.bank = PrefixBank::new(e0.clone(), e0).unwrap();
        let a = generate_stance_prefix(&lm, &meta, false, &[1, 5, 3]).unwrap();
        let b = generate_stance_prefix(&lm, &meta, true, &[1, 5, 3]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inference_half_matches_entry_zero() {
        let (lm, meta) = setup();
        let inf = MetaInference::from_model(&meta);
        let ctx = [1, 9, 4, 3];
        assert_eq!(
            inf.generate(&lm, &ctx).unwrap(),
            generate_stance_prefix(&lm, &meta, false, &ctx).unwrap()
        );
    }

    #[test]
    fn unfrozen_backbone_is_refused() {
        let (lm, meta) = setup();
        let thawed = init_lm(&lm.config).unwrap();
        assert!(generate_stance_prefix(&thawed, &meta, false, &[1, 3]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (lm, meta) = setup();
        let ctx = [1u32, 5, 9, 3];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let probe = Mat::randn(2, 64, 1.0, &mut rng);
        let f = |m: &MetaPrefixModel| -> f64 {
            let out = generate_stance_prefix(&lm, m, true, &ctx).unwrap();
            out.as_slice()
                .iter()
                .zip(probe.as_slice())
                .map(|(a, b)| a * b)
                .sum()
        };
        let gen = meta.generate(&lm, true, &ctx).unwrap();
        let mut grads = meta.zero_grads();
        gen.backward(&lm, &meta, &probe, &mut grads).unwrap();
        assert_eq!(grads.bank[0], Mat::zeros(2, 64));
        let fac = meta.bank.entry(true).backward(&grads.bank[1]).unwrap();
        let h = 1e-5;
        let check = |analytic: f64, up: MetaPrefixModel, down: MetaPrefixModel, what: &str| {
            let numeric = (f(&up) - f(&down)) / (2.0 * h);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
            assert!(err < 1e-4, "{what}: {analytic} vs {numeric}");
        };
        for j in [0, 3, 7] {
            let (mut up, mut down) = (meta.clone(), meta.clone());
            up.bank.entry_mut(true).factors_mut()[0].as_mut_slice()[j] += h;
            down.bank.entry_mut(true).factors_mut()[0].as_mut_slice()[j] -= h;
            check(fac.h_small.as_slice()[j], up, down, "h_small");
        }
        for j in [0, 10, 31] {
            let (mut up, mut down) = (meta.clone(), meta.clone());
            up.readout_embeddings.as_mut_slice()[j] += h;
            down.readout_embeddings.as_mut_slice()[j] -= h;
            check(
                grads.readout_embeddings.as_slice()[j],
                up,
                down,
                "readout_embeddings",
            );
        }
        for j in [0, 500, 1023] {
            let (mut up, mut down) = (meta.clone(), meta.clone());
            up.readout_projection.as_mut_slice()[j] += h;
            down.readout_projection.as_mut_slice()[j] -= h;
            check(
                grads.readout_projection.as_slice()[j],
                up,
                down,
                "readout_projection",
            );
        }
    }
}
