// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pre-LayerNorm decoder-only transformer with learned absolute positions.
//!
//! Every layer can attend over extra key/value slots supplied as a
//! [`KvPrefix`]. Prefix slots take no position and produce no logits; token
//! positions start at `position_offset`. Inputs may also carry raw embedding
//! rows appended after the tokens (used for the readout slots of the stance
//! prefix generator).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::kv::{KvPrefix, LayerKv};
use crate::error::{Error, Result};
use crate::tensor::{add_matmul_nt, add_matmul_tn, gemm, matmul, matmul_nt, Mat, View, ViewMut};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub vocab: usize,
    pub max_seq: usize,
    /// Feed-forward width as a multiple of `hidden`.
    pub ff_mult: usize,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            hidden: 64,
            n_heads: 4,
            vocab: 120,
            max_seq: 32,
            ff_mult: 4,
            seed: 42,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.hidden == 0 || self.n_heads == 0 || self.vocab == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.hidden % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} is not divisible by n_heads {}",
                self.hidden, self.n_heads
            )));
        }
        if self.max_seq == 0 || self.ff_mult == 0 {
            return Err(Error::Config("max_seq and ff_mult must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }

    pub fn ff(&self) -> usize {
        self.ff_mult * self.hidden
    }

    /// Width of one flat prefix slot: a key and a value per layer.
    pub fn prefix_dim(&self) -> usize {
        2 * self.n_layers * self.hidden
    }

    /// Closed-form number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let (v, e, s, f, l) = (
            self.vocab,
            self.hidden,
            self.max_seq,
            self.ff(),
            self.n_layers,
        );
        let per_layer = 2 * e + 4 * (e * e + e) + 2 * e + (e * f + f) + (f * e + e);
        v * e + s * e + l * per_layer + 2 * e + e * v + v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub ln1_g: Mat,
    pub ln1_b: Mat,
    pub wq: Mat,
    pub bq: Mat,
    pub wk: Mat,
    pub bk: Mat,
    pub wv: Mat,
    pub bv: Mat,
    pub wo: Mat,
    pub bo: Mat,
    pub ln2_g: Mat,
    pub ln2_b: Mat,
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

/// All trainable tensors. Vectors are stored as `1 x n` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct LmWeights {
    pub tok_emb: Mat,
    pub pos_emb: Mat,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Mat,
    pub lnf_b: Mat,
    pub w_out: Mat,
    pub b_out: Mat,
}

const LAYER_TENSORS: [&str; 16] = [
    "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b", "w1", "b1",
    "w2", "b2",
];

impl LayerWeights {
    fn tensors(&self) -> [&Mat; 16] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_g,
            &self.ln2_b,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Mat; 16] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

impl LmWeights {
    pub fn zeros(cfg: &LmConfig) -> Self {
        let (e, f) = (cfg.hidden, cfg.ff());
        let layer = || LayerWeights {
            ln1_g: Mat::zeros(1, e),
            ln1_b: Mat::zeros(1, e),
            wq: Mat::zeros(e, e),
            bq: Mat::zeros(1, e),
            wk: Mat::zeros(e, e),
            bk: Mat::zeros(1, e),
            wv: Mat::zeros(e, e),
            bv: Mat::zeros(1, e),
            wo: Mat::zeros(e, e),
            bo: Mat::zeros(1, e),
            ln2_g: Mat::zeros(1, e),
            ln2_b: Mat::zeros(1, e),
            w1: Mat::zeros(e, f),
            b1: Mat::zeros(1, f),
            w2: Mat::zeros(f, e),
            b2: Mat::zeros(1, e),
        };
        Self {
            tok_emb: Mat::zeros(cfg.vocab, e),
            pos_emb: Mat::zeros(cfg.max_seq, e),
            layers: (0..cfg.n_layers).map(|_| layer()).collect(),
            lnf_g: Mat::zeros(1, e),
            lnf_b: Mat::zeros(1, e),
            w_out: Mat::zeros(e, cfg.vocab),
            b_out: Mat::zeros(1, cfg.vocab),
        }
    }

    /// Named tensors in checkpoint order: embeddings, layers in order, final
    /// norm, output projection.
    pub fn named(&self) -> Vec<(String, &Mat)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_TENSORS.iter().zip(layer.tensors()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("w_out".into(), &self.w_out));
        out.push(("b_out".into(), &self.b_out));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out: Vec<&mut Mat> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out.push(&mut self.w_out);
        out.push(&mut self.b_out);
        out
    }

    pub fn scalar_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Model parameters plus the frozen flag that guards them against updates.
#[derive(Clone, Debug, PartialEq)]
pub struct LmParams {
    pub config: LmConfig,
    pub weights: LmWeights,
    frozen: bool,
}

impl LmParams {
    pub fn new(config: LmConfig, weights: LmWeights) -> Result<Self> {
        config.validate()?;
        let expected = LmWeights::zeros(&config);
        for ((name, a), (_, b)) in weights.named().iter().zip(expected.named()) {
            a.check_shape(b.rows(), b.cols(), name)?;
        }
        if weights.layers.len() != config.n_layers {
            return Err(Error::Shape("layer count does not match config".into()));
        }
        Ok(Self {
            config,
            weights,
            frozen: false,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// Mutable access for an update step; refused once frozen.
    pub fn weights_mut(&mut self) -> Result<&mut LmWeights> {
        if self.frozen {
            return Err(Error::Frozen("the backbone cannot be updated".into()));
        }
        Ok(&mut self.weights)
    }

    /// SHA-256 over the config and every tensor (name, shape, little-endian
    /// f64 bits) in checkpoint order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, t) in self.weights.named() {
            h.update(name.as_bytes());
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for v in t.as_slice() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Scaled Gaussian initialization, deterministic in `config.seed`.
pub fn init_lm(config: &LmConfig) -> Result<LmParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (e, f, l) = (config.hidden, config.ff(), config.n_layers);
    let emb_std = 0.02;
    let in_std = 1.0 / (e as f64).sqrt();
    let resid_scale = 1.0 / ((2 * l) as f64).sqrt();
    let tok_emb = Mat::randn(config.vocab, e, emb_std, &mut rng);
    let pos_emb = Mat::randn(config.max_seq, e, emb_std, &mut rng);
    let ones = |n: usize| {
        let mut m = Mat::zeros(1, n);
        m.fill(1.0);
        m
    };
    let mut layers = Vec::with_capacity(l);
    for _ in 0..l {
        layers.push(LayerWeights {
            ln1_g: ones(e),
            ln1_b: Mat::zeros(1, e),
            wq: Mat::randn(e, e, in_std, &mut rng),
            bq: Mat::zeros(1, e),
            wk: Mat::randn(e, e, in_std, &mut rng),
            bk: Mat::zeros(1, e),
            wv: Mat::randn(e, e, in_std, &mut rng),
            bv: Mat::zeros(1, e),
            wo: Mat::randn(e, e, in_std * resid_scale, &mut rng),
            bo: Mat::zeros(1, e),
            ln2_g: ones(e),
            ln2_b: Mat::zeros(1, e),
            w1: Mat::randn(e, f, in_std, &mut rng),
            b1: Mat::zeros(1, f),
            w2: Mat::randn(f, e, resid_scale / (f as f64).sqrt(), &mut rng),
            b2: Mat::zeros(1, e),
        });
    }
    let weights = LmWeights {
        tok_emb,
        pos_emb,
        layers,
        lnf_g: ones(e),
        lnf_b: Mat::zeros(1, e),
        w_out: Mat::randn(e, config.vocab, emb_std, &mut rng),
        b_out: Mat::zeros(1, config.vocab),
    };
    LmParams::new(config.clone(), weights)
}

/// Options of a single forward pass.
#[derive(Clone, Copy, Default)]
pub struct Forward<'a> {
    pub prefix: Option<&'a KvPrefix>,
    /// Raw input embeddings appended after the tokens (`rows x hidden`).
    pub extra: Option<&'a Mat>,
    pub position_offset: usize,
    /// Skip the output projection when only hidden states are needed.
    pub skip_logits: bool,
}

struct LnCache {
    xhat: Mat,
    rstd: Vec<f64>,
}

struct LayerTrace {
    ln1: LnCache,
    a: Mat,
    q: Mat,
    k_full: Mat,
    v_full: Mat,
    attn: Vec<Mat>,
    o: Mat,
    ln2: LnCache,
    b: Mat,
    u: Mat,
    z: Mat,
}

/// Activations retained by a forward pass for the backward pass.
pub struct Trace {
    tokens: Vec<u32>,
    n_extra: usize,
    position_offset: usize,
    prefix_len: usize,
    layers: Vec<LayerTrace>,
    lnf: LnCache,
    /// Final-layer hidden states after the last LayerNorm, one row per input.
    pub hidden: Mat,
    /// Next-token logits, one row per input, unless skipped.
    pub logits: Option<Mat>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.hidden.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.rows() == 0
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    /// Attention probabilities of `layer`, `head`: `T x (prefix_len + T)`.
    pub fn attention(&self, layer: usize, head: usize) -> &Mat {
        &self.layers[layer].attn[head]
    }

    /// Full key/value history (prefix slots then input positions) for use as
    /// the decoding cache of the next step.
    pub fn present(&self) -> KvPrefix {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerKv {
                keys: l.k_full.clone(),
                values: l.v_full.clone(),
            })
            .collect();
        KvPrefix::from_layers(layers).expect("consistent shapes")
    }

    /// Keys and values computed for the input positions only, excluding any
    /// prefix slots.
    pub fn own_kv(&self) -> KvPrefix {
        let p = self.prefix_len;
        let layers = self
            .layers
            .iter()
            .map(|l| LayerKv {
                keys: l.k_full.slice_rows(p, l.k_full.rows()),
                values: l.v_full.slice_rows(p, l.v_full.rows()),
            })
            .collect();
        KvPrefix::from_layers(layers).expect("consistent shapes")
    }
}

/// Gradients produced by [`backward`].
pub struct Grads {
    pub weights: Option<LmWeights>,
    pub prefix: Option<KvPrefix>,
    pub extra: Option<Mat>,
}

fn layer_norm(x: &Mat, g: &Mat, b: &Mat) -> (Mat, LnCache) {
    let (t, e) = x.shape();
    let mut y = Mat::zeros(t, e);
    let mut xhat = Mat::zeros(t, e);
    let mut rstd = Vec::with_capacity(t);
    for i in 0..t {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / e as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / e as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(i);
        for j in 0..e {
            xh[j] = (row[j] - mean) * rs;
        }
        let yr = y.row_mut(i);
        for j in 0..e {
            yr[j] = xhat[(i, j)] * g.as_slice()[j] + b.as_slice()[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Mat,
    cache: &LnCache,
    g: &Mat,
    grads: Option<(&mut Mat, &mut Mat)>,
) -> Mat {
    let (t, e) = dy.shape();
    if let Some((dg, db)) = grads {
        for i in 0..t {
            let (dyr, xh) = (dy.row(i), cache.xhat.row(i));
            let (dgs, dbs) = (dg.as_mut_slice(), db.as_mut_slice());
            for j in 0..e {
                dgs[j] += dyr[j] * xh[j];
                dbs[j] += dyr[j];
            }
        }
    }
    let mut dx = Mat::zeros(t, e);
    let gs = g.as_slice();
    for i in 0..t {
        let (dyr, xh) = (dy.row(i), cache.xhat.row(i));
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for j in 0..e {
            let d = dyr[j] * gs[j];
            mean_d += d;
            mean_dx += d * xh[j];
        }
        mean_d /= e as f64;
        mean_dx /= e as f64;
        let rs = cache.rstd[i];
        let out = dx.row_mut(i);
        for j in 0..e {
            out[j] = rs * (dyr[j] * gs[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn linear(x: &Mat, w: &Mat, b: &Mat) -> Mat {
    let mut y = matmul(x, w);
    y.add_row_broadcast(b.as_slice());
    y
}

/// Causal multi-head attention where every query row sees all prefix slots
/// and the input positions up to and including itself.
fn attention(
    q: &Mat,
    k_full: &Mat,
    v_full: &Mat,
    n_heads: usize,
    prefix_len: usize,
) -> (Vec<Mat>, Mat) {
    let (t, e) = q.shape();
    let n = k_full.rows();
    let dh = e / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut o = Mat::zeros(t, e);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let mut s = Mat::zeros(t, n);
        gemm(
            scale,
            View::cols_of(q, h * dh, dh),
            View::cols_of(k_full, h * dh, dh).t(),
            0.0,
            ViewMut::of(&mut s),
        );
        for i in 0..t {
            let valid = prefix_len + i + 1;
            let row = s.row_mut(i);
            crate::tensor::softmax_in_place(&mut row[..valid]);
            row[valid..].iter_mut().for_each(|v| *v = 0.0);
        }
        gemm(
            1.0,
            View::of(&s),
            View::cols_of(v_full, h * dh, dh),
            0.0,
            ViewMut::cols_of(&mut o, h * dh, dh),
        );
        probs.push(s);
    }
    (probs, o)
}

fn check_tokens(tokens: &[u32], vocab: usize) -> Result<()> {
    match tokens.iter().find(|&&t| t as usize >= vocab) {
        Some(&token) => Err(Error::UnknownToken { token, vocab }),
        None => Ok(()),
    }
}

/// Run the model, keeping activations for [`backward`].
pub fn run(params: &LmParams, tokens: &[u32], opts: Forward<'_>) -> Result<Trace> {
    let cfg = &params.config;
    let w = &params.weights;
    let e = cfg.hidden;
    check_tokens(tokens, cfg.vocab)?;
    let n_extra = opts.extra.map_or(0, Mat::rows);
    if let Some(x) = opts.extra {
        if x.cols() != e {
            return Err(Error::Shape(format!(
                "extra embeddings have {} columns, expected {e}",
                x.cols()
            )));
        }
    }
    let t = tokens.len() + n_extra;
    if t == 0 {
        return Err(Error::Empty(
            "forward pass needs at least one position".into(),
        ));
    }
    if opts.position_offset + t > cfg.max_seq {
        return Err(Error::SequenceOverflow {
            len: opts.position_offset + t,
            max_seq: cfg.max_seq,
        });
    }
    let prefix_len = match opts.prefix {
        Some(p) if !p.is_empty() => {
            if p.n_layers() != cfg.n_layers || p.hidden() != e {
                return Err(Error::Shape(format!(
                    "prefix has {} layers of width {}, model has {} of width {e}",
                    p.n_layers(),
                    p.hidden(),
                    cfg.n_layers
                )));
            }
            p.len()
        }
        _ => 0,
    };

    let mut x = Mat::zeros(t, e);
    for i in 0..t {
        let pos = w.pos_emb.row(opts.position_offset + i);
        let src = if i < tokens.len() {
            w.tok_emb.row(tokens[i] as usize)
        } else {
            opts.extra.expect("extra rows exist").row(i - tokens.len())
        };
        for ((xv, a), b) in x.row_mut(i).iter_mut().zip(src).zip(pos) {
            *xv = a + b;
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (l, lw) in w.layers.iter().enumerate() {
        let (a, ln1) = layer_norm(&x, &lw.ln1_g, &lw.ln1_b);
        let q = linear(&a, &lw.wq, &lw.bq);
        let k = linear(&a, &lw.wk, &lw.bk);
        let v = linear(&a, &lw.wv, &lw.bv);
        let (k_full, v_full) = match opts.prefix {
            Some(p) if prefix_len > 0 => {
                let kv = &p.layers()[l];
                (kv.keys.vstack(&k)?, kv.values.vstack(&v)?)
            }
            _ => (k, v),
        };
        let (attn, o) = attention(&q, &k_full, &v_full, cfg.n_heads, prefix_len);
        let y = linear(&o, &lw.wo, &lw.bo);
        x.axpy(1.0, &y);
        let (b, ln2) = layer_norm(&x, &lw.ln2_g, &lw.ln2_b);
        let u = linear(&b, &lw.w1, &lw.b1);
        let mut z = u.clone();
        z.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
        let ff = linear(&z, &lw.w2, &lw.b2);
        x.axpy(1.0, &ff);
        layers.push(LayerTrace {
            ln1,
            a,
            q,
            k_full,
            v_full,
            attn,
            o,
            ln2,
            b,
            u,
            z,
        });
    }
    let (hidden, lnf) = layer_norm(&x, &w.lnf_g, &w.lnf_b);
    let logits = if opts.skip_logits {
        None
    } else {
        Some(linear(&hidden, &w.w_out, &w.b_out))
    };
    Ok(Trace {
        tokens: tokens.to_vec(),
        n_extra,
        position_offset: opts.position_offset,
        prefix_len,
        layers,
        lnf,
        hidden,
        logits,
    })
}

/// Reverse-mode pass through a recorded forward pass.
///
/// `dlogits` and `dhidden` seed the gradient at the output logits and the
/// final hidden states respectively. Weight gradients are only accumulated
/// when `weight_grads` is set; prefix and extra-embedding gradients are
/// returned whenever the forward pass had them.
pub fn backward(
    params: &LmParams,
    trace: &Trace,
    dlogits: Option<&Mat>,
    dhidden: Option<&Mat>,
    weight_grads: bool,
) -> Result<Grads> {
    let cfg = &params.config;
    let w = &params.weights;
    let (t, e) = trace.hidden.shape();
    let mut g = weight_grads.then(|| LmWeights::zeros(cfg));

    let mut dh = match dhidden {
        Some(d) => {
            d.check_shape(t, e, "dhidden")?;
            d.clone()
        }
        None => Mat::zeros(t, e),
    };
    if let Some(dl) = dlogits {
        dl.check_shape(t, cfg.vocab, "dlogits")?;
        add_matmul_nt(&mut dh, dl, &w.w_out);
        if let Some(g) = g.as_mut() {
            add_matmul_tn(&mut g.w_out, &trace.hidden, dl);
            dl.add_col_sums_into(g.b_out.as_mut_slice());
        }
    }
    let mut dx = layer_norm_backward(
        &dh,
        &trace.lnf,
        &w.lnf_g,
        g.as_mut().map(|g| (&mut g.lnf_g, &mut g.lnf_b)),
    );

    let p = trace.prefix_len;
    let dhd = cfg.head_dim();
    let scale = 1.0 / (dhd as f64).sqrt();
    let mut prefix_grads: Vec<LayerKv> = Vec::with_capacity(cfg.n_layers);
    for l in (0..cfg.n_layers).rev() {
        let lt = &trace.layers[l];
        let lw = &w.layers[l];
        let mut lg = g.as_mut().map(|g| &mut g.layers[l]);

        // feed-forward block
        if let Some(lg) = lg.as_mut() {
            add_matmul_tn(&mut lg.w2, &lt.z, &dx);
            dx.add_col_sums_into(lg.b2.as_mut_slice());
        }
        let mut du = matmul_nt(&dx, &lw.w2);
        for (d, u) in du.as_mut_slice().iter_mut().zip(lt.u.as_slice()) {
            *d *= gelu_grad(*u);
        }
        if let Some(lg) = lg.as_mut() {
            add_matmul_tn(&mut lg.w1, &lt.b, &du);
            du.add_col_sums_into(lg.b1.as_mut_slice());
        }
        let db = matmul_nt(&du, &lw.w1);
        let dmid = layer_norm_backward(
            &db,
            &lt.ln2,
            &lw.ln2_g,
            lg.as_mut().map(|lg| (&mut lg.ln2_g, &mut lg.ln2_b)),
        );
        dx.axpy(1.0, &dmid);

        // attention block
        if let Some(lg) = lg.as_mut() {
            add_matmul_tn(&mut lg.wo, &lt.o, &dx);
            dx.add_col_sums_into(lg.bo.as_mut_slice());
        }
        let d_o = matmul_nt(&dx, &lw.wo);
        let n = lt.k_full.rows();
        let mut dq = Mat::zeros(t, e);
        let mut dk_full = Mat::zeros(n, e);
        let mut dv_full = Mat::zeros(n, e);
        for h in 0..cfg.n_heads {
            let a = &lt.attn[h];
            let mut da = Mat::zeros(t, n);
            gemm(
                1.0,
                View::cols_of(&d_o, h * dhd, dhd),
                View::cols_of(&lt.v_full, h * dhd, dhd).t(),
                0.0,
                ViewMut::of(&mut da),
            );
            gemm(
                1.0,
                View::of(a).t(),
                View::cols_of(&d_o, h * dhd, dhd),
                0.0,
                ViewMut::cols_of(&mut dv_full, h * dhd, dhd),
            );
            for i in 0..t {
                let valid = p + i + 1;
                let (ar, dr) = (a.row(i), da.row_mut(i));
                let dot: f64 = ar[..valid]
                    .iter()
                    .zip(&dr[..valid])
                    .map(|(x, y)| x * y)
                    .sum();
                for j in 0..valid {
                    dr[j] = ar[j] * (dr[j] - dot) * scale;
                }
                dr[valid..].iter_mut().for_each(|v| *v = 0.0);
            }
            gemm(
                1.0,
                View::of(&da),
                View::cols_of(&lt.k_full, h * dhd, dhd),
                0.0,
                ViewMut::cols_of(&mut dq, h * dhd, dhd),
            );
            gemm(
                1.0,
                View::of(&da).t(),
                View::cols_of(&lt.q, h * dhd, dhd),
                0.0,
                ViewMut::cols_of(&mut dk_full, h * dhd, dhd),
            );
        }
        let dk = dk_full.slice_rows(p, n);
        let dv = dv_full.slice_rows(p, n);
        prefix_grads.push(LayerKv {
            keys: dk_full.slice_rows(0, p),
            values: dv_full.slice_rows(0, p),
        });
        if let Some(lg) = lg.as_mut() {
            add_matmul_tn(&mut lg.wq, &lt.a, &dq);
            dq.add_col_sums_into(lg.bq.as_mut_slice());
            add_matmul_tn(&mut lg.wk, &lt.a, &dk);
            dk.add_col_sums_into(lg.bk.as_mut_slice());
            add_matmul_tn(&mut lg.wv, &lt.a, &dv);
            dv.add_col_sums_into(lg.bv.as_mut_slice());
        }
        let mut da_in = matmul_nt(&dq, &lw.wq);
        add_matmul_nt(&mut da_in, &dk, &lw.wk);
        add_matmul_nt(&mut da_in, &dv, &lw.wv);
        let dpre = layer_norm_backward(
            &da_in,
            &lt.ln1,
            &lw.ln1_g,
            lg.as_mut().map(|lg| (&mut lg.ln1_g, &mut lg.ln1_b)),
        );
        dx.axpy(1.0, &dpre);
    }
    prefix_grads.reverse();

    let n_tok = trace.tokens.len();
    let mut extra = (trace.n_extra > 0).then(|| Mat::zeros(trace.n_extra, e));
    if let Some(g) = g.as_mut() {
        for i in 0..t {
            let pos = trace.position_offset + i;
            for (a, b) in g.pos_emb.row_mut(pos).iter_mut().zip(dx.row(i)) {
                *a += b;
            }
            if i < n_tok {
                let tok = trace.tokens[i] as usize;
                for (a, b) in g.tok_emb.row_mut(tok).iter_mut().zip(dx.row(i)) {
                    *a += b;
                }
            }
        }
    }
    if let Some(ex) = extra.as_mut() {
        for i in n_tok..t {
            ex.row_mut(i - n_tok).copy_from_slice(dx.row(i));
        }
    }
    let prefix = if p > 0 {
        Some(KvPrefix::from_layers(prefix_grads)?)
    } else {
        None
    };
    Ok(Grads {
        weights: g,
        prefix,
        extra,
    })
}

/// Logits for `tokens`, optionally steered by a prefix.
///
/// Requires `tokens.len() + prefix.len() <= max_seq`.
pub fn forward(params: &LmParams, tokens: &[u32], prefix: Option<&KvPrefix>) -> Result<Mat> {
    let m = prefix.map_or(0, KvPrefix::len);
    if tokens.len() + m > params.config.max_seq {
        return Err(Error::SequenceOverflow {
            len: tokens.len() + m,
            max_seq: params.config.max_seq,
        });
    }
    let trace = run(
        params,
        tokens,
        Forward {
            prefix,
            ..Default::default()
        },
    )?;
    Ok(trace.logits.expect("logits requested"))
}

/// Logits and final hidden states for `tokens`.
pub fn forward_with_hidden(
    params: &LmParams,
    tokens: &[u32],
    prefix: Option<&KvPrefix>,
) -> Result<(Mat, Mat)> {
    let trace = run(
        params,
        tokens,
        Forward {
            prefix,
            ..Default::default()
        },
    )?;
    Ok((trace.logits.expect("logits requested"), trace.hidden))
}
