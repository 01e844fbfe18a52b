//! Small pre-LayerNorm causal transformer with tied input/output embeddings,
//! trained with masked next-token cross-entropy.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{global_norm, scale, Adam, AdamConfig, Tensors};
use crate::text::TokenId;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum LmError {
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub window: usize,
}

impl LmConfig {
    pub fn new(vocab_size: usize) -> Self {
        LmConfig { vocab_size, width: 64, layers: 2, heads: 2, window: 256 }
    }

    pub fn validate(&self) -> Result<(), LmError> {
        if self.vocab_size == 0 || self.width == 0 || self.heads == 0 || self.window == 0 {
            return Err(LmError::Config("all dimensions must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(LmError::Config(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl LayerParams {
    fn init(d: usize, rng: &mut impl Rng, std: f64) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        let mut mat = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| normal.sample(rng));
        LayerParams {
            ln1_g: Array1::ones(d),
            ln1_b: Array1::zeros(d),
            wq: mat(d, d),
            bq: Array1::zeros(d),
            wk: mat(d, d),
            bk: Array1::zeros(d),
            wv: mat(d, d),
            bv: Array1::zeros(d),
            wo: mat(d, d),
            bo: Array1::zeros(d),
            ln2_g: Array1::ones(d),
            ln2_b: Array1::zeros(d),
            w1: mat(d, 4 * d),
            b1: Array1::zeros(4 * d),
            w2: mat(4 * d, d),
            b2: Array1::zeros(d),
        }
    }

    fn named(&self) -> [(&'static str, ArrayViewD<'_, f64>); 16] {
        [
            ("ln1_g", self.ln1_g.view().into_dyn()),
            ("ln1_b", self.ln1_b.view().into_dyn()),
            ("wq", self.wq.view().into_dyn()),
            ("bq", self.bq.view().into_dyn()),
            ("wk", self.wk.view().into_dyn()),
            ("bk", self.bk.view().into_dyn()),
            ("wv", self.wv.view().into_dyn()),
            ("bv", self.bv.view().into_dyn()),
            ("wo", self.wo.view().into_dyn()),
            ("bo", self.bo.view().into_dyn()),
            ("ln2_g", self.ln2_g.view().into_dyn()),
            ("ln2_b", self.ln2_b.view().into_dyn()),
            ("w1", self.w1.view().into_dyn()),
            ("b1", self.b1.view().into_dyn()),
            ("w2", self.w2.view().into_dyn()),
            ("b2", self.b2.view().into_dyn()),
        ]
    }

    fn views_mut(&mut self) -> [ArrayViewMutD<'_, f64>; 16] {
        [
            self.ln1_g.view_mut().into_dyn(),
            self.ln1_b.view_mut().into_dyn(),
            self.wq.view_mut().into_dyn(),
            self.bq.view_mut().into_dyn(),
            self.wk.view_mut().into_dyn(),
            self.bk.view_mut().into_dyn(),
            self.wv.view_mut().into_dyn(),
            self.bv.view_mut().into_dyn(),
            self.wo.view_mut().into_dyn(),
            self.bo.view_mut().into_dyn(),
            self.ln2_g.view_mut().into_dyn(),
            self.ln2_b.view_mut().into_dyn(),
            self.w1.view_mut().into_dyn(),
            self.b1.view_mut().into_dyn(),
            self.w2.view_mut().into_dyn(),
            self.b2.view_mut().into_dyn(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmParams {
    pub config: LmConfig,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
}

impl Tensors for LmParams {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut v = vec![
            ("lm.tok_emb".to_string(), self.tok_emb.view().into_dyn()),
            ("lm.pos_emb".to_string(), self.pos_emb.view().into_dyn()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            v.extend(l.named().into_iter().map(|(n, t)| (format!("lm.layer{i}.{n}"), t)));
        }
        v.push(("lm.lnf_g".into(), self.lnf_g.view().into_dyn()));
        v.push(("lm.lnf_b".into(), self.lnf_b.view().into_dyn()));
        v
    }

    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut v = vec![self.tok_emb.view_mut().into_dyn(), self.pos_emb.view_mut().into_dyn()];
        for l in &mut self.layers {
            v.extend(l.views_mut());
        }
        v.push(self.lnf_g.view_mut().into_dyn());
        v.push(self.lnf_b.view_mut().into_dyn());
        v
    }
}

/// One training sequence. `target[t]` marks token `t` as a prediction target
/// (predicted from position `t - 1`); `target[0]` is ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct LmExample {
    pub tokens: Vec<TokenId>,
    pub target: Vec<bool>,
}

impl LmExample {
    pub fn n_targets(&self) -> usize {
        self.target.iter().skip(1).filter(|&&t| t).count()
    }
}

fn gelu(u: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * u * (1.0 + (C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * u * u)
}

struct LnCache {
    xhat: Array2<f64>,
    inv: Array1<f64>,
}

fn ln_forward(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv = Array1::zeros(x.nrows());
    for (mut row, iv) in xhat.rows_mut().into_iter().zip(inv.iter_mut()) {
        let mu = row.sum() / d;
        row.mapv_inplace(|v| v - mu);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *iv = 1.0 / (var + LN_EPS).sqrt();
        let k = *iv;
        row.mapv_inplace(|v| v * k);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, inv })
}

fn ln_backward(dy: &Array2<f64>, c: &LnCache, g: &Array1<f64>, dg: &mut Array1<f64>, db: &mut Array1<f64>) -> Array2<f64> {
    *dg += &(dy * &c.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let mut dx = dy * g;
    let d = dx.ncols() as f64;
    for ((mut row, xh), &iv) in dx.rows_mut().into_iter().zip(c.xhat.rows()).zip(&c.inv) {
        let mean = row.sum() / d;
        let mean_x = row.dot(&xh) / d;
        ndarray::Zip::from(&mut row).and(&xh).for_each(|r, &xv| *r = iv * (*r - mean - xv * mean_x));
    }
    dx
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - lse).collect()
}

struct LayerCache {
    x_in_ln: LnCache,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LnCache,
    h2: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
}

struct Trace {
    layers: Vec<LayerCache>,
    lnf: LnCache,
    hf: Array2<f64>,
}

impl LmParams {
    pub fn new(config: LmConfig, rng: &mut impl Rng) -> Result<Self, LmError> {
        config.validate()?;
        let d = config.width;
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let tok_emb = Array2::from_shape_fn((config.vocab_size, d), |_| normal.sample(rng));
        let pos_emb = Array2::from_shape_fn((config.window, d), |_| normal.sample(rng));
        let layers = (0..config.layers).map(|_| LayerParams::init(d, rng, 0.02)).collect();
        Ok(LmParams { tok_emb, pos_emb, layers, lnf_g: Array1::ones(d), lnf_b: Array1::zeros(d), config })
    }

    /// Zero-filled parameters of the given shape; used as a load target.
    pub fn zeros(config: LmConfig) -> Result<Self, LmError> {
        let mut p = Self::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        p.fill_zero();
        Ok(p)
    }

    fn head_dim(&self) -> usize {
        self.config.width / self.config.heads
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), LmError> {
        if tokens.len() > self.config.window {
            return Err(LmError::Config(format!("sequence of {} exceeds window {}", tokens.len(), self.config.window)));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(LmError::Config(format!("token {t} outside vocabulary")));
        }
        Ok(())
    }

    fn embed(&self, tokens: &[TokenId]) -> Array2<f64> {
        let mut x = Array2::zeros((tokens.len(), self.config.width));
        for (t, &tok) in tokens.iter().enumerate() {
            let mut row = x.row_mut(t);
            row.assign(&self.tok_emb.row(tok as usize));
            row += &self.pos_emb.row(t);
        }
        x
    }

    fn layer_forward(&self, p: &LayerParams, x: Array2<f64>) -> (Array2<f64>, LayerCache) {
        let n = x.nrows();
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let (h1, x_in_ln) = ln_forward(&x, &p.ln1_g, &p.ln1_b);
        let q = h1.dot(&p.wq) + &p.bq;
        let k = h1.dot(&p.wk) + &p.bk;
        let v = h1.dot(&p.wv) + &p.bv;
        let mut o = Array2::zeros((n, self.config.width));
        let mut probs = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut sc = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            for i in 0..n {
                let mut row = sc.row_mut(i);
                let row = row.as_slice_mut().expect("standard layout");
                softmax_in_place(&mut row[..=i]);
                row[i + 1..].fill(0.0);
            }
            o.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
            probs.push(sc);
        }
        let x_mid = x + &(o.dot(&p.wo) + &p.bo);
        let (h2, ln2) = ln_forward(&x_mid, &p.ln2_g, &p.ln2_b);
        let u = h2.dot(&p.w1) + &p.b1;
        let g = u.mapv(gelu);
        let out = x_mid + &(g.dot(&p.w2) + &p.b2);
        (out, LayerCache { x_in_ln, h1, q, k, v, probs, o, ln2, h2, u, g })
    }

    fn layer_backward(&self, p: &LayerParams, c: &LayerCache, dout: Array2<f64>, gp: &mut LayerParams) -> Array2<f64> {
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        // MLP branch
        gp.w2 += &c.g.t().dot(&dout);
        gp.b2 += &dout.sum_axis(Axis(0));
        let mut du = dout.dot(&p.w2.t());
        ndarray::Zip::from(&mut du).and(&c.u).for_each(|d, &u| *d *= gelu_grad(u));
        gp.w1 += &c.h2.t().dot(&du);
        gp.b1 += &du.sum_axis(Axis(0));
        let dh2 = du.dot(&p.w1.t());
        let dx_mid = dout + &ln_backward(&dh2, &c.ln2, &p.ln2_g, &mut gp.ln2_g, &mut gp.ln2_b);
        // attention branch
        gp.wo += &c.o.t().dot(&dx_mid);
        gp.bo += &dx_mid.sum_axis(Axis(0));
        let d_o = dx_mid.dot(&p.wo.t());
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for (h, pr) in c.probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let da = d_o.slice(cols);
            let mut ds = da.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&pr.t().dot(&da));
            let row_dot = (&ds * pr).sum_axis(Axis(1));
            for ((mut row, prow), &rd) in ds.rows_mut().into_iter().zip(pr.rows()).zip(&row_dot) {
                ndarray::Zip::from(&mut row).and(&prow).for_each(|d, &pv| *d = pv * (*d - rd) * scale);
            }
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        gp.wq += &c.h1.t().dot(&dq);
        gp.bq += &dq.sum_axis(Axis(0));
        gp.wk += &c.h1.t().dot(&dk);
        gp.bk += &dk.sum_axis(Axis(0));
        gp.wv += &c.h1.t().dot(&dv);
        gp.bv += &dv.sum_axis(Axis(0));
        let dh1 = dq.dot(&p.wq.t()) + dk.dot(&p.wk.t()) + dv.dot(&p.wv.t());
        dx_mid + &ln_backward(&dh1, &c.x_in_ln, &p.ln1_g, &mut gp.ln1_g, &mut gp.ln1_b)
    }

    fn trace(&self, tokens: &[TokenId]) -> Trace {
        let mut x = self.embed(tokens);
        let mut layers = Vec::with_capacity(self.layers.len());
        for p in &self.layers {
            let (next, cache) = self.layer_forward(p, x);
            layers.push(cache);
            x = next;
        }
        let (hf, lnf) = ln_forward(&x, &self.lnf_g, &self.lnf_b);
        Trace { layers, lnf, hf }
    }

    /// Next-token logits at every position, `n x V`.
    pub fn logits(&self, tokens: &[TokenId]) -> Result<Array2<f64>, LmError> {
        self.check_tokens(tokens)?;
        Ok(self.trace(tokens).hf.dot(&self.tok_emb.t()))
    }

    /// Summed negative log-likelihood over the example's targets and the
    /// number of targets. With `grads`, adds `scale` times the gradient of
    /// the summed loss.
    pub fn loss_grad(
        &self,
        ex: &LmExample,
        scale: f64,
        grads: Option<&mut LmParams>,
    ) -> Result<(f64, usize), LmError> {
        self.check_tokens(&ex.tokens)?;
        if ex.target.len() != ex.tokens.len() {
            return Err(LmError::Config("target mask length differs from tokens".into()));
        }
        let positions: Vec<usize> = (1..ex.tokens.len()).filter(|&t| ex.target[t]).map(|t| t - 1).collect();
        if positions.is_empty() {
            return Ok((0.0, 0));
        }
        let tr = self.trace(&ex.tokens);
        let hm = tr.hf.select(Axis(0), &positions);
        let mut probs = hm.dot(&self.tok_emb.t());
        let mut nll = 0.0;
        for (mut row, &pos) in probs.rows_mut().into_iter().zip(&positions) {
            let row = row.as_slice_mut().expect("standard layout");
            let lp = log_softmax(row);
            nll -= lp[ex.tokens[pos + 1] as usize];
            for (r, l) in row.iter_mut().zip(lp) {
                *r = l.exp();
            }
        }
        let Some(g) = grads else {
            return Ok((nll, positions.len()));
        };
        let mut dlogits = probs;
        for (mut row, &pos) in dlogits.rows_mut().into_iter().zip(&positions) {
            row[ex.tokens[pos + 1] as usize] -= 1.0;
            row.mapv_inplace(|v| v * scale);
        }
        g.tok_emb += &dlogits.t().dot(&hm);
        let dhm = dlogits.dot(&self.tok_emb);
        let mut dhf = Array2::zeros(tr.hf.raw_dim());
        for (row, &pos) in dhm.rows().into_iter().zip(&positions) {
            dhf.row_mut(pos).assign(&row);
        }
        let mut dx = ln_backward(&dhf, &tr.lnf, &self.lnf_g, &mut g.lnf_g, &mut g.lnf_b);
        for ((p, c), gp) in self.layers.iter().zip(&tr.layers).zip(g.layers.iter_mut()).rev() {
            dx = self.layer_backward(p, c, dx, gp);
        }
        for (t, &tok) in ex.tokens.iter().enumerate() {
            let row = dx.row(t);
            let mut te = g.tok_emb.row_mut(tok as usize);
            te += &row;
            let mut pe = g.pos_emb.row_mut(t);
            pe += &row;
        }
        Ok((nll, positions.len()))
    }

    /// Mean target negative log-likelihood over a corpus.
    pub fn mean_nll(&self, examples: &[LmExample]) -> Result<f64, LmError> {
        let (mut sum, mut n) = (0.0, 0usize);
        for ex in examples {
            let (s, c) = self.loss_grad(ex, 0.0, None)?;
            sum += s;
            n += c;
        }
        Ok(if n == 0 { 0.0 } else { sum / n as f64 })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Gradient global-norm clip; 0 disables clipping.
    pub clip: f64,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig { epochs: 2, batch_size: 16, learning_rate: 2e-3, clip: 1.0, seed: 23 }
    }
}

/// Minibatch Adam on the mean masked cross-entropy.
pub fn lm_train(params: &LmParams, examples: &[LmExample], cfg: &LmTrainConfig) -> Result<LmParams, LmError> {
    if examples.is_empty() {
        return Err(LmError::Config("empty training corpus".into()));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) || !(cfg.clip >= 0.0) {
        return Err(LmError::Config("batch_size, learning_rate must be positive and clip non-negative".into()));
    }
    for ex in examples {
        params.check_tokens(&ex.tokens)?;
    }
    let mut params = params.clone();
    if cfg.epochs == 0 {
        return Ok(params);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&params, AdamConfig::with_lr(cfg.learning_rate));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut grads = params.clone();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let count: usize = batch.iter().map(|&i| examples[i].n_targets()).sum();
            if count == 0 {
                continue;
            }
            grads.fill_zero();
            for &i in batch {
                params.loss_grad(&examples[i], 1.0 / count as f64, Some(&mut grads))?;
            }
            let norm = global_norm(&grads);
            if cfg.clip > 0.0 && norm > cfg.clip {
                scale(&mut grads, cfg.clip / norm);
            }
            opt.step(&mut params, &grads);
        }
    }
    Ok(params)
}

/// Keys and values of one position, for every layer, linked to the
/// previous position so decoding states share their history.
struct KvNode {
    k: Vec<Array1<f64>>,
    v: Vec<Array1<f64>>,
    prev: Option<Arc<KvNode>>,
}

/// Incremental decoding state: cached keys/values plus the log-probabilities
/// of the next token. Cloning is cheap.
#[derive(Clone)]
pub struct LmState {
    kv: Option<Arc<KvNode>>,
    pub len: usize,
    log_probs: Arc<Vec<f64>>,
}

impl LmState {
    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }
}

impl LmParams {
    fn history(state: &LmState) -> Vec<&KvNode> {
        let mut nodes = Vec::with_capacity(state.len);
        let mut cur = state.kv.as_deref();
        while let Some(n) = cur {
            nodes.push(n);
            cur = n.prev.as_deref();
        }
        nodes.reverse();
        nodes
    }

    /// Feed one token. Panics if the window is exceeded or the token is out of
    /// range; callers size contexts to the window.
    pub fn step(&self, state: &LmState, token: TokenId) -> LmState {
        let pos = state.len;
        assert!(pos < self.config.window, "position {pos} beyond window");
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let past = Self::history(state);
        let mut x = (&self.tok_emb.row(token as usize) + &self.pos_emb.row(pos)).insert_axis(Axis(0));
        let mut ks = Vec::with_capacity(self.layers.len());
        let mut vs = Vec::with_capacity(self.layers.len());
        for (l, p) in self.layers.iter().enumerate() {
            let (h1, _) = ln_forward(&x, &p.ln1_g, &p.ln1_b);
            let q = (h1.dot(&p.wq) + &p.bq).remove_axis(Axis(0));
            let k = (h1.dot(&p.wk) + &p.bk).remove_axis(Axis(0));
            let v = (h1.dot(&p.wv) + &p.bv).remove_axis(Axis(0));
            let (qs, ks_cur, vs_cur) = (q.as_slice().expect("contiguous"), k.as_slice().expect("contiguous"), v.as_slice().expect("contiguous"));
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let mut o = vec![0.0; self.config.width];
            let mut w = Vec::with_capacity(past.len() + 1);
            for h in 0..self.config.heads {
                let r = h * dh..(h + 1) * dh;
                let qh = &qs[r.clone()];
                w.clear();
                w.extend(past.iter().map(|n| dot(&n.k[l].as_slice().expect("contiguous")[r.clone()], qh) * scale));
                w.push(dot(&ks_cur[r.clone()], qh) * scale);
                softmax_in_place(&mut w);
                let oh = &mut o[r.clone()];
                let values = past.iter().map(|n| &n.v[l].as_slice().expect("contiguous")[r.clone()]).chain(std::iter::once(&vs_cur[r.clone()]));
                for (val, &wi) in values.zip(&w) {
                    for (acc, x) in oh.iter_mut().zip(val) {
                        *acc += wi * x;
                    }
                }
            }
            let o = Array1::from(o);
            let x_mid = &x + &(o.insert_axis(Axis(0)).dot(&p.wo) + &p.bo);
            let (h2, _) = ln_forward(&x_mid, &p.ln2_g, &p.ln2_b);
            let g = (h2.dot(&p.w1) + &p.b1).mapv(gelu);
            x = &x_mid + &(g.dot(&p.w2) + &p.b2);
            ks.push(k);
            vs.push(v);
        }
        let (hf, _) = ln_forward(&x, &self.lnf_g, &self.lnf_b);
        let logits = hf.row(0).dot(&self.tok_emb.t());
        LmState {
            kv: Some(Arc::new(KvNode { k: ks, v: vs, prev: state.kv.clone() })),
            len: pos + 1,
            log_probs: Arc::new(log_softmax(logits.as_slice().expect("contiguous"))),
        }
    }

    /// State after feeding `context` (which must be nonempty).
    pub fn start(&self, context: &[TokenId]) -> LmState {
        let empty = LmState { kv: None, len: 0, log_probs: Arc::new(Vec::new()) };
        context.iter().fold(empty, |s, &t| self.step(&s, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_relative_error, numeric_gradient};

    fn tiny(rng: &mut ChaCha8Rng, vocab: usize, width: usize, layers: usize, heads: usize) -> LmParams {
        let cfg = LmConfig { vocab_size: vocab, width, layers, heads, window: 16 };
        let mut p = LmParams::new(cfg, rng).unwrap();
        // larger weights than the training init so every path carries signal
        for mut t in p.tensors_mut() {
            t.mapv_inplace(|x| x * 10.0 + rng.gen_range(-0.05..0.05));
        }
        p
    }

    fn random_example(rng: &mut ChaCha8Rng, vocab: usize, n: usize) -> LmExample {
        let tokens: Vec<TokenId> = (0..n).map(|_| rng.gen_range(0..vocab as TokenId)).collect();
        let mut target: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();
        target[n - 1] = true;
        LmExample { tokens, target }
    }

    #[test]
    fn config_validation() {
        assert!(LmConfig { width: 10, heads: 3, ..LmConfig::new(5) }.validate().is_err());
        assert!(LmConfig::new(0).validate().is_err());
        assert!(LmConfig::new(5).validate().is_ok());
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for u in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let num = (gelu(u + 1e-6) - gelu(u - 1e-6)) / 2e-6;
            assert!((gelu_grad(u) - num).abs() < 1e-8);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for case in 0..20 {
            let layers = 1 + case % 2;
            let p = tiny(&mut rng, 7, 8, layers, 2);
            let n = rng.gen_range(2..7);
            let ex = random_example(&mut rng, 7, n);
            let mut analytic = p.clone();
            analytic.fill_zero();
            p.loss_grad(&ex, 1.0, Some(&mut analytic)).unwrap();
            let numeric = numeric_gradient(&p, 1e-5, |q| q.loss_grad(&ex, 1.0, None).unwrap().0);
            let (err, name) = max_relative_error(&analytic, &numeric, 1e-5);
            assert!(err < 1e-3, "case {case}: {name} {err}");
        }
    }

    #[test]
    fn cached_decoding_matches_full_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = tiny(&mut rng, 9, 8, 2, 2);
        let tokens: Vec<TokenId> = (0..12).map(|_| rng.gen_range(0..9)).collect();
        let full = p.logits(&tokens).unwrap();
        let mut state = p.start(&tokens[..1]);
        for t in 0..tokens.len() {
            if t > 0 {
                state = p.step(&state, tokens[t]);
            }
            let expected = log_softmax(full.row(t).as_slice().unwrap());
            for (a, b) in state.log_probs().iter().zip(&expected) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        // branching from a shared prefix leaves the original untouched
        let base = p.start(&tokens[..4]);
        let a = p.step(&base, 1);
        let b = p.step(&base, 2);
        assert_ne!(a.log_probs(), b.log_probs());
        assert_eq!(base.len, 4);
    }

    #[test]
    fn train_rejects_bad_input_and_zero_epochs_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = LmParams::new(LmConfig { window: 8, ..LmConfig::new(6) }, &mut rng).unwrap();
        let ex = random_example(&mut rng, 6, 5);
        assert!(lm_train(&p, &[], &LmTrainConfig::default()).is_err());
        let zero = LmTrainConfig { epochs: 0, ..Default::default() };
        assert_eq!(lm_train(&p, &[ex.clone()], &zero).unwrap(), p);
        let long = random_example(&mut rng, 6, 9);
        assert!(lm_train(&p, &[long], &zero).is_err());
        let oov = LmExample { tokens: vec![0, 6], target: vec![false, true] };
        assert!(lm_train(&p, &[oov], &zero).is_err());
    }

    #[test]
    fn memorizes_small_corpus() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = LmConfig { vocab_size: 30, width: 32, layers: 2, heads: 2, window: 16 };
        let p = LmParams::new(cfg, &mut rng).unwrap();
        // 20 sequences: a distinct two-token prompt, a separator, then a
        // deterministic continuation that is the only target
        let corpus: Vec<LmExample> = (0..20)
            .map(|i| {
                let mut tokens = vec![(i % 10) as TokenId, 10 + (i / 10) as TokenId, 29];
                tokens.extend((0..6).map(|j| 12 + ((i * 7 + j * 3) % 17) as TokenId));
                let target = (0..tokens.len()).map(|t| t >= 3).collect();
                LmExample { tokens, target }
            })
            .collect();
        let before = p.mean_nll(&corpus).unwrap();
        let tc = LmTrainConfig { epochs: 150, batch_size: 5, learning_rate: 1e-2, clip: 1.0, seed: 5 };
        let trained = lm_train(&p, &corpus, &tc).unwrap();
        let ppl = trained.mean_nll(&corpus).unwrap().exp();
        assert!(ppl < 1.5, "perplexity {ppl} (initial {})", before.exp());
        assert!(trained.all_finite());
        assert_eq!(lm_train(&p, &corpus[..4], &LmTrainConfig { epochs: 2, ..tc.clone() }).unwrap(),
                   lm_train(&p, &corpus[..4], &LmTrainConfig { epochs: 2, ..tc }).unwrap());
    }
}
