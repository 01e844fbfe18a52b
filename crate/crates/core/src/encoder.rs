//! Mean-pool sentence encoder and contrastive (InfoNCE) pretraining on
//! unlabeled utterances with dropout and `_`-corruption views.

use ndarray::{Array1, Array2, ArrayView1, ArrayViewD, ArrayViewMutD, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{Adam, AdamConfig, Tensors};
use crate::text::{corrupt_view, TokenId, PAD};

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("degenerate input: encoding {0} has zero norm")]
    DegenerateInput(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    /// vocab_size x d
    pub embedding: Array2<f64>,
    /// d x d, applied as `pooled · projection`
    pub projection: Array2<f64>,
    pub bias: Array1<f64>,
    pub dropout_rate: f64,
}

impl Tensors for EncoderParams {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![
            ("encoder.embedding".into(), self.embedding.view().into_dyn()),
            ("encoder.projection".into(), self.projection.view().into_dyn()),
            ("encoder.bias".into(), self.bias.view().into_dyn()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        vec![
            self.embedding.view_mut().into_dyn(),
            self.projection.view_mut().into_dyn(),
            self.bias.view_mut().into_dyn(),
        ]
    }
}

/// Train mode draws a dropout mask from the supplied generator.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

/// Forward-pass state kept for backpropagation.
#[derive(Clone, Debug)]
pub struct EncodeTrace {
    tokens: Vec<TokenId>,
    mask: Option<Array1<f64>>,
    dropped: Array1<f64>,
    pub output: Array1<f64>,
}

impl EncoderParams {
    pub fn new(vocab_size: usize, dim: usize, dropout_rate: f64, rng: &mut impl Rng) -> Self {
        assert!(dim >= 1, "encoder width must be positive");
        let emb = Normal::new(0.0, 0.5).unwrap();
        let bound = (6.0 / (2 * dim) as f64).sqrt();
        EncoderParams {
            embedding: Array2::from_shape_fn((vocab_size, dim), |_| emb.sample(rng)),
            projection: Array2::from_shape_fn((dim, dim), |_| rng.gen_range(-bound..bound)),
            bias: Array1::zeros(dim),
            dropout_rate,
        }
    }

    pub fn zeros(vocab_size: usize, dim: usize, dropout_rate: f64) -> Self {
        EncoderParams {
            embedding: Array2::zeros((vocab_size, dim)),
            projection: Array2::zeros((dim, dim)),
            bias: Array1::zeros(dim),
            dropout_rate,
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.nrows()
    }

    /// Inverted-dropout mask: each unit kept with probability `1 - rate` and
    /// rescaled by `1 / (1 - rate)`.
    pub fn sample_mask(&self, rng: &mut ChaCha8Rng) -> Option<Array1<f64>> {
        if self.dropout_rate <= 0.0 {
            return None;
        }
        let keep = 1.0 - self.dropout_rate;
        Some(Array1::from_shape_fn(self.dim(), |_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }))
    }

    pub fn encode(&self, tokens: &[TokenId], mode: Mode<'_>) -> Array1<f64> {
        let mask = match mode {
            Mode::Eval => None,
            Mode::Train(rng) => self.sample_mask(rng),
        };
        self.encode_traced(tokens, mask).output
    }

    /// Mean-pooled embeddings, optional dropout, affine projection, tanh.
    /// An empty sequence encodes as a single pad token.
    pub fn encode_traced(&self, tokens: &[TokenId], mask: Option<Array1<f64>>) -> EncodeTrace {
        let tokens: Vec<TokenId> = if tokens.is_empty() { vec![PAD] } else { tokens.to_vec() };
        let mut pooled = Array1::<f64>::zeros(self.dim());
        for &t in &tokens {
            pooled += &self.embedding.row(t as usize);
        }
        pooled /= tokens.len() as f64;
        let dropped = match &mask {
            Some(m) => pooled * m,
            None => pooled,
        };
        let output = (dropped.dot(&self.projection) + &self.bias).mapv(f64::tanh);
        EncodeTrace { tokens, mask, dropped, output }
    }

    /// Accumulate parameter gradients given `d_output = dL/d(encoding)`.
    pub fn backward(&self, trace: &EncodeTrace, d_output: ArrayView1<'_, f64>, grads: &mut EncoderParams) {
        let dz = &d_output * &trace.output.mapv(|h| 1.0 - h * h);
        grads.bias += &dz;
        for (i, &x) in trace.dropped.iter().enumerate() {
            if x != 0.0 {
                grads.projection.row_mut(i).scaled_add(x, &dz);
            }
        }
        let mut d_pooled = self.projection.dot(&dz);
        if let Some(m) = &trace.mask {
            d_pooled *= m;
        }
        d_pooled /= trace.tokens.len() as f64;
        for &t in &trace.tokens {
            grads.embedding.row_mut(t as usize).scaled_add(1.0, &d_pooled);
        }
    }
}

fn normalize_rows(m: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>), EncoderError> {
    let norms = m.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(i) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(EncoderError::DegenerateInput(i));
    }
    let unit = m / &norms.view().insert_axis(Axis(1));
    Ok((unit, norms))
}

/// In-batch InfoNCE over cosine similarities:
/// `mean_i [ -log softmax_j(cos(a_i, b_j) / tau)[i] ]`.
pub fn contrastive_loss(a: &Array2<f64>, b: &Array2<f64>, tau: f64) -> Result<f64, EncoderError> {
    contrastive_loss_grad(a, b, tau).map(|(l, _, _)| l)
}

/// Loss together with its gradients with respect to `a` and `b`.
pub fn contrastive_loss_grad(
    a: &Array2<f64>,
    b: &Array2<f64>,
    tau: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>), EncoderError> {
    if tau <= 0.0 {
        return Err(EncoderError::Config(format!("temperature must be positive, got {tau}")));
    }
    let n = a.nrows();
    if n == 0 || b.nrows() != n || a.ncols() != b.ncols() {
        return Err(EncoderError::Config("encodings must be nonempty with equal shapes".into()));
    }
    let (ua, na) = normalize_rows(a)?;
    let (ub, nb) = normalize_rows(b)?;
    let cos = ua.dot(&ub.t());
    let mut loss = 0.0;
    // dL/dS with S = cos / tau
    let mut ds = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let row = cos.row(i).mapv(|c| c / tau);
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[i];
        for j in 0..n {
            ds[[i, j]] = (row[j] - lse).exp() / n as f64;
        }
        ds[[i, i]] -= 1.0 / n as f64;
    }
    loss /= n as f64;
    let dc = ds / tau;
    let dc_cos = &dc * &cos;
    // d cos_ij / d a_i = (ub_j - cos_ij ua_i) / |a_i|
    let row_k = dc_cos.sum_axis(Axis(1)).insert_axis(Axis(1));
    let col_k = dc_cos.sum_axis(Axis(0)).insert_axis(Axis(1));
    let da = (dc.dot(&ub) - &ua * &row_k) / &na.view().insert_axis(Axis(1));
    let db = (dc.t().dot(&ua) - &ub * &col_k) / &nb.view().insert_axis(Axis(1));
    Ok((loss, da, db))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub corrupt_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: 0.05,
            corrupt_rate: 0.15,
            batch_size: 64,
            epochs: 1,
            learning_rate: 1e-3,
            seed: 17,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if !(self.temperature > 0.0) {
            return Err(EncoderError::Config("temperature must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.corrupt_rate) {
            return Err(EncoderError::Config("corrupt_rate must be in [0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(EncoderError::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(EncoderError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Loss and parameter gradients for one batch of paired views, with the
/// dropout masks already fixed.
pub fn batch_loss_grad(
    params: &EncoderParams,
    views: &[(Vec<TokenId>, Option<Array1<f64>>, Vec<TokenId>, Option<Array1<f64>>)],
    tau: f64,
) -> Result<(f64, EncoderParams), EncoderError> {
    let d = params.dim();
    let n = views.len();
    let mut ta = Vec::with_capacity(n);
    let mut tb = Vec::with_capacity(n);
    let mut a = Array2::zeros((n, d));
    let mut b = Array2::zeros((n, d));
    for (i, (va, ma, vb, mb)) in views.iter().enumerate() {
        let x = params.encode_traced(va, ma.clone());
        let y = params.encode_traced(vb, mb.clone());
        a.row_mut(i).assign(&x.output);
        b.row_mut(i).assign(&y.output);
        ta.push(x);
        tb.push(y);
    }
    let (loss, da, db) = contrastive_loss_grad(&a, &b, tau)?;
    let mut grads = EncoderParams::zeros(params.vocab_size(), d, params.dropout_rate);
    for i in 0..n {
        params.backward(&ta[i], da.row(i), &mut grads);
        params.backward(&tb[i], db.row(i), &mut grads);
    }
    Ok((loss, grads))
}

/// Contrastive pretraining. Each utterance yields two views with independent
/// corruption draws and dropout masks; other utterances in the batch serve as
/// negatives.
pub fn pretrain(
    params: &EncoderParams,
    utterances: &[Vec<TokenId>],
    cfg: &ContrastiveConfig,
) -> Result<EncoderParams, EncoderError> {
    cfg.validate()?;
    if utterances.is_empty() {
        return Err(EncoderError::Config("no utterances to pretrain on".into()));
    }
    let mut params = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&params, AdamConfig::with_lr(cfg.learning_rate));
    let mut order: Vec<usize> = (0..utterances.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let views: Vec<_> = batch
                .iter()
                .map(|&i| {
                    let u = &utterances[i];
                    let va = corrupt_view(u, cfg.corrupt_rate, &mut rng);
                    let ma = params.sample_mask(&mut rng);
                    let vb = corrupt_view(u, cfg.corrupt_rate, &mut rng);
                    let mb = params.sample_mask(&mut rng);
                    (va, ma, vb, mb)
                })
                .collect();
            let (_, grads) = batch_loss_grad(&params, &views, cfg.temperature)?;
            opt.step(&mut params, &grads);
        }
    }
    Ok(params)
}
