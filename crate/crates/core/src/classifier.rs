//! Three linear heads (UI, SI, slot) over the shared encoder, trained jointly
//! with class-weighted binary cross-entropy summed over heads.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView1, ArrayViewD, ArrayViewMutD};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncodeTrace, EncoderParams};
use crate::params::{Adam, AdamConfig, Tensors};
use crate::taxonomy::{LabelSpace, LabelVector, NodeId, SlotLabel, OTHER};
use crate::text::TokenId;

#[derive(Debug, Error, PartialEq)]
pub enum ClassifierError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// One value per classification head.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerHead<T> {
    pub ui: T,
    pub si: T,
    pub slot: T,
}

impl<T> PerHead<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> PerHead<U> {
        PerHead { ui: f(&self.ui), si: f(&self.si), slot: f(&self.slot) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    /// d x K
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Head {
    fn new(dim: usize, k: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (dim + k) as f64).sqrt();
        Head {
            weight: Array2::from_shape_fn((dim, k), |_| rng.gen_range(-bound..bound)),
            bias: Array1::zeros(k),
        }
    }

    fn zeros(dim: usize, k: usize) -> Self {
        Head { weight: Array2::zeros((dim, k)), bias: Array1::zeros(k) }
    }

    fn logits(&self, h: &Array1<f64>) -> Array1<f64> {
        h.dot(&self.weight) + &self.bias
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub encoder: EncoderParams,
    pub heads: PerHead<Head>,
    /// Per-class loss weights; not learned.
    pub class_weights: PerHead<Array1<f64>>,
}

impl Tensors for ClassifierParams {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut v = self.encoder.tensors();
        for (name, h) in [("ui", &self.heads.ui), ("si", &self.heads.si), ("slot", &self.heads.slot)] {
            v.push((format!("head.{name}.weight"), h.weight.view().into_dyn()));
            v.push((format!("head.{name}.bias"), h.bias.view().into_dyn()));
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut v = self.encoder.tensors_mut();
        for h in [&mut self.heads.ui, &mut self.heads.si, &mut self.heads.slot] {
            v.push(h.weight.view_mut().into_dyn());
            v.push(h.bias.view_mut().into_dyn());
        }
        v
    }

    fn buffers(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![
            ("class_weights.ui".into(), self.class_weights.ui.view().into_dyn()),
            ("class_weights.si".into(), self.class_weights.si.view().into_dyn()),
            ("class_weights.slot".into(), self.class_weights.slot.view().into_dyn()),
        ]
    }

    fn buffers_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        vec![
            self.class_weights.ui.view_mut().into_dyn(),
            self.class_weights.si.view_mut().into_dyn(),
            self.class_weights.slot.view_mut().into_dyn(),
        ]
    }
}

impl ClassifierParams {
    pub fn new(space: &LabelSpace, encoder: EncoderParams, rng: &mut impl Rng) -> Self {
        let d = encoder.dim();
        ClassifierParams {
            heads: PerHead {
                ui: Head::new(d, space.k_ui(), rng),
                si: Head::new(d, space.k_si(), rng),
                slot: Head::new(d, space.k_slot(), rng),
            },
            class_weights: unit_weights(space),
            encoder,
        }
    }

    /// All-zero heads over the given encoder; used as a load target.
    pub fn zeros(space: &LabelSpace, encoder: EncoderParams) -> Self {
        let d = encoder.dim();
        ClassifierParams {
            heads: PerHead {
                ui: Head::zeros(d, space.k_ui()),
                si: Head::zeros(d, space.k_si()),
                slot: Head::zeros(d, space.k_slot()),
            },
            class_weights: unit_weights(space),
            encoder,
        }
    }

    fn grad_buffer(&self) -> Self {
        let mut g = self.clone();
        g.fill_zero();
        g
    }
}

fn unit_weights(space: &LabelSpace) -> PerHead<Array1<f64>> {
    PerHead {
        ui: Array1::ones(space.k_ui()),
        si: Array1::ones(space.k_si()),
        slot: Array1::ones(space.k_slot()),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierOutput {
    pub logits: PerHead<Array1<f64>>,
    pub probs: PerHead<Array1<f64>>,
}

impl ClassifierOutput {
    pub fn from_logits(logits: PerHead<Array1<f64>>) -> Self {
        let probs = logits.map(|l| l.mapv(sigmoid));
        ClassifierOutput { logits, probs }
    }
}

/// Eval-mode forward pass.
pub fn forward(params: &ClassifierParams, tokens: &[TokenId]) -> ClassifierOutput {
    let h = params.encoder.encode_traced(tokens, None).output;
    ClassifierOutput::from_logits(params.heads.map(|head| head.logits(&h)))
}

fn check_lengths(x: usize, y: usize, w: usize) -> Result<(), ClassifierError> {
    if x != y || x != w {
        return Err(ClassifierError::ShapeMismatch(format!("logits {x}, labels {y}, weights {w}")));
    }
    Ok(())
}

/// `-sum_i w_i [y_i ln s(x_i) + (1 - y_i) ln(1 - s(x_i))]`, computed as
/// `w_i [max(x, 0) - x y + ln(1 + e^{-|x|})]` so saturated logits stay finite.
pub fn bce_loss(logits: ArrayView1<'_, f64>, labels: ArrayView1<'_, f64>, weights: ArrayView1<'_, f64>) -> Result<f64, ClassifierError> {
    check_lengths(logits.len(), labels.len(), weights.len())?;
    Ok(logits
        .iter()
        .zip(labels)
        .zip(weights)
        .map(|((&x, &y), &w)| w * (x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()))
        .sum())
}

fn bce_grad(logits: &Array1<f64>, labels: &Array1<f64>, weights: &Array1<f64>) -> Array1<f64> {
    ndarray::Zip::from(logits).and(labels).and(weights).map_collect(|&x, &y, &w| w * (sigmoid(x) - y))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointLoss {
    pub total: f64,
    pub ui: f64,
    pub si: f64,
    pub slot: f64,
}

fn label_arrays(gold: &LabelVector) -> PerHead<Array1<f64>> {
    PerHead {
        ui: Array1::from(LabelVector::as_f64(&gold.ui)),
        si: Array1::from(LabelVector::as_f64(&gold.si)),
        slot: Array1::from(LabelVector::as_f64(&gold.slot)),
    }
}

/// Sum of the three per-head BCE losses.
pub fn joint_loss(
    output: &ClassifierOutput,
    gold: &LabelVector,
    weights: &PerHead<Array1<f64>>,
) -> Result<JointLoss, ClassifierError> {
    let y = label_arrays(gold);
    let ui = bce_loss(output.logits.ui.view(), y.ui.view(), weights.ui.view())?;
    let si = bce_loss(output.logits.si.view(), y.si.view(), weights.si.view())?;
    let slot = bce_loss(output.logits.slot.view(), y.slot.view(), weights.slot.view())?;
    Ok(JointLoss { total: ui + si + slot, ui, si, slot })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub tokens: Vec<TokenId>,
    pub labels: LabelVector,
}

/// Joint loss of one example and its gradient (scaled by `scale`) added into
/// `grads`. `mask` is the encoder dropout mask, `None` for eval behaviour.
pub fn example_loss_grad(
    params: &ClassifierParams,
    example: &TrainExample,
    mask: Option<Array1<f64>>,
    scale: f64,
    grads: &mut ClassifierParams,
) -> Result<JointLoss, ClassifierError> {
    let trace: EncodeTrace = params.encoder.encode_traced(&example.tokens, mask);
    let h = &trace.output;
    let output = ClassifierOutput::from_logits(params.heads.map(|head| head.logits(h)));
    let loss = joint_loss(&output, &example.labels, &params.class_weights)?;
    let y = label_arrays(&example.labels);
    let mut dh = Array1::<f64>::zeros(h.len());
    let pairs = [
        (&params.heads.ui, &mut grads.heads.ui, &output.logits.ui, &y.ui, &params.class_weights.ui),
        (&params.heads.si, &mut grads.heads.si, &output.logits.si, &y.si, &params.class_weights.si),
        (&params.heads.slot, &mut grads.heads.slot, &output.logits.slot, &y.slot, &params.class_weights.slot),
    ];
    for (head, g, logits, labels, w) in pairs {
        let dl = bce_grad(logits, labels, w) * scale;
        for (i, &hi) in h.iter().enumerate() {
            g.weight.row_mut(i).scaled_add(hi, &dl);
        }
        g.bias += &dl;
        dh += &head.weight.dot(&dl);
    }
    params.encoder.backward(&trace, dh.view(), &mut grads.encoder);
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub other_threshold: f64,
    /// Recompute inverse-frequency class weights from the training set.
    pub class_weighting: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-3,
            batch_size: 32,
            epochs: 8,
            seed: 7,
            other_threshold: 0.1,
            class_weighting: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        if !(self.other_threshold > 0.0 && self.other_threshold < 1.0) {
            return Err(ClassifierError::Config("other_threshold must be in (0, 1)".into()));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(ClassifierError::Config("batch_size and learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Inverse positive frequency per class, smoothed by the head's mean count
/// and normalized to mean 1.
pub fn inverse_frequency_weights(examples: &[TrainExample], space: &LabelSpace) -> PerHead<Array1<f64>> {
    let count = |k: usize, pick: &dyn Fn(&LabelVector) -> &Vec<bool>| {
        let mut c = Array1::<f64>::zeros(k);
        for e in examples {
            for (i, &b) in pick(&e.labels).iter().enumerate() {
                if b {
                    c[i] += 1.0;
                }
            }
        }
        let smooth = (c.sum() / k as f64).max(1.0);
        let w = c.mapv(|n| 1.0 / (n + smooth));
        let mean = w.mean().unwrap_or(1.0);
        w / mean
    };
    PerHead {
        ui: count(space.k_ui(), &|l| &l.ui),
        si: count(space.k_si(), &|l| &l.si),
        slot: count(space.k_slot(), &|l| &l.slot),
    }
}

/// Minibatch Adam on the mean joint loss; encoder and heads update together.
pub fn train(
    params: &ClassifierParams,
    examples: &[TrainExample],
    space: &LabelSpace,
    cfg: &TrainConfig,
) -> Result<ClassifierParams, ClassifierError> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(ClassifierError::Config("empty training set".into()));
    }
    let mut params = params.clone();
    if cfg.epochs == 0 {
        return Ok(params);
    }
    if cfg.class_weighting {
        params.class_weights = inverse_frequency_weights(examples, space);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&params, AdamConfig::with_lr(cfg.learning_rate));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = params.grad_buffer();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let mask = params.encoder.sample_mask(&mut rng);
                example_loss_grad(&params, &examples[i], mask, scale, &mut grads)?;
            }
            opt.step(&mut params, &grads);
        }
    }
    Ok(params)
}

/// Decoded label sets for one turn.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub ui: BTreeSet<String>,
    pub si: BTreeSet<String>,
    pub slots: BTreeSet<SlotLabel>,
}

fn decode_flat(names: &[String], probs: &Array1<f64>, other_threshold: f64) -> BTreeSet<String> {
    let max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max >= other_threshold) {
        return [OTHER.to_string()].into();
    }
    names.iter().zip(probs).filter(|(_, &p)| p >= 0.5).map(|(n, _)| n.clone()).collect()
}

fn argmax_by_id(ids: impl Iterator<Item = NodeId>, probs: &Array1<f64>) -> Option<NodeId> {
    // first maximum wins, so ties go to the smaller node id
    ids.fold(None, |best: Option<NodeId>, id| match best {
        Some(b) if probs[b.0] >= probs[id.0] => Some(b),
        _ => Some(id),
    })
}

/// Decode probabilities into label sets.
///
/// UI/SI: labels with probability >= 0.5, or exactly `{Other}` when every
/// class is below `other_threshold`. Slots: the best coarse node (if it
/// clears `other_threshold`), then the best of its children, kept only if
/// >= 0.5.
pub fn predict(probs: &PerHead<Array1<f64>>, other_threshold: f64, space: &LabelSpace) -> Prediction {
    let tree = &space.tree;
    let mut slots = BTreeSet::new();
    if let Some(c) = argmax_by_id(tree.coarse_nodes().iter().map(|n| n.id), &probs.slot) {
        if probs.slot[c.0] >= other_threshold {
            let fine = argmax_by_id(tree.children_of(c).into_iter().map(|n| n.id), &probs.slot)
                .filter(|f| probs.slot[f.0] >= 0.5);
            slots.insert(SlotLabel(
                tree.node(c).name.clone(),
                fine.map(|f| tree.node(f).name.clone()),
            ));
        }
    }
    Prediction {
        ui: decode_flat(&space.ui_labels, &probs.ui, other_threshold),
        si: decode_flat(&space.si_labels, &probs.si, other_threshold),
        slots,
    }
}
