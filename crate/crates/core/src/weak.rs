//! Teacher/student weak supervision: role-specific teachers pseudo-label
//! unlabeled turns above calibrated per-class thresholds, a student learns
//! from the pseudo-labels and is then fine-tuned on the labeled data.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{forward, train, ClassifierError, ClassifierParams, PerHead, TrainConfig, TrainExample};
use crate::corpus::{Dialog, Turn};
use crate::encoder::EncoderParams;
use crate::params::digest;
use crate::taxonomy::{LabelSets, LabelSpace, LabelVector, TaxonomyError};
use crate::text::Vocab;

#[derive(Debug, Error)]
pub enum WeakError {
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Which side of the conversation a teacher reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Service,
}

impl Role {
    pub fn text(self, turn: &Turn) -> &str {
        match self {
            Role::User => &turn.user_utterance,
            Role::Service => &turn.system_response,
        }
    }
}

fn gold_vector(turn: &Turn, space: &LabelSpace) -> Result<LabelVector, TaxonomyError> {
    space.encode(&LabelSets {
        ui: turn.user_intents.clone(),
        si: turn.service_intents.clone(),
        slots: turn.slot_labels.clone(),
    })
}

/// One classifier example per labeled turn, reading the role's text.
pub fn labeled_examples(dialogs: &[Dialog], role: Role, vocab: &Vocab, space: &LabelSpace) -> Result<Vec<TrainExample>, WeakError> {
    let mut out = Vec::new();
    for d in dialogs.iter().filter(|d| d.labeled) {
        for t in &d.turns {
            out.push(TrainExample { tokens: vocab.tokenize(role.text(t)), labels: gold_vector(t, space)? });
        }
    }
    Ok(out)
}

/// Fresh heads over a copy of `encoder`, seeded.
pub fn fresh_classifier(space: &LabelSpace, encoder: &EncoderParams, seed: u64) -> ClassifierParams {
    ClassifierParams::new(space, encoder.clone(), &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn train_teacher(
    role: Role,
    labeled: &[Dialog],
    init: &ClassifierParams,
    vocab: &Vocab,
    space: &LabelSpace,
    cfg: &TrainConfig,
) -> Result<ClassifierParams, WeakError> {
    let examples = labeled_examples(labeled, role, vocab, space)?;
    if examples.is_empty() {
        return Err(WeakError::EmptyDataset(format!("no labeled turns for the {role:?} teacher")));
    }
    Ok(train(init, &examples, space, cfg)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    pub dialog_id: String,
    pub turn_index: u32,
    pub probs: PerHead<Vec<f64>>,
    pub role: Role,
}

/// Teacher probabilities for every turn, ordered by (dialog_id, turn_index).
pub fn score_unlabeled(teacher: &ClassifierParams, role: Role, dialogs: &[Dialog], vocab: &Vocab) -> Vec<ScoredExample> {
    let mut out: Vec<ScoredExample> = dialogs
        .iter()
        .flat_map(|d| {
            d.turns.iter().map(move |t| {
                let out = forward(teacher, &vocab.tokenize(role.text(t)));
                ScoredExample {
                    dialog_id: d.dialog_id.clone(),
                    turn_index: t.turn_index,
                    probs: out.probs.map(|p| p.to_vec()),
                    role,
                }
            })
        })
        .collect();
    out.sort_by(|a, b| (&a.dialog_id, a.turn_index).cmp(&(&b.dialog_id, b.turn_index)));
    out
}

/// Per-class selection thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy(pub PerHead<Vec<f64>>);

impl ThresholdPolicy {
    pub fn uniform(space: &LabelSpace, rho: f64) -> Self {
        ThresholdPolicy(PerHead {
            ui: vec![rho; space.k_ui()],
            si: vec![rho; space.k_si()],
            slot: vec![rho; space.k_slot()],
        })
    }
}

pub const FALLBACK_THRESHOLD: f64 = 0.95;

/// Candidate thresholds 0.05, 0.10, ..., 0.95.
pub fn threshold_grid() -> Vec<f64> {
    (1..=19).map(|k| k as f64 / 20.0).collect()
}

/// Fewest positive predictions a cut needs on validation before it can qualify.
pub const MIN_SUPPORT: usize = 20;

/// Wilson score lower bound at one standard deviation.
fn precision_lower_bound(tp: usize, n: usize) -> f64 {
    let n = n as f64;
    let p = tp as f64 / n;
    (p + 0.5 / n - (p * (1.0 - p) / n + 0.25 / (n * n)).sqrt()) / (1.0 + 1.0 / n)
}

/// Smallest grid value whose positive predictions reach `target` precision
/// with margin: at least [`MIN_SUPPORT`] predictions and a one-sigma lower
/// bound at or above `target` (below 1; at 1 every prediction must be right).
fn calibrate_class(scores: &[f64], gold: &[bool], target: f64) -> f64 {
    for rho in threshold_grid() {
        let (mut tp, mut fp) = (0usize, 0usize);
        for (&s, &g) in scores.iter().zip(gold) {
            if s >= rho {
                if g {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        let n = tp + fp;
        if n < MIN_SUPPORT {
            continue;
        }
        let precise = if target >= 1.0 { fp == 0 } else { precision_lower_bound(tp, n) >= target };
        if precise {
            return rho;
        }
    }
    FALLBACK_THRESHOLD
}

/// Precision-targeted grid search per class on a labeled validation split.
pub fn calibrate_thresholds(
    teacher: &ClassifierParams,
    role: Role,
    validation: &[Dialog],
    vocab: &Vocab,
    space: &LabelSpace,
    target_precision: f64,
) -> Result<ThresholdPolicy, WeakError> {
    if !(target_precision > 0.0 && target_precision <= 1.0) {
        return Err(WeakError::Config("target precision must be in (0, 1]".into()));
    }
    let examples = labeled_examples(validation, role, vocab, space)?;
    if examples.is_empty() {
        return Err(WeakError::EmptyDataset("no labeled validation turns".into()));
    }
    let outputs: Vec<PerHead<Vec<f64>>> =
        examples.iter().map(|e| forward(teacher, &e.tokens).probs.map(|p| p.to_vec())).collect();
    let head = |k: usize, probs: &dyn Fn(&PerHead<Vec<f64>>) -> &Vec<f64>, gold: &dyn Fn(&LabelVector) -> &Vec<bool>| {
        (0..k)
            .map(|c| {
                let s: Vec<f64> = outputs.iter().map(|o| probs(o)[c]).collect();
                let g: Vec<bool> = examples.iter().map(|e| gold(&e.labels)[c]).collect();
                calibrate_class(&s, &g, target_precision)
            })
            .collect()
    };
    Ok(ThresholdPolicy(PerHead {
        ui: head(space.k_ui(), &|o| &o.ui, &|l| &l.ui),
        si: head(space.k_si(), &|o| &o.si, &|l| &l.si),
        slot: head(space.k_slot(), &|o| &o.slot, &|l| &l.slot),
    }))
}

/// Which head decides whether a turn is kept.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gate {
    /// Keep on any UI class; pseudo-label UI and slot classes.
    Ui,
    /// Keep on any SI class; pseudo-label SI classes.
    Si,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabeled {
    pub dialog_id: String,
    pub turn_index: u32,
    pub labels: LabelVector,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// After the UI gate.
    UserFiltered,
    /// After the UI and SI gates.
    Final,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakDataset {
    pub stage: Stage,
    pub turns: Vec<PseudoLabeled>,
    /// Kept pseudo-labels per class, keyed `head:label`.
    pub class_counts: IndexMap<String, usize>,
}

fn passing(probs: &[f64], rho: &[f64]) -> Vec<bool> {
    probs.iter().zip(rho).map(|(p, r)| p >= r).collect()
}

/// Keep turns with at least one gated class at or above its threshold.
///
/// Slot pseudo-labels also set the parent of any passing fine node so the
/// label vector stays hierarchy-consistent.
pub fn select(scored: &[ScoredExample], policy: &ThresholdPolicy, gate: Gate, space: &LabelSpace) -> WeakDataset {
    let p = &policy.0;
    let mut turns = Vec::new();
    for s in scored {
        let mut labels = LabelVector {
            ui: vec![false; space.k_ui()],
            si: vec![false; space.k_si()],
            slot: vec![false; space.k_slot()],
        };
        match gate {
            Gate::Ui => {
                labels.ui = passing(&s.probs.ui, &p.ui);
                if !labels.ui.iter().any(|&b| b) {
                    continue;
                }
                labels.slot = passing(&s.probs.slot, &p.slot);
                for f in space.tree.fine_nodes() {
                    if labels.slot[f.id.0] {
                        labels.slot[f.parent.expect("fine node").0] = true;
                    }
                }
            }
            Gate::Si => {
                labels.si = passing(&s.probs.si, &p.si);
                if !labels.si.iter().any(|&b| b) {
                    continue;
                }
            }
        }
        turns.push(PseudoLabeled { dialog_id: s.dialog_id.clone(), turn_index: s.turn_index, labels });
    }
    let stage = match gate {
        Gate::Ui => Stage::UserFiltered,
        Gate::Si => Stage::Final,
    };
    WeakDataset { stage, class_counts: class_counts(&turns, space), turns }
}

fn class_counts(turns: &[PseudoLabeled], space: &LabelSpace) -> IndexMap<String, usize> {
    let mut m = IndexMap::new();
    let slot_names = space.tree.nodes().iter().map(|n| match n.parent {
        Some(p) => format!("{}/{}", space.tree.node(p).name, n.name),
        None => n.name.clone(),
    });
    let names = space
        .ui_labels
        .iter()
        .map(|l| format!("ui:{l}"))
        .chain(space.si_labels.iter().map(|l| format!("si:{l}")))
        .chain(slot_names.map(|l| format!("slot:{l}")));
    for (i, name) in names.enumerate() {
        let count = turns
            .iter()
            .filter(|t| t.labels.ui.iter().chain(&t.labels.si).chain(&t.labels.slot).nth(i) == Some(&true))
            .count();
        m.insert(name, count);
    }
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeakConfig {
    pub teacher: TrainConfig,
    pub student: TrainConfig,
    pub finetune: TrainConfig,
    pub target_precision: f64,
    pub seed: u64,
}

impl Default for WeakConfig {
    fn default() -> Self {
        WeakConfig {
            teacher: TrainConfig { epochs: 20, ..TrainConfig::default() },
            student: TrainConfig { epochs: 3, ..TrainConfig::default() },
            finetune: TrainConfig { epochs: 20, ..TrainConfig::default() },
            target_precision: 0.9,
            seed: 0,
        }
    }
}

/// Seeds used by each stage (head initialization and data order).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub ui_teacher: u64,
    pub si_teacher: u64,
    pub student: u64,
    pub finetune: u64,
}

impl StageSeeds {
    pub fn from_base(seed: u64) -> Self {
        StageSeeds {
            ui_teacher: seed.wrapping_add(1),
            si_teacher: seed.wrapping_add(2),
            student: seed.wrapping_add(3),
            finetune: seed.wrapping_add(4),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceReport {
    pub labeled_turns: usize,
    pub unlabeled_turns: usize,
    /// |D̂_u|: turns passing the UI gate.
    pub user_filtered_turns: usize,
    /// |D̂|: turns passing both gates.
    pub selected_turns: usize,
    pub ui_policy: ThresholdPolicy,
    pub si_policy: ThresholdPolicy,
    pub user_filtered_counts: IndexMap<String, usize>,
    pub selected_counts: IndexMap<String, usize>,
    pub student_pretrained_on_pseudo_labels: bool,
    pub target_precision: f64,
    pub seeds: StageSeeds,
    /// sha256 of each stage's checkpoint bytes.
    pub digests: BTreeMap<String, String>,
}

pub struct PipelineOutput {
    pub student: ClassifierParams,
    pub ui_teacher: ClassifierParams,
    pub si_teacher: ClassifierParams,
    pub selected: WeakDataset,
    pub report: ProvenanceReport,
}

fn with_seed(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..cfg.clone() }
}

/// Run the five stages: UI teacher, score and UI-filter U, SI teacher and
/// SI-filter, student on the pseudo-labels, fine-tune on D.
pub fn run_pipeline(
    labeled: &[Dialog],
    unlabeled: &[Dialog],
    validation: &[Dialog],
    encoder: &EncoderParams,
    vocab: &Vocab,
    space: &LabelSpace,
    cfg: &WeakConfig,
) -> Result<PipelineOutput, WeakError> {
    let seeds = StageSeeds::from_base(cfg.seed);
    let mut digests = BTreeMap::new();

    let ui_teacher = train_teacher(
        Role::User,
        labeled,
        &fresh_classifier(space, encoder, seeds.ui_teacher),
        vocab,
        space,
        &with_seed(&cfg.teacher, seeds.ui_teacher),
    )?;
    digests.insert("ui_teacher".to_string(), digest(&ui_teacher));
    let ui_policy = calibrate_thresholds(&ui_teacher, Role::User, validation, vocab, space, cfg.target_precision)?;
    let scored = score_unlabeled(&ui_teacher, Role::User, unlabeled, vocab);
    let user_filtered = select(&scored, &ui_policy, Gate::Ui, space);

    let si_teacher = train_teacher(
        Role::Service,
        labeled,
        &fresh_classifier(space, encoder, seeds.si_teacher),
        vocab,
        space,
        &with_seed(&cfg.teacher, seeds.si_teacher),
    )?;
    digests.insert("si_teacher".to_string(), digest(&si_teacher));
    let si_policy = calibrate_thresholds(&si_teacher, Role::Service, validation, vocab, space, cfg.target_precision)?;

    // score only the UI-filtered turns with the SI teacher
    let by_id: BTreeMap<&str, &Dialog> = unlabeled.iter().map(|d| (d.dialog_id.as_str(), d)).collect();
    let kept_turns: BTreeMap<(&str, u32), &Turn> = user_filtered
        .turns
        .iter()
        .map(|p| {
            let d = by_id[p.dialog_id.as_str()];
            let t = d.turns.iter().find(|t| t.turn_index == p.turn_index).expect("selected turn exists");
            ((d.dialog_id.as_str(), t.turn_index), t)
        })
        .collect();
    let si_scored: Vec<ScoredExample> = user_filtered
        .turns
        .iter()
        .map(|p| {
            let t = kept_turns[&(p.dialog_id.as_str(), p.turn_index)];
            ScoredExample {
                dialog_id: p.dialog_id.clone(),
                turn_index: p.turn_index,
                probs: forward(&si_teacher, &vocab.tokenize(&t.system_response)).probs.map(|v| v.to_vec()),
                role: Role::Service,
            }
        })
        .collect();
    let si_pass = select(&si_scored, &si_policy, Gate::Si, space);
    let ui_labels: BTreeMap<(&str, u32), &LabelVector> =
        user_filtered.turns.iter().map(|p| ((p.dialog_id.as_str(), p.turn_index), &p.labels)).collect();
    let final_turns: Vec<PseudoLabeled> = si_pass
        .turns
        .iter()
        .map(|p| {
            let ui = ui_labels[&(p.dialog_id.as_str(), p.turn_index)];
            PseudoLabeled {
                dialog_id: p.dialog_id.clone(),
                turn_index: p.turn_index,
                labels: LabelVector { ui: ui.ui.clone(), si: p.labels.si.clone(), slot: ui.slot.clone() },
            }
        })
        .collect();
    let selected = WeakDataset { stage: Stage::Final, class_counts: class_counts(&final_turns, space), turns: final_turns };

    let pseudo_examples: Vec<TrainExample> = selected
        .turns
        .iter()
        .map(|p| {
            let t = kept_turns[&(p.dialog_id.as_str(), p.turn_index)];
            TrainExample { tokens: vocab.tokenize(&t.user_utterance), labels: p.labels.clone() }
        })
        .collect();
    let mut student = fresh_classifier(space, encoder, seeds.student);
    let pretrained = !pseudo_examples.is_empty();
    if pretrained {
        student = train(&student, &pseudo_examples, space, &with_seed(&cfg.student, seeds.student))?;
        digests.insert("student_pseudo".to_string(), digest(&student));
    }
    let labeled_user = labeled_examples(labeled, Role::User, vocab, space)?;
    student = train(&student, &labeled_user, space, &with_seed(&cfg.finetune, seeds.finetune))?;
    digests.insert("student".to_string(), digest(&student));

    let report = ProvenanceReport {
        labeled_turns: labeled_user.len(),
        unlabeled_turns: unlabeled.iter().map(|d| d.turns.len()).sum(),
        user_filtered_turns: user_filtered.turns.len(),
        selected_turns: selected.turns.len(),
        ui_policy,
        si_policy,
        user_filtered_counts: user_filtered.class_counts,
        selected_counts: selected.class_counts.clone(),
        student_pretrained_on_pseudo_labels: pretrained,
        target_precision: cfg.target_precision,
        seeds,
        digests,
    };
    Ok(PipelineOutput { student, ui_teacher, si_teacher, selected, report })
}
