//! End-to-end system: training every component from a corpus split, and
//! turn-by-turn response generation for evaluation and chat.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{forward, predict, ClassifierParams, Prediction};
use crate::corpus::{entity_history, CorpusSplit, Dialog, LocalKb, Turn};
use crate::decode::SearchConfig;
use crate::encoder::{pretrain, ContrastiveConfig, EncoderError, EncoderParams};
use crate::eval::{bleu4, combined, intent_prf, success_rate, CombinedWeights, EvalError, GroundedTurn, MetricsReport};
use crate::generator::{
    apply_inform_substitution, generate, kb_constraints, predict_entities, serialize_context, training_sequences, GenError,
    TurnContext, TurnLog,
};
use crate::kb::{lookup, KbQuery, KbResult};
use crate::lm::{lm_train, LmConfig, LmError, LmParams, LmTrainConfig};
use crate::taxonomy::{LabelSpace, SlotLabel, TaxonomyError, OTHER};
use crate::text::{tokenize_text, Special, Vocab};
use crate::weak::{run_pipeline, ProvenanceReport, WeakConfig, WeakError};

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("encoder: {0}")]
    Encoder(#[from] EncoderError),
    #[error("weak supervision: {0}")]
    Weak(#[from] WeakError),
    #[error("language model: {0}")]
    Lm(#[from] LmError),
    #[error("generation: {0}")]
    Gen(#[from] GenError),
    #[error("taxonomy: {0}")]
    Taxonomy(#[from] TaxonomyError),
    #[error("evaluation: {0}")]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Data(String),
    #[error("predictions do not align with the gold split: {0}")]
    Alignment(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub dim: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { dim: 64, dropout: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmShape {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub window: usize,
}

impl Default for LmShape {
    fn default() -> Self {
        LmShape { width: 64, layers: 2, heads: 2, window: 256 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam: usize,
    pub max_len: usize,
    pub other_threshold: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { beam: 3, max_len: 48, other_threshold: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    pub seed: u64,
    pub skip_pretrain: bool,
    pub encoder: EncoderConfig,
    pub contrastive: ContrastiveConfig,
    pub weak: WeakConfig,
    pub lm: LmShape,
    pub lm_train: LmTrainConfig,
    pub decode: DecodeConfig,
    pub combined: CombinedWeights,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            seed: 42,
            skip_pretrain: false,
            encoder: EncoderConfig::default(),
            contrastive: ContrastiveConfig::default(),
            weak: WeakConfig::default(),
            lm: LmShape::default(),
            lm_train: LmTrainConfig::default(),
            decode: DecodeConfig::default(),
            combined: CombinedWeights::default(),
        }
    }
}

/// Per-stage seeds derived from the master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MasterSeeds {
    pub encoder_init: u64,
    pub contrastive: u64,
    pub weak: u64,
    pub lm_init: u64,
    pub lm_train: u64,
}

impl MasterSeeds {
    pub fn from_master(seed: u64) -> Self {
        MasterSeeds {
            encoder_init: seed,
            contrastive: seed.wrapping_add(100),
            weak: seed.wrapping_add(200),
            lm_init: seed.wrapping_add(300),
            lm_train: seed.wrapping_add(400),
        }
    }
}

/// Vocabulary over every text a component can see: utterances, responses,
/// label names and KB strings.
pub fn build_vocab(split: &CorpusSplit, space: &LabelSpace) -> Vocab {
    let mut texts: Vec<&str> = Vec::new();
    for d in split.iter() {
        for t in &d.turns {
            texts.push(&t.user_utterance);
            texts.push(&t.system_response);
        }
        for e in &d.local_kb.entities {
            texts.push(&e.name);
            texts.extend(e.attributes.iter().flat_map(|(k, v)| [k.as_str(), v.as_str()]));
        }
    }
    texts.extend(space.ui_labels.iter().chain(&space.si_labels).map(String::as_str));
    texts.push(OTHER);
    texts.push(crate::generator::INFORM);
    Vocab::build(texts)
}

/// What the classifier and entity predictor would supply for a turn.
#[derive(Clone, Debug, PartialEq)]
pub struct TurnAnalysis {
    pub prediction: Prediction,
    pub entities: Vec<String>,
}

impl TurnAnalysis {
    /// Gold labels and entities of a corpus turn.
    pub fn gold(turn: &Turn) -> Self {
        TurnAnalysis {
            prediction: Prediction {
                ui: turn.user_intents.clone(),
                si: turn.service_intents.clone(),
                slots: turn.slot_labels.clone(),
            },
            entities: turn.mentioned_entities.clone(),
        }
    }
}

/// Per-dialog state: the local KB and entities mentioned so far.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DialogState {
    pub kb: LocalKb,
    pub history: Vec<String>,
}

impl DialogState {
    pub fn new(kb: LocalKb) -> Self {
        DialogState { kb, history: Vec::new() }
    }

    fn record(&mut self, names: &[String]) {
        self.history = entity_history([self.history.as_slice(), names]);
    }
}

fn kb_for(space: &LabelSpace, state: &DialogState, analysis: &TurnAnalysis) -> Result<KbResult, TaxonomyError> {
    let Some(slot) = analysis.prediction.slots.iter().next() else {
        return Ok(KbResult::default());
    };
    let q = KbQuery::new(&space.tree, slot, analysis.entities.first().cloned(), analysis.prediction.ui.clone())?;
    Ok(lookup(&state.kb, &space.tree, &q, &state.history))
}

/// Trained components needed to respond.
#[derive(Clone, Debug, PartialEq)]
pub struct DialogSystem {
    pub vocab: Vocab,
    pub space: LabelSpace,
    pub classifier: ClassifierParams,
    pub lm: LmParams,
    pub decode: DecodeConfig,
}

impl DialogSystem {
    pub fn analyze(&self, state: &DialogState, utterance: &str) -> TurnAnalysis {
        let out = forward(&self.classifier, &self.vocab.tokenize(utterance));
        let prediction = predict(&out.probs, self.decode.other_threshold, &self.space);
        let entities = predict_entities(&self.lm, &self.vocab, &state.kb, &state.history, utterance);
        TurnAnalysis { prediction, entities }
    }

    /// Look up the KB, substitute `inform`, serialize and decode with the KB
    /// values forced. Updates the dialog history.
    pub fn respond_with(&self, state: &mut DialogState, utterance: &str, analysis: &TurnAnalysis) -> Result<TurnLog, SystemError> {
        let kb = kb_for(&self.space, state, analysis)?;
        let p = &analysis.prediction;
        let si_context = apply_inform_substitution(&p.si, &kb);
        let mut current = analysis.entities.clone();
        for t in &kb.triples {
            if !current.contains(&t.0) {
                current.push(t.0.clone());
            }
        }
        let entities = entity_history([state.history.as_slice(), current.as_slice()]);
        let budget = self.lm.config.window.saturating_sub(self.decode.max_len);
        let context = serialize_context(&self.vocab, &p.ui, &si_context, &entities, utterance, &kb, budget)?;
        let constraints = kb_constraints(&self.vocab, &kb);
        let search = SearchConfig { beam: self.decode.beam, max_len: self.decode.max_len, eos: Special::Eos.id() };
        let out = generate(&self.lm, &self.vocab, &context, &constraints, &search)?;
        state.record(&current);
        Ok(TurnLog {
            dialog_id: String::new(),
            turn_index: 0,
            user_utterance: utterance.to_string(),
            ui: p.ui.clone(),
            si: p.si.clone(),
            si_context,
            slots: p.slots.clone(),
            entities: current,
            kb,
            constraints: constraints.iter().map(|c| self.vocab.decode(c)).collect(),
            score: out.score,
            forced: out.forced,
            response: self.vocab.decode(&out.tokens),
        })
    }

    pub fn respond(&self, state: &mut DialogState, utterance: &str) -> Result<TurnLog, SystemError> {
        let analysis = self.analyze(state, utterance);
        self.respond_with(state, utterance, &analysis)
    }
}

/// LM training sequences from gold-labeled dialogs.
pub fn lm_examples(dialogs: &[Dialog], vocab: &Vocab, space: &LabelSpace, window: usize) -> Result<Vec<crate::lm::LmExample>, SystemError> {
    let mut out = Vec::new();
    for d in dialogs.iter().filter(|d| d.labeled) {
        let mut state = DialogState::new(d.local_kb.clone());
        for t in &d.turns {
            let analysis = TurnAnalysis::gold(t);
            let kb = kb_for(space, &state, &analysis)?;
            let ctx = TurnContext {
                ui: &t.user_intents,
                si: &t.service_intents,
                history: &state.history,
                current: &t.mentioned_entities,
                kb: &kb,
            };
            let (main, ent) = training_sequences(vocab, t, &ctx, window);
            out.extend(main);
            out.extend(ent);
            state.record(&t.mentioned_entities);
        }
    }
    Ok(out)
}

/// Everything produced by training, for checkpointing and reporting.
pub struct Trained {
    pub system: DialogSystem,
    pub encoder: EncoderParams,
    pub ui_teacher: ClassifierParams,
    pub provenance: ProvenanceReport,
    pub seeds: MasterSeeds,
}

/// Contrastive pretraining on user utterances from D and U.
pub fn pretrain_encoder(split: &CorpusSplit, vocab: &Vocab, cfg: &SystemConfig) -> Result<EncoderParams, SystemError> {
    let seeds = MasterSeeds::from_master(cfg.seed);
    let init = EncoderParams::new(vocab.len(), cfg.encoder.dim, cfg.encoder.dropout, &mut ChaCha8Rng::seed_from_u64(seeds.encoder_init));
    if cfg.skip_pretrain {
        return Ok(init);
    }
    let utterances: Vec<_> = split
        .labeled
        .iter()
        .chain(&split.unlabeled)
        .flat_map(|d| d.turns.iter().map(|t| vocab.tokenize(&t.user_utterance)))
        .collect();
    if utterances.is_empty() {
        return Ok(init);
    }
    let ccfg = ContrastiveConfig { seed: seeds.contrastive, ..cfg.contrastive.clone() };
    Ok(pretrain(&init, &utterances, &ccfg)?)
}

/// Train all components: encoder, weak-supervision classifier, LM.
pub fn train_system(split: &CorpusSplit, space: &LabelSpace, vocab: Vocab, encoder: EncoderParams, cfg: &SystemConfig) -> Result<Trained, SystemError> {
    let seeds = MasterSeeds::from_master(cfg.seed);
    let weak_cfg = WeakConfig { seed: seeds.weak, ..cfg.weak.clone() };
    let weak = run_pipeline(&split.labeled, &split.unlabeled, &split.dev, &encoder, &vocab, space, &weak_cfg)?;

    let lm_cfg = LmConfig { vocab_size: vocab.len(), width: cfg.lm.width, layers: cfg.lm.layers, heads: cfg.lm.heads, window: cfg.lm.window };
    let init = LmParams::new(lm_cfg, &mut ChaCha8Rng::seed_from_u64(seeds.lm_init))?;
    let examples = lm_examples(&split.labeled, &vocab, space, cfg.lm.window)?;
    let lm = if examples.is_empty() {
        init
    } else {
        lm_train(&init, &examples, &LmTrainConfig { seed: seeds.lm_train, ..cfg.lm_train.clone() })?
    };
    Ok(Trained {
        system: DialogSystem { vocab, space: space.clone(), classifier: weak.student, lm, decode: cfg.decode },
        encoder,
        ui_teacher: weak.ui_teacher,
        provenance: weak.report,
        seeds,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Predicted intents and entities drive lookup and generation.
    pub predicted: MetricsReport,
    /// Gold intents and entities drive lookup and generation; intent scores
    /// are still the classifier's.
    pub oracle: MetricsReport,
    pub turns: usize,
    pub dialogs: usize,
}

/// Per-turn generation logs for both modes.
pub struct EvaluationLogs {
    pub predicted: Vec<TurnLog>,
    pub oracle: Vec<TurnLog>,
}

/// Score a classifier's intent predictions on labeled dialogs.
pub fn classification_scores(
    classifier: &ClassifierParams,
    vocab: &Vocab,
    space: &LabelSpace,
    dialogs: &[Dialog],
    other_threshold: f64,
) -> Result<(crate::eval::Prf, crate::eval::Prf, f64), SystemError> {
    let mut pred = Vec::new();
    let mut gold = Vec::new();
    for d in dialogs {
        for t in &d.turns {
            let out = forward(classifier, &vocab.tokenize(&t.user_utterance));
            pred.push(predict(&out.probs, other_threshold, space));
            gold.push(TurnAnalysis::gold(t).prediction);
        }
    }
    let col = |f: &dyn Fn(&Prediction) -> BTreeSet<String>, xs: &[Prediction]| xs.iter().map(f).collect::<Vec<_>>();
    let ui = intent_prf(&col(&|p| p.ui.clone(), &pred), &col(&|p| p.ui.clone(), &gold))?;
    let si = intent_prf(&col(&|p| p.si.clone(), &pred), &col(&|p| p.si.clone(), &gold))?;
    let ps: Vec<_> = pred.iter().map(|p| p.slots.clone()).collect();
    let gs: Vec<_> = gold.iter().map(|p| p.slots.clone()).collect();
    let slot = intent_prf(&ps, &gs)?.f1;
    Ok((ui, si, slot))
}

fn generation_scores<'a>(dialogs: &[Dialog], responses: impl Iterator<Item = &'a str>) -> Result<(f64, crate::eval::SuccessRate), SystemError> {
    let responses: Vec<&str> = responses.collect();
    let hyps: Vec<Vec<String>> = responses.iter().map(|r| tokenize_text(r)).collect();
    let refs: Vec<Vec<String>> = dialogs.iter().flat_map(|d| d.turns.iter().map(|t| tokenize_text(&t.system_response))).collect();
    let bleu = bleu4(&hyps, &refs)?;
    let mut it = responses.iter();
    let grounded: Vec<Vec<GroundedTurn>> = dialogs
        .iter()
        .map(|d| {
            d.turns
                .iter()
                .map(|t| GroundedTurn { gold: &t.gold_kb_triples, response: it.next().expect("one response per turn") })
                .collect()
        })
        .collect();
    Ok((bleu, success_rate(&grounded)))
}

/// Run both generation modes over labeled dialogs and compute metrics.
pub fn evaluate(system: &DialogSystem, dialogs: &[Dialog], weights: &CombinedWeights) -> Result<(Evaluation, EvaluationLogs), SystemError> {
    if let Some(d) = dialogs.iter().find(|d| !d.labeled) {
        return Err(SystemError::Data(format!("dialog {} is unlabeled", d.dialog_id)));
    }
    let (ui, si, slot_f1) = classification_scores(&system.classifier, &system.vocab, &system.space, dialogs, system.decode.other_threshold)?;
    let mut logs = EvaluationLogs { predicted: Vec::new(), oracle: Vec::new() };
    for d in dialogs {
        let mut pred_state = DialogState::new(d.local_kb.clone());
        let mut gold_state = DialogState::new(d.local_kb.clone());
        for t in &d.turns {
            let analysis = system.analyze(&pred_state, &t.user_utterance);
            let mut log = system.respond_with(&mut pred_state, &t.user_utterance, &analysis)?;
            log.dialog_id = d.dialog_id.clone();
            log.turn_index = t.turn_index;
            logs.predicted.push(log);
            let mut log = system.respond_with(&mut gold_state, &t.user_utterance, &TurnAnalysis::gold(t))?;
            log.dialog_id = d.dialog_id.clone();
            log.turn_index = t.turn_index;
            logs.oracle.push(log);
        }
    }
    let report = |logs: &[TurnLog]| -> Result<MetricsReport, SystemError> {
        let (bleu, success) = generation_scores(dialogs, logs.iter().map(|l| l.response.as_str()))?;
        let mut r = MetricsReport {
            ui,
            si,
            slot_f1,
            bleu4: bleu,
            success_rate: success.rate,
            success_defined: success.defined,
            combined: 0.0,
        };
        r.combined = combined(&r, weights);
        Ok(r)
    };
    let eval = Evaluation {
        predicted: report(&logs.predicted)?,
        oracle: report(&logs.oracle)?,
        turns: logs.predicted.len(),
        dialogs: dialogs.len(),
    };
    Ok((eval, logs))
}

/// One predicted turn as read from a predictions file. Generation logs parse
/// as records too; their extra fields are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub dialog_id: String,
    pub turn_index: u32,
    pub ui: BTreeSet<String>,
    pub si: BTreeSet<String>,
    #[serde(default)]
    pub slots: BTreeSet<SlotLabel>,
    pub response: String,
}

impl PredictionRecord {
    /// The gold annotation of a turn, as a perfect prediction.
    pub fn gold(dialog_id: &str, turn: &Turn) -> Self {
        PredictionRecord {
            dialog_id: dialog_id.to_string(),
            turn_index: turn.turn_index,
            ui: turn.user_intents.clone(),
            si: turn.service_intents.clone(),
            slots: turn.slot_labels.clone(),
            response: turn.system_response.clone(),
        }
    }
}

/// Score externally produced predictions against labeled dialogs. Records
/// must follow the dialogs' turn order one to one.
pub fn score_predictions(dialogs: &[Dialog], records: &[PredictionRecord], weights: &CombinedWeights) -> Result<MetricsReport, SystemError> {
    let n_gold: usize = dialogs.iter().map(|d| d.turns.len()).sum();
    if records.len() != n_gold {
        return Err(SystemError::Alignment(format!("{} predicted turns vs {} gold turns", records.len(), n_gold)));
    }
    let gold_keys = dialogs.iter().flat_map(|d| d.turns.iter().map(move |t| (d.dialog_id.as_str(), t.turn_index)));
    for (i, (r, (id, ix))) in records.iter().zip(gold_keys).enumerate() {
        if r.dialog_id != id || r.turn_index != ix {
            return Err(SystemError::Alignment(format!(
                "record {i} is {}#{} but gold turn {i} is {id}#{ix}",
                r.dialog_id, r.turn_index
            )));
        }
    }
    let gold: Vec<&Turn> = dialogs.iter().flat_map(|d| &d.turns).collect();
    let col = |f: &dyn Fn(&PredictionRecord) -> BTreeSet<String>| records.iter().map(f).collect::<Vec<_>>();
    let ui = intent_prf(&col(&|r| r.ui.clone()), &gold.iter().map(|t| t.user_intents.clone()).collect::<Vec<_>>())?;
    let si = intent_prf(&col(&|r| r.si.clone()), &gold.iter().map(|t| t.service_intents.clone()).collect::<Vec<_>>())?;
    let slots: Vec<_> = records.iter().map(|r| r.slots.clone()).collect();
    let slot_f1 = intent_prf(&slots, &gold.iter().map(|t| t.slot_labels.clone()).collect::<Vec<_>>())?.f1;
    let (bleu, success) = generation_scores(dialogs, records.iter().map(|r| r.response.as_str()))?;
    let mut r = MetricsReport { ui, si, slot_f1, bleu4: bleu, success_rate: success.rate, success_defined: success.defined, combined: 0.0 };
    r.combined = combined(&r, weights);
    Ok(r)
}
