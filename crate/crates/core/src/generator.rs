//! Context serialization, entity prediction and KB-forced response
//! generation.
//!
//! Response sequences (the LM learns everything after `<sys>`):
//!
//! ```text
//! <ui> UI labels (sorted) <si> SI labels (sorted) <ent> entity names (dialog order)
//! <usr> utterance <kb> entity attribute value ... <sys> response <eos>
//! ```
//!
//! Entity sequences (the LM learns the names after the second `<ent>` and
//! the closing `<usr>`):
//!
//! ```text
//! <ent> history names <usr> utterance <ent> current names <usr>
//! ```

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LocalKb, Turn};
use crate::decode::{constrained_beam_search, DecodeError, LanguageModel, MaskedLm, SearchConfig};
use crate::kb::KbResult;
use crate::lm::{LmExample, LmParams};
use crate::taxonomy::SlotLabel;
use crate::text::{Special, TokenId, Vocab, N_RESERVED, UNK};

pub const INFORM: &str = "inform";
/// Upper bound on names returned by entity prediction.
pub const MAX_ENTITIES: usize = 8;
const MAX_ENTITY_TOKENS: usize = 32;

#[derive(Debug, Error, PartialEq)]
pub enum GenError {
    #[error("context of {len} tokens exceeds budget {budget} after truncation")]
    OversizeContext { len: usize, budget: usize },
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

fn tokenize_all<'a>(vocab: &Vocab, items: impl IntoIterator<Item = &'a str>) -> Vec<TokenId> {
    items.into_iter().flat_map(|s| vocab.tokenize(s)).collect()
}

/// Serialize a turn's context, ending with `<sys>`. When longer than
/// `budget`, the oldest entities are dropped first.
pub fn serialize_context(
    vocab: &Vocab,
    ui: &BTreeSet<String>,
    si: &BTreeSet<String>,
    entities: &[String],
    utterance: &str,
    kb: &KbResult,
    budget: usize,
) -> Result<Vec<TokenId>, GenError> {
    let head = |ents: &[String]| {
        let mut seq = vec![Special::Ui.id()];
        seq.extend(tokenize_all(vocab, ui.iter().map(String::as_str)));
        seq.push(Special::Si.id());
        seq.extend(tokenize_all(vocab, si.iter().map(String::as_str)));
        seq.push(Special::Ent.id());
        seq.extend(tokenize_all(vocab, ents.iter().map(String::as_str)));
        seq
    };
    let mut tail = vec![Special::Usr.id()];
    tail.extend(vocab.tokenize(utterance));
    tail.push(Special::Kb.id());
    for t in &kb.triples {
        tail.extend(tokenize_all(vocab, [t.0.as_str(), t.1.as_str(), t.2.as_str()]));
    }
    tail.push(Special::Sys.id());
    for skip in 0..=entities.len() {
        let mut seq = head(&entities[skip..]);
        if seq.len() + tail.len() <= budget {
            seq.extend(tail);
            return Ok(seq);
        }
    }
    Err(GenError::OversizeContext { len: head(&[]).len() + tail.len(), budget })
}

/// `{"inform"}` when the KB answered exactly, otherwise `si` unchanged.
pub fn apply_inform_substitution(si: &BTreeSet<String>, kb: &KbResult) -> BTreeSet<String> {
    if kb.exact && !kb.triples.is_empty() {
        [INFORM.to_string()].into()
    } else {
        si.clone()
    }
}

fn entity_prompt(vocab: &Vocab, history: &[String], utterance: &str) -> Vec<TokenId> {
    let mut seq = vec![Special::Ent.id()];
    seq.extend(tokenize_all(vocab, history.iter().map(String::as_str)));
    seq.push(Special::Usr.id());
    seq.extend(vocab.tokenize(utterance));
    seq.push(Special::Ent.id());
    seq
}

/// Tokens allowed in generated output: ordinary vocabulary plus `<eos>`.
pub fn generation_mask(vocab: &Vocab) -> Vec<bool> {
    (0..vocab.len() as TokenId).map(|id| id as usize >= N_RESERVED || id == Special::Eos.id()).collect()
}

/// Greedy-decode entity names after the utterance. Decoded tokens are
/// matched against the KB's (tokenized) names, longest first; anything else
/// is discarded.
pub fn predict_entities(lm: &LmParams, vocab: &Vocab, kb: &LocalKb, history: &[String], utterance: &str) -> Vec<String> {
    let window = lm.config.window;
    let mut prompt = entity_prompt(vocab, history, utterance);
    if prompt.len() >= window {
        let keep = window.saturating_sub(MAX_ENTITY_TOKENS).max(1);
        prompt.drain(..prompt.len() - keep.min(prompt.len()));
    }
    let mut allowed: Vec<bool> = (0..vocab.len() as TokenId).map(|id| id as usize >= N_RESERVED).collect();
    allowed[Special::Usr.id() as usize] = true;
    allowed[Special::Eos.id() as usize] = true;
    let model = MaskedLm { params: lm, allowed };
    let mut state = model.start(&prompt);
    let mut out = Vec::new();
    while out.len() < MAX_ENTITY_TOKENS && prompt.len() + out.len() < window {
        let lp = model.log_probs(&state);
        // first maximum wins: ties go to the smaller id
        let tok = lp.iter().enumerate().fold(0, |b, (i, &v)| if v > lp[b] { i } else { b }) as TokenId;
        if tok == Special::Usr.id() || tok == Special::Eos.id() {
            break;
        }
        out.push(tok);
        state = model.advance(&state, tok);
    }
    match_names(vocab, kb, &out)
}

fn match_names(vocab: &Vocab, kb: &LocalKb, tokens: &[TokenId]) -> Vec<String> {
    let mut names: Vec<(Vec<TokenId>, &str)> = kb
        .entities
        .iter()
        .map(|e| (vocab.tokenize(&e.name), e.name.as_str()))
        .filter(|(t, _)| !t.is_empty() && !t.contains(&UNK))
        .collect();
    names.sort_by(|a, b| b.0.len().cmp(&a.0.len()));
    let mut found: Vec<String> = Vec::new();
    let mut i = 0;
    while i < tokens.len() && found.len() < MAX_ENTITIES {
        match names.iter().find(|(t, _)| tokens[i..].starts_with(t)) {
            Some((t, name)) => {
                if !found.iter().any(|f| f == name) {
                    found.push(name.to_string());
                }
                i += t.len();
            }
            None => i += 1,
        }
    }
    found
}

/// Generate a response whose tokens contain every constraint.
pub fn generate(
    lm: &LmParams,
    vocab: &Vocab,
    context: &[TokenId],
    constraints: &[Vec<TokenId>],
    cfg: &SearchConfig,
) -> Result<crate::decode::SearchOutput, GenError> {
    let model = MaskedLm { params: lm, allowed: generation_mask(vocab) };
    Ok(constrained_beam_search(&model, context, constraints, cfg)?)
}

/// Constraints for a KB result: the tokenized value of each triple.
pub fn kb_constraints(vocab: &Vocab, kb: &KbResult) -> Vec<Vec<TokenId>> {
    kb.triples.iter().map(|t| vocab.tokenize(t.value())).filter(|c| !c.is_empty()).collect()
}

/// Inputs for one training turn, with labels and entities as the system
/// would see them.
pub struct TurnContext<'a> {
    pub ui: &'a BTreeSet<String>,
    pub si: &'a BTreeSet<String>,
    pub history: &'a [String],
    pub current: &'a [String],
    pub kb: &'a KbResult,
}

/// The response and entity sequences for one turn. Returns `None` for a
/// sequence that does not fit the window.
pub fn training_sequences(vocab: &Vocab, turn: &Turn, ctx: &TurnContext<'_>, window: usize) -> (Option<LmExample>, Option<LmExample>) {
    let si = apply_inform_substitution(ctx.si, ctx.kb);
    let entities = crate::corpus::entity_history([ctx.history, ctx.current]);
    let mut response = vocab.tokenize(&turn.system_response);
    response.push(Special::Eos.id());
    let main = serialize_context(vocab, ctx.ui, &si, &entities, &turn.user_utterance, ctx.kb, window.saturating_sub(response.len()))
        .ok()
        .map(|mut tokens| {
            let start = tokens.len();
            tokens.extend(response);
            let target = (0..tokens.len()).map(|i| i >= start).collect();
            LmExample { tokens, target }
        });
    let mut ent = entity_prompt(vocab, ctx.history, &turn.user_utterance);
    let start = ent.len();
    ent.extend(tokenize_all(vocab, ctx.current.iter().map(String::as_str)));
    ent.push(Special::Usr.id());
    let ent = (ent.len() <= window).then(|| {
        let target = (0..ent.len()).map(|i| i >= start).collect();
        LmExample { tokens: ent, target }
    });
    (main, ent)
}

/// One generation log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnLog {
    pub dialog_id: String,
    pub turn_index: u32,
    pub user_utterance: String,
    pub ui: BTreeSet<String>,
    /// Service intents before inform substitution.
    pub si: BTreeSet<String>,
    /// Service intents fed to the generator.
    pub si_context: BTreeSet<String>,
    #[serde(default)]
    pub slots: BTreeSet<SlotLabel>,
    pub entities: Vec<String>,
    pub kb: KbResult,
    pub constraints: Vec<String>,
    pub score: f64,
    pub forced: bool,
    pub response: String,
}
