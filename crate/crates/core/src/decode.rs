//! Beam search over any autoregressive model, with optional lexical
//! constraints that must appear contiguously in the output.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm::LmParams;
use crate::lm::LmState;
use crate::text::TokenId;

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("constraint of {len} tokens exceeds max_len {max_len}")]
    ConstraintTooLong { len: usize, max_len: usize },
    #[error("empty constraint")]
    EmptyConstraint,
    #[error("beam size must be at least 1")]
    ZeroBeam,
}

/// An incremental next-token model.
pub trait LanguageModel {
    type State: Clone;
    fn start(&self, context: &[TokenId]) -> Self::State;
    /// Log-probabilities of the next token; `-inf` marks forbidden tokens.
    fn log_probs<'a>(&'a self, state: &'a Self::State) -> &'a [f64];
    fn advance(&self, state: &Self::State, token: TokenId) -> Self::State;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub beam: usize,
    /// Maximum number of generated tokens, not counting `<eos>`.
    pub max_len: usize,
    pub eos: TokenId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutput {
    /// Generated tokens without the closing `<eos>`.
    pub tokens: Vec<TokenId>,
    /// Log-probability of `tokens` followed by `<eos>`.
    pub log_prob: f64,
    /// `log_prob` divided by the number of scored tokens (including `<eos>`).
    pub score: f64,
    /// True when the fallback appended unmet constraints.
    pub forced: bool,
}

/// Descending score, then lexicographically smaller tokens, then shorter.
fn rank(a_score: f64, a: &[TokenId], b_score: f64, b: &[TokenId]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a.cmp(b)).then_with(|| a.len().cmp(&b.len()))
}

/// Matching progress for one constraint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Progress {
    /// Longest suffix of the output that is a proper prefix of the constraint.
    matched: usize,
    satisfied: bool,
}

fn advance_progress(c: &[TokenId], p: Progress, out: &[TokenId]) -> Progress {
    if p.satisfied {
        return p;
    }
    // `out` already ends with the new token
    let limit = (p.matched + 1).min(c.len()).min(out.len());
    for k in (1..=limit).rev() {
        if out[out.len() - k..] == c[..k] {
            return if k == c.len() { Progress { matched: 0, satisfied: true } } else { Progress { matched: k, satisfied: false } };
        }
    }
    Progress { matched: 0, satisfied: false }
}

fn bank_of(constraints: &[Vec<TokenId>], prog: &[Progress]) -> usize {
    constraints
        .iter()
        .zip(prog)
        .map(|(c, p)| if p.satisfied { c.len() } else { p.matched })
        .sum()
}

#[derive(Clone)]
struct Hyp<S> {
    tokens: Vec<TokenId>,
    log_prob: f64,
    state: S,
    prog: Vec<Progress>,
}

impl<S> Hyp<S> {
    fn score(&self) -> f64 {
        self.log_prob / self.tokens.len().max(1) as f64
    }
}

struct Finished {
    tokens: Vec<TokenId>,
    log_prob: f64,
    score: f64,
}

fn keep_best(best: &mut Option<Finished>, cand: Finished) {
    let better = match best {
        None => true,
        Some(b) => rank(cand.score, &cand.tokens, b.score, &b.tokens) == Ordering::Less,
    };
    if better {
        *best = Some(cand);
    }
}

fn validate(cfg: &SearchConfig, constraints: &[Vec<TokenId>]) -> Result<(), DecodeError> {
    if cfg.beam == 0 {
        return Err(DecodeError::ZeroBeam);
    }
    for c in constraints {
        if c.is_empty() {
            return Err(DecodeError::EmptyConstraint);
        }
        if c.len() > cfg.max_len {
            return Err(DecodeError::ConstraintTooLong { len: c.len(), max_len: cfg.max_len });
        }
    }
    Ok(())
}

/// Score `tokens` + `<eos>` under the model.
fn score_sequence<M: LanguageModel>(model: &M, start: &M::State, tokens: &[TokenId], eos: TokenId) -> f64 {
    let mut state = start.clone();
    let mut lp = 0.0;
    for &t in tokens {
        lp += model.log_probs(&state)[t as usize];
        state = model.advance(&state, t);
    }
    lp + model.log_probs(&state)[eos as usize]
}

/// Banked constrained beam search.
///
/// Hypotheses are grouped by how many constraint tokens they have matched
/// and each bank keeps `beam` survivors per step. `<eos>` is only allowed
/// once every constraint is satisfied. If no such hypothesis finishes within
/// `max_len`, the hypothesis with most progress (then best score) is
/// completed by appending each unmet constraint verbatim.
pub fn constrained_beam_search<M: LanguageModel>(
    model: &M,
    context: &[TokenId],
    constraints: &[Vec<TokenId>],
    cfg: &SearchConfig,
) -> Result<SearchOutput, DecodeError> {
    validate(cfg, constraints)?;
    let root = model.start(context);
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: root.clone(),
        prog: vec![Progress { matched: 0, satisfied: false }; constraints.len()],
    }];
    let mut best: Option<Finished> = None;
    let mut best_partial: Option<(usize, Hyp<M::State>)> = None;
    for step in 0..=cfg.max_len {
        // parents ranked by their tokens, so candidates compare without touching the sequences
        let mut order: Vec<usize> = (0..live.len()).collect();
        order.sort_by(|&a, &b| live[a].tokens.cmp(&live[b].tokens));
        let mut parent_rank = vec![0; live.len()];
        for (r, &i) in order.iter().enumerate() {
            parent_rank[i] = r;
        }
        // bank -> (score, parent rank, token, hyp index, log prob)
        let mut banks: BTreeMap<usize, Vec<(f64, usize, TokenId, usize, f64)>> = BTreeMap::new();
        let mut out = Vec::with_capacity(cfg.max_len + 1);
        for (hi, h) in live.iter().enumerate() {
            let lps = model.log_probs(&h.state);
            let n = h.tokens.len() + 1;
            out.clear();
            out.extend_from_slice(&h.tokens);
            out.push(0);
            for (tok, &lp) in lps.iter().enumerate() {
                if !lp.is_finite() {
                    continue;
                }
                let tok = tok as TokenId;
                let total = h.log_prob + lp;
                if tok == cfg.eos {
                    if h.prog.iter().all(|p| p.satisfied) {
                        keep_best(&mut best, Finished { tokens: h.tokens.clone(), log_prob: total, score: total / n as f64 });
                    }
                    continue;
                }
                if step == cfg.max_len {
                    continue;
                }
                *out.last_mut().expect("nonempty") = tok;
                let bank: usize = constraints
                    .iter()
                    .zip(&h.prog)
                    .map(|(c, &p)| {
                        let p = advance_progress(c, p, &out);
                        if p.satisfied { c.len() } else { p.matched }
                    })
                    .sum();
                banks.entry(bank).or_default().push((total / n as f64, parent_rank[hi], tok, hi, total));
            }
        }
        let mut next = Vec::new();
        for (_, mut cands) in banks {
            let cmp = |a: &(f64, usize, TokenId, usize, f64), b: &(f64, usize, TokenId, usize, f64)| {
                b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
            };
            if cands.len() > cfg.beam {
                cands.select_nth_unstable_by(cfg.beam - 1, cmp);
                cands.truncate(cfg.beam);
            }
            cands.sort_unstable_by(cmp);
            for (_, _, tok, hi, total) in cands {
                let parent = &live[hi];
                let mut tokens = parent.tokens.clone();
                tokens.push(tok);
                let prog = constraints.iter().zip(&parent.prog).map(|(c, &p)| advance_progress(c, p, &tokens)).collect();
                next.push(Hyp { tokens, log_prob: total, state: model.advance(&parent.state, tok), prog });
            }
        }
        for h in &next {
            let key = bank_of(constraints, &h.prog);
            let better = match &best_partial {
                None => true,
                Some((k, b)) => key > *k || (key == *k && rank(h.score(), &h.tokens, b.score(), &b.tokens) == Ordering::Less),
            };
            if better {
                best_partial = Some((key, h.clone()));
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    if let Some(b) = best {
        return Ok(SearchOutput { tokens: b.tokens, log_prob: b.log_prob, score: b.score, forced: false });
    }
    let (mut tokens, prog) = match best_partial {
        Some((_, h)) => (h.tokens, h.prog),
        None => (Vec::new(), vec![Progress { matched: 0, satisfied: false }; constraints.len()]),
    };
    for (c, p) in constraints.iter().zip(&prog) {
        if !p.satisfied && !contains(&tokens, c) {
            tokens.extend_from_slice(c);
        }
    }
    let log_prob = score_sequence(model, &root, &tokens, cfg.eos);
    let score = log_prob / (tokens.len() + 1) as f64;
    Ok(SearchOutput { tokens, log_prob, score, forced: true })
}

/// Standard beam search: the best `beam` prefixes overall survive each step.
pub fn beam_search<M: LanguageModel>(model: &M, context: &[TokenId], cfg: &SearchConfig) -> Result<SearchOutput, DecodeError> {
    validate(cfg, &[])?;
    let root = model.start(context);
    let mut live: Vec<(Vec<TokenId>, f64, M::State)> = vec![(Vec::new(), 0.0, root.clone())];
    let mut best: Option<Finished> = None;
    let mut best_live: Option<(Vec<TokenId>, f64)> = None;
    for step in 0..=cfg.max_len {
        let mut cands: Vec<(usize, TokenId, f64)> = Vec::new();
        for (hi, (tokens, lp0, state)) in live.iter().enumerate() {
            for (tok, &lp) in model.log_probs(state).iter().enumerate() {
                if !lp.is_finite() {
                    continue;
                }
                let total = lp0 + lp;
                if tok as TokenId == cfg.eos {
                    let score = total / (tokens.len() + 1) as f64;
                    keep_best(&mut best, Finished { tokens: tokens.clone(), log_prob: total, score });
                } else if step < cfg.max_len {
                    cands.push((hi, tok as TokenId, total));
                }
            }
        }
        let n = step + 1;
        cands.sort_by(|a, b| {
            (b.2 / n as f64).total_cmp(&(a.2 / n as f64)).then_with(|| live[a.0].0.cmp(&live[b.0].0).then(a.1.cmp(&b.1)))
        });
        cands.truncate(cfg.beam);
        let next: Vec<(Vec<TokenId>, f64, M::State)> = cands
            .into_iter()
            .map(|(hi, tok, total)| {
                let mut tokens = live[hi].0.clone();
                tokens.push(tok);
                (tokens, total, model.advance(&live[hi].2, tok))
            })
            .collect();
        for (tokens, lp, _) in &next {
            let s = lp / tokens.len() as f64;
            let better = match &best_live {
                None => true,
                Some((bt, bl)) => rank(s, tokens, bl / bt.len() as f64, bt) == Ordering::Less,
            };
            if better {
                best_live = Some((tokens.clone(), *lp));
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    if let Some(b) = best {
        return Ok(SearchOutput { tokens: b.tokens, log_prob: b.log_prob, score: b.score, forced: false });
    }
    let tokens = best_live.map(|(t, _)| t).unwrap_or_default();
    let log_prob = score_sequence(model, &root, &tokens, cfg.eos);
    let score = log_prob / (tokens.len() + 1) as f64;
    Ok(SearchOutput { tokens, log_prob, score, forced: true })
}

/// True when `needle` occurs contiguously in `hay`.
pub fn contains(hay: &[TokenId], needle: &[TokenId]) -> bool {
    needle.is_empty() || hay.windows(needle.len()).any(|w| w == needle)
}

/// The transformer with some token ids forbidden (log-probability `-inf`),
/// renormalized over the rest.
pub struct MaskedLm<'a> {
    pub params: &'a LmParams,
    pub allowed: Vec<bool>,
}

#[derive(Clone)]
pub struct MaskedState {
    inner: LmState,
    log_probs: std::sync::Arc<Vec<f64>>,
}

impl MaskedLm<'_> {
    fn wrap(&self, inner: LmState) -> MaskedState {
        let raw = inner.log_probs();
        let lse = {
            let vals = raw.iter().zip(&self.allowed).filter(|(_, &a)| a).map(|(&l, _)| l);
            let max = vals.clone().fold(f64::NEG_INFINITY, f64::max);
            max + vals.map(|l| (l - max).exp()).sum::<f64>().ln()
        };
        let lp = raw.iter().zip(&self.allowed).map(|(&l, &a)| if a { l - lse } else { f64::NEG_INFINITY }).collect();
        MaskedState { inner, log_probs: std::sync::Arc::new(lp) }
    }
}

impl LanguageModel for MaskedLm<'_> {
    type State = MaskedState;

    fn start(&self, context: &[TokenId]) -> MaskedState {
        self.wrap(self.params.start(context))
    }

    fn log_probs<'a>(&'a self, state: &'a MaskedState) -> &'a [f64] {
        &state.log_probs
    }

    fn advance(&self, state: &MaskedState, token: TokenId) -> MaskedState {
        self.wrap(self.params.step(&state.inner, token))
    }
}
