//! Intent precision/recall/F1, BLEU-4, dialog success rate and the combined
//! score.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::KbTriple;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {0} predictions vs {1} references")]
    LengthMismatch(usize, usize),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Prf { precision, recall, f1 }
    }
}

/// Micro-averaged precision, recall and F1 over label instances of all turns.
pub fn intent_prf<T: Ord>(predicted: &[BTreeSet<T>], gold: &[BTreeSet<T>]) -> Result<Prf, EvalError> {
    if predicted.len() != gold.len() {
        return Err(EvalError::LengthMismatch(predicted.len(), gold.len()));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in predicted.iter().zip(gold) {
        let hit = p.intersection(g).count();
        tp += hit;
        fp += p.len() - hit;
        fn_ += g.len() - hit;
    }
    Ok(Prf::from_counts(tp, fp, fn_))
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram matches and hypothesis n-gram total for one pair.
fn matches(hyp: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let r = ngram_counts(reference, n);
    let h = ngram_counts(hyp, n);
    let m = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    (m, hyp.len().saturating_sub(n - 1))
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp().min(1.0)
    }
}

/// Corpus-level BLEU-4 on a 0-100 scale, unsmoothed: zero if any n-gram
/// order has no match.
pub fn bleu4(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> Result<f64, EvalError> {
    if hypotheses.len() != references.len() {
        return Err(EvalError::LengthMismatch(hypotheses.len(), references.len()));
    }
    let mut num = [0usize; 4];
    let mut den = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let (m, t) = matches(h, r, n);
            num[n - 1] += m;
            den[n - 1] += t;
        }
    }
    if num.iter().any(|&m| m == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4).map(|i| (num[i] as f64 / den[i] as f64).ln()).sum::<f64>() / 4.0;
    Ok(100.0 * brevity_penalty(hyp_len, ref_len) * log_p.exp())
}

/// Sentence-level BLEU-4 with add-one smoothing on orders 2-4; for
/// diagnostics only.
pub fn sentence_bleu4(hyp: &[String], reference: &[String]) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let mut log_p = 0.0;
    for n in 1..=4 {
        let (m, t) = matches(hyp, reference, n);
        let p = if n == 1 { m as f64 / t as f64 } else { (m + 1) as f64 / (t + 1) as f64 };
        if p == 0.0 {
            return 0.0;
        }
        log_p += p.ln() / 4.0;
    }
    100.0 * brevity_penalty(hyp.len(), reference.len()) * log_p.exp()
}

/// One evaluated turn: gold KB triples and the generated response text.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundedTurn<'a> {
    pub gold: &'a [KbTriple],
    pub response: &'a str,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuccessRate {
    pub rate: f64,
    pub successes: usize,
    /// Dialogs with at least one KB-bearing turn.
    pub dialogs: usize,
    /// False when no dialog has a KB-bearing turn; `rate` is then 0.
    pub defined: bool,
}

/// A dialog succeeds when every gold KB value of every KB-bearing turn
/// appears verbatim in that turn's response.
pub fn success_rate(dialogs: &[Vec<GroundedTurn<'_>>]) -> SuccessRate {
    let mut out = SuccessRate::default();
    for d in dialogs {
        let bearing: Vec<&GroundedTurn> = d.iter().filter(|t| !t.gold.is_empty()).collect();
        if bearing.is_empty() {
            continue;
        }
        out.dialogs += 1;
        if bearing.iter().all(|t| t.gold.iter().all(|g| t.response.contains(g.value()))) {
            out.successes += 1;
        }
    }
    out.defined = out.dialogs > 0;
    if out.defined {
        out.rate = out.successes as f64 / out.dialogs as f64;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CombinedWeights {
    pub ui: f64,
    pub si: f64,
    pub bleu: f64,
    pub success: f64,
}

impl Default for CombinedWeights {
    fn default() -> Self {
        CombinedWeights { ui: 1.0, si: 1.0, bleu: 1.0, success: 1.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ui: Prf,
    pub si: Prf,
    pub slot_f1: f64,
    pub bleu4: f64,
    pub success_rate: f64,
    pub success_defined: bool,
    pub combined: f64,
}

/// `w_ui * ui.f1 + w_si * si.f1 + w_bleu * bleu4 / 100 + w_succ * success`.
pub fn combined(report: &MetricsReport, w: &CombinedWeights) -> f64 {
    w.ui * report.ui.f1 + w.si * report.si.f1 + w.bleu * report.bleu4 / 100.0 + w.success * report.success_rate
}

impl MetricsReport {
    /// Fixed-width table: one header row and one value row.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>8}",
            "UI-P", "UI-R", "UI-F1", "SI-P", "SI-R", "SI-F1", "Slot-F1", "BLEU-4", "Success", "Combined"
        );
        let success = if self.success_defined { format!("{:.4}", self.success_rate) } else { "n/a".into() };
        let _ = writeln!(
            s,
            "{:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.2} {:>7} {:>8.4}",
            self.ui.precision,
            self.ui.recall,
            self.ui.f1,
            self.si.precision,
            self.si.recall,
            self.si.f1,
            self.slot_f1,
            self.bleu4,
            success,
            self.combined
        );
        s
    }
}
