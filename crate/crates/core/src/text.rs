//! Tokenization, vocabulary and the `_` corruption view.
//!
//! CJK characters and ASCII digits are single tokens; runs of other letters
//! (plus `'` and `-`) form one word token; any other non-space character is a
//! token on its own. [`detokenize`] inverts this for text written with the
//! canonical spacing the synthetic generator uses.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
/// The literal `_` character, used to corrupt views during pretraining.
pub const CORRUPT: TokenId = 2;

/// Generator control tokens. They contain `<`/`>` so the tokenizer can never
/// produce them from corpus text.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Special {
    Ui,
    Si,
    Ent,
    Usr,
    Kb,
    Sys,
    Eos,
}

impl Special {
    pub const ALL: [Special; 7] =
        [Special::Ui, Special::Si, Special::Ent, Special::Usr, Special::Kb, Special::Sys, Special::Eos];

    pub fn id(self) -> TokenId {
        3 + self as TokenId
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Special::Ui => "<ui>",
            Special::Si => "<si>",
            Special::Ent => "<ent>",
            Special::Usr => "<usr>",
            Special::Kb => "<kb>",
            Special::Sys => "<sys>",
            Special::Eos => "<eos>",
        }
    }
}

/// Number of reserved ids at the start of every vocabulary.
pub const N_RESERVED: usize = 3 + Special::ALL.len();

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("vocabulary file {path}: {message}")]
    Invalid { path: String, message: String },
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3000..=0x303F | 0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xF900..=0xFAFF | 0xFF00..=0xFFEF)
}

fn is_word_char(c: char) -> bool {
    (c.is_alphabetic() && !is_cjk(c)) || c == '\'' || c == '-'
}

/// Split text into token strings.
pub fn tokenize_text(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if is_word_char(c) {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

fn single_char(tok: &str) -> Option<char> {
    let mut it = tok.chars();
    match (it.next(), it.next()) {
        (Some(c), None) => Some(c),
        _ => None,
    }
}

fn glued(left: &str, right: &str) -> bool {
    let l = single_char(left);
    let r = single_char(right);
    if r.is_some_and(|c| matches!(c, ',' | '.' | '?' | '!' | ':' | ';')) {
        return true;
    }
    if l.is_some_and(|c| c.is_ascii_digit()) && r.is_some_and(|c| c.is_ascii_digit()) {
        return true;
    }
    l.is_some_and(is_cjk) || r.is_some_and(is_cjk)
}

/// Join token strings back into text.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 && !glued(tokens[i - 1].as_ref(), t.as_ref()) {
            out.push(' ');
        }
        out.push_str(t.as_ref());
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    fn reserved() -> Vec<String> {
        let mut v = vec!["<pad>".to_string(), "<unk>".to_string(), "_".to_string()];
        v.extend(Special::ALL.iter().map(|s| s.as_str().to_string()));
        v
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as TokenId)).collect();
        Vocab { tokens, index }
    }

    /// Reserved ids followed by every distinct token of `texts` in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let reserved = Self::reserved();
        let mut seen = BTreeSet::new();
        for t in texts {
            seen.extend(tokenize_text(t));
        }
        let mut tokens = reserved.clone();
        tokens.extend(seen.into_iter().filter(|t| !reserved.contains(t)));
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        tokenize_text(text).iter().map(|t| self.id(t)).collect()
    }

    /// Generator control tokens (`<ui>` .. `<eos>`).
    pub fn is_special(&self, id: TokenId) -> bool {
        (Special::Ui.id()..=Special::Eos.id()).contains(&id)
    }

    pub fn render(&self, ids: &[TokenId]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        detokenize(&self.render(ids))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(&VocabFile { tokens: self.tokens.clone() })?;
        std::fs::write(path, json + "\n")
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let invalid = |message: String| VocabError::Invalid { path: path.display().to_string(), message };
        let text = std::fs::read_to_string(path).map_err(|e| invalid(e.to_string()))?;
        let file: VocabFile = serde_json::from_str(&text).map_err(|e| invalid(e.to_string()))?;
        if file.tokens.len() < N_RESERVED || file.tokens[..N_RESERVED] != Self::reserved()[..] {
            return Err(invalid("reserved ids do not match".into()));
        }
        let unique: BTreeSet<&String> = file.tokens.iter().collect();
        if unique.len() != file.tokens.len() {
            return Err(invalid("duplicate tokens".into()));
        }
        Ok(Self::from_tokens(file.tokens))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    tokens: Vec<String>,
}

/// Replace each position by [`CORRUPT`] independently with probability `rate`.
pub fn corrupt_view(tokens: &[TokenId], rate: f64, rng: &mut impl Rng) -> Vec<TokenId> {
    tokens.iter().map(|&t| if rng.gen::<f64>() < rate { CORRUPT } else { t }).collect()
}
