//! Dialog corpus data model, line-delimited file I/O and validation.

mod io;
pub mod synthetic;

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use indexmap::IndexMap;
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::taxonomy::{LabelSpace, SlotLabel};

pub use io::{load_corpus, load_corpus_with, parse_corpus, save_corpus, write_corpus};
pub use synthetic::{generate_synthetic, SyntheticSpec};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: schema error: {message}")]
    Schema { line: usize, message: String },
    #[error("validation failed for dialog `{dialog_id}`: {message}")]
    Validation { dialog_id: String, message: String },
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntityRecord {
    pub name: String,
    #[serde(rename = "type")]
    pub entity_type: String,
    #[serde(rename = "attrs", deserialize_with = "unique_attrs")]
    pub attributes: IndexMap<String, String>,
}

impl EntityRecord {
    pub fn new(name: &str, entity_type: &str, attrs: &[(&str, &str)]) -> Self {
        EntityRecord {
            name: name.to_string(),
            entity_type: entity_type.to_string(),
            attributes: attrs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LocalKb {
    pub entities: Vec<EntityRecord>,
}

impl LocalKb {
    pub fn get(&self, name: &str) -> Option<&EntityRecord> {
        self.entities.iter().find(|e| e.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    /// True when `(entity, attribute, value)` exists verbatim.
    pub fn resolves(&self, triple: &KbTriple) -> bool {
        self.get(&triple.0)
            .and_then(|e| e.attributes.get(&triple.1))
            .is_some_and(|v| *v == triple.2)
    }
}

/// `(entity name, attribute name, value)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KbTriple(pub String, pub String, pub String);

impl KbTriple {
    pub fn new(entity: &str, attribute: &str, value: &str) -> Self {
        KbTriple(entity.to_string(), attribute.to_string(), value.to_string())
    }

    pub fn value(&self) -> &str {
        &self.2
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Turn {
    #[serde(rename = "idx")]
    pub turn_index: u32,
    #[serde(rename = "usr")]
    pub user_utterance: String,
    #[serde(rename = "sys")]
    pub system_response: String,
    #[serde(rename = "ui")]
    pub user_intents: BTreeSet<String>,
    #[serde(rename = "si")]
    pub service_intents: BTreeSet<String>,
    #[serde(rename = "slots")]
    pub slot_labels: BTreeSet<SlotLabel>,
    #[serde(rename = "ents")]
    pub mentioned_entities: Vec<String>,
    #[serde(rename = "kb_gold")]
    pub gold_kb_triples: Vec<KbTriple>,
}

impl Turn {
    fn has_labels(&self) -> bool {
        !(self.user_intents.is_empty()
            && self.service_intents.is_empty()
            && self.slot_labels.is_empty()
            && self.mentioned_entities.is_empty()
            && self.gold_kb_triples.is_empty())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dialog {
    pub dialog_id: String,
    pub labeled: bool,
    #[serde(rename = "kb")]
    pub local_kb: LocalKb,
    pub turns: Vec<Turn>,
}

impl Dialog {
    /// Entities mentioned before turn `upto`, most recent last, each name once.
    pub fn history_entities(&self, upto: usize) -> Vec<String> {
        entity_history(self.turns[..upto].iter().map(|t| t.mentioned_entities.as_slice()))
    }
}

/// Fold per-turn entity mentions into a recency-ordered list (most recent
/// last, no duplicates).
pub fn entity_history<'a>(mentions: impl IntoIterator<Item = &'a [String]>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for names in mentions {
        for n in names {
            out.retain(|x| x != n);
            out.push(n.clone());
        }
    }
    out
}

/// Which split a dialog belongs to. Labeled dialogs are routed by id prefix:
/// `dev-` and `test-` go to the evaluation splits, everything else to `D`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    Labeled,
    Unlabeled,
    Dev,
    Test,
}

impl SplitKind {
    pub fn of(dialog: &Dialog) -> SplitKind {
        if dialog.dialog_id.starts_with("dev-") {
            SplitKind::Dev
        } else if dialog.dialog_id.starts_with("test-") {
            SplitKind::Test
        } else if dialog.labeled {
            SplitKind::Labeled
        } else {
            SplitKind::Unlabeled
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CorpusSplit {
    pub labeled: Vec<Dialog>,
    pub unlabeled: Vec<Dialog>,
    pub dev: Vec<Dialog>,
    pub test: Vec<Dialog>,
}

impl CorpusSplit {
    /// Dialogs in file order: labeled, unlabeled, dev, test.
    pub fn iter(&self) -> impl Iterator<Item = &Dialog> {
        self.labeled.iter().chain(&self.unlabeled).chain(&self.dev).chain(&self.test)
    }

    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len() + self.dev.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, dialog: Dialog) {
        match SplitKind::of(&dialog) {
            SplitKind::Labeled => self.labeled.push(dialog),
            SplitKind::Unlabeled => self.unlabeled.push(dialog),
            SplitKind::Dev => self.dev.push(dialog),
            SplitKind::Test => self.test.push(dialog),
        }
    }

    pub fn validate(&self, space: &LabelSpace) -> Result<(), CorpusError> {
        let mut ids = HashSet::new();
        for d in self.iter() {
            if !ids.insert(d.dialog_id.as_str()) {
                return Err(invalid(d, "duplicate dialog_id".into()));
            }
            validate_dialog(d, space)?;
        }
        for d in self.dev.iter().chain(&self.test) {
            if !d.labeled {
                return Err(invalid(d, "dev/test dialogs must be labeled".into()));
            }
        }
        Ok(())
    }
}

fn invalid(d: &Dialog, message: String) -> CorpusError {
    CorpusError::Validation { dialog_id: d.dialog_id.clone(), message }
}

pub fn validate_dialog(d: &Dialog, space: &LabelSpace) -> Result<(), CorpusError> {
    if d.dialog_id.is_empty() {
        return Err(invalid(d, "empty dialog_id".into()));
    }
    let mut names = HashSet::new();
    for e in &d.local_kb.entities {
        if e.name.is_empty() {
            return Err(invalid(d, "KB entity with empty name".into()));
        }
        if !names.insert(e.name.as_str()) {
            return Err(invalid(d, format!("duplicate KB entity `{}`", e.name)));
        }
    }
    let mut prev: Option<u32> = None;
    for t in &d.turns {
        if prev.is_some_and(|p| t.turn_index <= p) {
            return Err(invalid(d, format!("turn index {} not strictly increasing", t.turn_index)));
        }
        prev = Some(t.turn_index);
        if !d.labeled {
            if t.has_labels() {
                return Err(invalid(d, format!("unlabeled dialog carries labels on turn {}", t.turn_index)));
            }
            continue;
        }
        for l in &t.user_intents {
            space.check_ui(l).map_err(|e| invalid(d, e.to_string()))?;
        }
        for l in &t.service_intents {
            space.check_si(l).map_err(|e| invalid(d, e.to_string()))?;
        }
        for s in &t.slot_labels {
            space.tree.resolve(s).map_err(|e| invalid(d, e.to_string()))?;
        }
        for tr in &t.gold_kb_triples {
            if !d.local_kb.resolves(tr) {
                return Err(invalid(
                    d,
                    format!(
                        "gold KB triple ({}, {}, {}) on turn {} does not resolve in the local KB",
                        tr.0, tr.1, tr.2, t.turn_index
                    ),
                ));
            }
        }
    }
    Ok(())
}

/// Empty every annotation field; utterances and KBs are kept.
pub fn strip_labels(dialogs: &[Dialog]) -> Vec<Dialog> {
    dialogs
        .iter()
        .map(|d| Dialog {
            dialog_id: d.dialog_id.clone(),
            labeled: false,
            local_kb: d.local_kb.clone(),
            turns: d
                .turns
                .iter()
                .map(|t| Turn {
                    turn_index: t.turn_index,
                    user_utterance: t.user_utterance.clone(),
                    system_response: t.system_response.clone(),
                    ..Default::default()
                })
                .collect(),
        })
        .collect()
}

fn unique_attrs<'de, D>(deserializer: D) -> Result<IndexMap<String, String>, D::Error>
where
    D: Deserializer<'de>,
{
    struct AttrVisitor;

    impl<'de> Visitor<'de> for AttrVisitor {
        type Value = IndexMap<String, String>;

        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("an object mapping attribute names to string values")
        }

        fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
            let mut out = IndexMap::new();
            while let Some((k, v)) = map.next_entry::<String, String>()? {
                if out.contains_key(&k) {
                    return Err(serde::de::Error::custom(format!("duplicate attribute `{k}`")));
                }
                out.insert(k, v);
            }
            Ok(out)
        }
    }

    deserializer.deserialize_map(AttrVisitor)
}
