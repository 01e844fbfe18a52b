//! Entity resolution and slot queries against a dialog-local KB.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{EntityRecord, KbTriple, LocalKb};
use crate::taxonomy::{IntentTree, KbMode, NodeId, SlotLabel, TaxonomyError};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KbQuery {
    pub coarse: NodeId,
    pub fine: Option<NodeId>,
    pub entity: Option<String>,
    pub user_intents: BTreeSet<String>,
}

impl KbQuery {
    /// Build a query from a slot label, checking that the fine node (if any)
    /// sits under the coarse node.
    pub fn new(
        tree: &IntentTree,
        slot: &SlotLabel,
        entity: Option<String>,
        user_intents: BTreeSet<String>,
    ) -> Result<Self, TaxonomyError> {
        let (coarse, fine) = tree.resolve(slot)?;
        Ok(KbQuery { coarse, fine, entity, user_intents })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbResult {
    pub triples: Vec<KbTriple>,
    /// True when the triples come from a direct attribute match.
    pub exact: bool,
}

impl KbResult {
    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }
}

/// Exact name match first, then the most recent history entity in the KB.
pub fn resolve_entity<'a>(kb: &'a LocalKb, name: Option<&str>, history: &[String]) -> Option<&'a EntityRecord> {
    if let Some(e) = name.and_then(|n| kb.get(n)) {
        return Some(e);
    }
    history.iter().rev().find_map(|h| kb.get(h))
}

fn all_triples(e: &EntityRecord) -> Vec<KbTriple> {
    e.attributes.iter().map(|(k, v)| KbTriple::new(&e.name, k, v)).collect()
}

/// Answer a slot query.
///
/// Attribute nodes return the entity's attributes mapped to the fine node
/// (exact). Introduction nodes return every attribute of the resolved entity,
/// or of the only KB entity of the node's type when nothing resolves.
pub fn lookup(kb: &LocalKb, tree: &IntentTree, query: &KbQuery, history: &[String]) -> KbResult {
    let entity = resolve_entity(kb, query.entity.as_deref(), history);
    match tree.kb_mode(query.coarse) {
        KbMode::None => KbResult::default(),
        KbMode::Attribute => {
            let (Some(e), Some(fine)) = (entity, query.fine) else {
                return KbResult::default();
            };
            let triples: Vec<KbTriple> = tree
                .attributes_for(fine)
                .iter()
                .filter_map(|a| e.attributes.get(a).map(|v| KbTriple::new(&e.name, a, v)))
                .collect();
            let exact = !triples.is_empty();
            KbResult { triples, exact }
        }
        KbMode::Introduce => {
            let entity = entity.or_else(|| {
                let wanted = query.fine.and_then(|f| tree.entity_type_for(f));
                let mut candidates = kb
                    .entities
                    .iter()
                    .filter(|e| wanted.map_or(true, |t| e.entity_type == t));
                match (candidates.next(), candidates.next()) {
                    (Some(e), None) => Some(e),
                    _ => None,
                }
            });
            KbResult { triples: entity.map(all_triples).unwrap_or_default(), exact: false }
        }
    }
}
