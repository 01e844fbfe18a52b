//! Label space: UI/SI label lists and the coarse-to-fine slot tree.
//!
//! Slot node ids are assigned coarse nodes first (in file order), then every
//! fine node in parent order. With the default taxonomy that gives coarse
//! ids 0..=2 and fine ids 3..=8.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Catch-all label never predicted explicitly by any head.
pub const OTHER: &str = "Other";

const DEFAULT_TAXONOMY: &str = include_str!("../assets/taxonomy.toml");

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("unknown slot node `{0}`")]
    UnknownNode(String),
    #[error("unknown {head} label `{label}`")]
    UnknownLabel { head: &'static str, label: String },
    #[error("invalid taxonomy: {0}")]
    Invalid(String),
    #[error("cannot read taxonomy file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse taxonomy file: {0}")]
    Parse(#[from] toml::de::Error),
}

/// How the KB engine treats queries under a coarse node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KbMode {
    None,
    Introduce,
    Attribute,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineSpec {
    pub name: String,
    /// Entity type introduced by this leaf (introduce mode).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_type: Option<String>,
    /// KB attribute names answering this leaf (attribute mode).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attributes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoarseSpec {
    pub name: String,
    pub kb: KbMode,
    #[serde(default)]
    pub children: Vec<FineSpec>,
}

/// On-disk taxonomy document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaxonomyFile {
    pub ui_labels: Vec<String>,
    pub si_labels: Vec<String>,
    pub slots: Vec<CoarseSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotNode {
    pub id: NodeId,
    pub name: String,
    pub parent: Option<NodeId>,
}

/// A `(coarse, optional fine)` slot annotation as it appears in corpus files.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SlotLabel(pub String, pub Option<String>);

impl SlotLabel {
    pub fn coarse(name: &str) -> Self {
        SlotLabel(name.to_string(), None)
    }

    pub fn fine(coarse: &str, fine: &str) -> Self {
        SlotLabel(coarse.to_string(), Some(fine.to_string()))
    }
}

/// Two-level slot tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntentTree {
    nodes: Vec<SlotNode>,
    n_coarse: usize,
    specs: Vec<CoarseSpec>,
}

impl IntentTree {
    fn from_specs(specs: Vec<CoarseSpec>) -> Result<Self, TaxonomyError> {
        if specs.is_empty() {
            return Err(TaxonomyError::Invalid("slot tree has no coarse nodes".into()));
        }
        let mut nodes = Vec::new();
        let mut coarse_names = HashSet::new();
        for (i, c) in specs.iter().enumerate() {
            if !coarse_names.insert(c.name.as_str()) {
                return Err(TaxonomyError::Invalid(format!("duplicate coarse node `{}`", c.name)));
            }
            nodes.push(SlotNode { id: NodeId(i), name: c.name.clone(), parent: None });
        }
        let n_coarse = specs.len();
        for (i, c) in specs.iter().enumerate() {
            let mut seen = HashSet::new();
            for f in &c.children {
                if !seen.insert(f.name.as_str()) {
                    return Err(TaxonomyError::Invalid(format!(
                        "duplicate child `{}` under `{}`",
                        f.name, c.name
                    )));
                }
                match c.kb {
                    KbMode::Introduce if f.entity_type.is_none() => {
                        return Err(TaxonomyError::Invalid(format!(
                            "fine node `{}` needs an entity_type",
                            f.name
                        )))
                    }
                    KbMode::Attribute if f.attributes.is_empty() => {
                        return Err(TaxonomyError::Invalid(format!(
                            "fine node `{}` needs attributes",
                            f.name
                        )))
                    }
                    _ => {}
                }
                let id = NodeId(nodes.len());
                nodes.push(SlotNode { id, name: f.name.clone(), parent: Some(NodeId(i)) });
            }
        }
        Ok(IntentTree { nodes, n_coarse, specs })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn n_coarse(&self) -> usize {
        self.n_coarse
    }

    pub fn nodes(&self) -> &[SlotNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &SlotNode {
        &self.nodes[id.0]
    }

    pub fn coarse_nodes(&self) -> &[SlotNode] {
        &self.nodes[..self.n_coarse]
    }

    pub fn fine_nodes(&self) -> &[SlotNode] {
        &self.nodes[self.n_coarse..]
    }

    pub fn coarse_id(&self, name: &str) -> Result<NodeId, TaxonomyError> {
        self.coarse_nodes()
            .iter()
            .find(|n| n.name == name)
            .map(|n| n.id)
            .ok_or_else(|| TaxonomyError::UnknownNode(name.to_string()))
    }

    /// Fine nodes are named relative to their parent, so the same leaf name
    /// may occur under two coarse nodes.
    pub fn fine_id(&self, coarse: NodeId, name: &str) -> Result<NodeId, TaxonomyError> {
        self.fine_nodes()
            .iter()
            .find(|n| n.parent == Some(coarse) && n.name == name)
            .map(|n| n.id)
            .ok_or_else(|| TaxonomyError::UnknownNode(format!("{} / {}", self.node(coarse).name, name)))
    }

    pub fn children(&self, coarse: &str) -> Result<Vec<&SlotNode>, TaxonomyError> {
        let id = self.coarse_id(coarse)?;
        Ok(self.children_of(id))
    }

    pub fn children_of(&self, coarse: NodeId) -> Vec<&SlotNode> {
        self.fine_nodes().iter().filter(|n| n.parent == Some(coarse)).collect()
    }

    /// Binary mask over the fine nodes (indexed from the first fine id).
    pub fn fine_mask(&self, coarse: &str) -> Result<Vec<bool>, TaxonomyError> {
        let id = self.coarse_id(coarse)?;
        Ok(self.fine_mask_of(id))
    }

    pub fn fine_mask_of(&self, coarse: NodeId) -> Vec<bool> {
        self.fine_nodes().iter().map(|n| n.parent == Some(coarse)).collect()
    }

    pub fn kb_mode(&self, coarse: NodeId) -> KbMode {
        self.specs[coarse.0].kb
    }

    fn fine_spec(&self, fine: NodeId) -> &FineSpec {
        let node = self.node(fine);
        let parent = node.parent.expect("fine node has a parent");
        self.specs[parent.0]
            .children
            .iter()
            .find(|f| f.name == node.name)
            .expect("fine spec exists for every fine node")
    }

    /// KB attribute names answering a fine node; empty for non-attribute leaves.
    pub fn attributes_for(&self, fine: NodeId) -> &[String] {
        &self.fine_spec(fine).attributes
    }

    pub fn entity_type_for(&self, fine: NodeId) -> Option<&str> {
        self.fine_spec(fine).entity_type.as_deref()
    }

    /// Resolve a corpus slot label into node ids, checking the hierarchy.
    pub fn resolve(&self, label: &SlotLabel) -> Result<(NodeId, Option<NodeId>), TaxonomyError> {
        let c = self.coarse_id(&label.0)?;
        let f = match &label.1 {
            Some(name) => Some(self.fine_id(c, name)?),
            None => None,
        };
        Ok((c, f))
    }
}

/// Label sets for one turn, one per head.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelSets {
    pub ui: BTreeSet<String>,
    pub si: BTreeSet<String>,
    pub slots: BTreeSet<SlotLabel>,
}

/// Binary target vectors per head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVector {
    pub ui: Vec<bool>,
    pub si: Vec<bool>,
    pub slot: Vec<bool>,
}

impl LabelVector {
    pub fn as_f64(bits: &[bool]) -> Vec<f64> {
        bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSpace {
    pub ui_labels: Vec<String>,
    pub si_labels: Vec<String>,
    pub tree: IntentTree,
}

impl Default for LabelSpace {
    fn default() -> Self {
        LabelSpace::from_toml(DEFAULT_TAXONOMY).expect("bundled taxonomy is valid")
    }
}

impl LabelSpace {
    pub fn from_file(file: TaxonomyFile) -> Result<Self, TaxonomyError> {
        for (head, labels) in [("UI", &file.ui_labels), ("SI", &file.si_labels)] {
            let mut seen = HashSet::new();
            for l in labels {
                if l == OTHER {
                    return Err(TaxonomyError::Invalid(format!("`{OTHER}` cannot be an explicit {head} class")));
                }
                if !seen.insert(l) {
                    return Err(TaxonomyError::Invalid(format!("duplicate {head} label `{l}`")));
                }
            }
        }
        Ok(LabelSpace {
            ui_labels: file.ui_labels,
            si_labels: file.si_labels,
            tree: IntentTree::from_specs(file.slots)?,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, TaxonomyError> {
        Self::from_file(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, TaxonomyError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| TaxonomyError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_file(&self) -> TaxonomyFile {
        TaxonomyFile {
            ui_labels: self.ui_labels.clone(),
            si_labels: self.si_labels.clone(),
            slots: self.tree.specs.clone(),
        }
    }

    pub fn k_ui(&self) -> usize {
        self.ui_labels.len()
    }

    pub fn k_si(&self) -> usize {
        self.si_labels.len()
    }

    pub fn k_slot(&self) -> usize {
        self.tree.len()
    }

    /// `Other` is accepted and contributes no bit. A fine slot always sets its
    /// parent's bit.
    pub fn encode(&self, sets: &LabelSets) -> Result<LabelVector, TaxonomyError> {
        let ui = encode_head(&self.ui_labels, &sets.ui, "UI")?;
        let si = encode_head(&self.si_labels, &sets.si, "SI")?;
        let mut slot = vec![false; self.k_slot()];
        for label in &sets.slots {
            let (c, f) = self.tree.resolve(label)?;
            slot[c.0] = true;
            if let Some(f) = f {
                slot[f.0] = true;
            }
        }
        Ok(LabelVector { ui, si, slot })
    }

    /// Inverse of [`encode`](Self::encode) on hierarchy-canonical sets: a coarse
    /// bit with no set child decodes to `(coarse, None)`.
    pub fn decode(&self, v: &LabelVector) -> LabelSets {
        let pick = |names: &[String], bits: &[bool]| {
            names
                .iter()
                .zip(bits)
                .filter(|(_, &b)| b)
                .map(|(n, _)| n.clone())
                .collect::<BTreeSet<_>>()
        };
        let mut slots = BTreeSet::new();
        for c in self.tree.coarse_nodes() {
            if !v.slot[c.id.0] {
                continue;
            }
            let set_children: Vec<_> =
                self.tree.children_of(c.id).into_iter().filter(|f| v.slot[f.id.0]).collect();
            if set_children.is_empty() {
                slots.insert(SlotLabel(c.name.clone(), None));
            }
            for f in set_children {
                slots.insert(SlotLabel(c.name.clone(), Some(f.name.clone())));
            }
        }
        LabelSets { ui: pick(&self.ui_labels, &v.ui), si: pick(&self.si_labels, &v.si), slots }
    }

    pub fn check_ui(&self, label: &str) -> Result<(), TaxonomyError> {
        check_label(&self.ui_labels, label, "UI")
    }

    pub fn check_si(&self, label: &str) -> Result<(), TaxonomyError> {
        check_label(&self.si_labels, label, "SI")
    }
}

fn check_label(names: &[String], label: &str, head: &'static str) -> Result<(), TaxonomyError> {
    if label == OTHER || names.iter().any(|n| n == label) {
        Ok(())
    } else {
        Err(TaxonomyError::UnknownLabel { head, label: label.to_string() })
    }
}

fn encode_head(
    names: &[String],
    labels: &BTreeSet<String>,
    head: &'static str,
) -> Result<Vec<bool>, TaxonomyError> {
    let mut bits = vec![false; names.len()];
    for l in labels {
        if l == OTHER {
            continue;
        }
        let i = names
            .iter()
            .position(|n| n == l)
            .ok_or_else(|| TaxonomyError::UnknownLabel { head, label: l.clone() })?;
        bits[i] = true;
    }
    Ok(bits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(nodes: Vec<&SlotNode>) -> Vec<&str> {
        nodes.into_iter().map(|n| n.name.as_str()).collect()
    }

    #[test]
    fn default_tree_shape() {
        let space = LabelSpace::default();
        let tree = &space.tree;
        assert_eq!(tree.len(), 9);
        assert_eq!(
            tree.coarse_nodes().iter().map(|n| n.name.as_str()).collect::<Vec<_>>(),
            ["Talk about NA(myself)", "Ask for Introduction", "Ask an Entity"]
        );
        let ids: Vec<usize> = tree.nodes().iter().map(|n| n.id.0).collect();
        assert_eq!(ids, (0..9).collect::<Vec<_>>());
        // the two similarly named leaves are distinct nodes
        let intro = tree.coarse_id("Ask for Introduction").unwrap();
        let entity = tree.coarse_id("Ask an Entity").unwrap();
        assert_ne!(
            tree.fine_id(intro, "Mobile package").unwrap(),
            tree.fine_id(entity, "Mobile Package").unwrap()
        );
    }

    #[test]
    fn children_lookup() {
        let tree = LabelSpace::default().tree;
        assert_eq!(names(tree.children("Ask an Entity").unwrap()), ["Rules", "Mobile Package", "Fee"]);
        assert_eq!(
            names(tree.children("Ask for Introduction").unwrap()),
            ["Plan", "Package plan", "Mobile package"]
        );
        assert!(tree.children("Talk about NA(myself)").unwrap().is_empty());
        assert!(matches!(tree.children("Ask for Weather"), Err(TaxonomyError::UnknownNode(_))));
    }

    #[test]
    fn fine_masks_partition_leaves() {
        let tree = LabelSpace::default().tree;
        assert_eq!(
            tree.fine_mask("Ask for Introduction").unwrap(),
            [true, true, true, false, false, false]
        );
        assert_eq!(tree.fine_mask("Talk about NA(myself)").unwrap(), [false; 6]);
        let masks: Vec<Vec<bool>> =
            tree.coarse_nodes().iter().map(|c| tree.fine_mask_of(c.id)).collect();
        for j in 0..tree.fine_nodes().len() {
            assert_eq!(masks.iter().filter(|m| m[j]).count(), 1, "leaf {j} in exactly one mask");
        }
        assert!(matches!(tree.fine_mask("nope"), Err(TaxonomyError::UnknownNode(_))));
    }

    #[test]
    fn encode_sets_parent_bit() {
        let space = LabelSpace::default();
        let sets = LabelSets {
            slots: [SlotLabel::fine("Ask an Entity", "Fee")].into(),
            ..Default::default()
        };
        let v = space.encode(&sets).unwrap();
        let set: Vec<usize> = v.slot.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
        assert_eq!(set, [2, 8]);
        let empty = space.encode(&LabelSets::default()).unwrap();
        assert!(empty.ui.iter().chain(&empty.si).chain(&empty.slot).all(|b| !b));
    }

    #[test]
    fn encode_rejects_unknown() {
        let space = LabelSpace::default();
        let sets = LabelSets { ui: ["bogus".to_string()].into(), ..Default::default() };
        assert!(matches!(space.encode(&sets), Err(TaxonomyError::UnknownLabel { .. })));
        let sets = LabelSets {
            slots: [SlotLabel::fine("Ask an Entity", "Plan")].into(),
            ..Default::default()
        };
        assert!(matches!(space.encode(&sets), Err(TaxonomyError::UnknownNode(_))));
    }

    #[test]
    fn slot_round_trip_exhaustive() {
        // every hierarchy-canonical subset of the 9-node tree
        let space = LabelSpace::default();
        let tree = &space.tree;
        let k = tree.len();
        let mut checked = 0;
        for mask in 0u32..(1 << k) {
            let bits: Vec<bool> = (0..k).map(|i| mask & (1 << i) != 0).collect();
            let consistent = tree.fine_nodes().iter().all(|f| !bits[f.id.0] || bits[f.parent.unwrap().0]);
            if !consistent {
                continue;
            }
            let v = LabelVector { ui: vec![false; space.k_ui()], si: vec![false; space.k_si()], slot: bits };
            let sets = space.decode(&v);
            assert_eq!(space.encode(&sets).unwrap(), v);
            assert_eq!(space.decode(&space.encode(&sets).unwrap()), sets);
            checked += 1;
        }
        // 1 + 2^3 + 2^3 choices per coarse branch: 2 * 9 * 9
        assert_eq!(checked, 2 * 9 * 9);
    }

    #[test]
    fn intent_round_trip_exhaustive() {
        let space = LabelSpace::default();
        for mask in 0u32..(1 << space.k_ui()) {
            let ui: BTreeSet<String> = space
                .ui_labels
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, l)| l.clone())
                .collect();
            let sets = LabelSets { ui: ui.clone(), si: ui.iter().map(|_| "inform".to_string()).collect(), ..Default::default() };
            assert_eq!(space.decode(&space.encode(&sets).unwrap()), sets);
        }
    }

    #[test]
    fn other_is_never_a_class() {
        let bad = DEFAULT_TAXONOMY.replace("\"affirm\"", "\"Other\"");
        assert!(matches!(LabelSpace::from_toml(&bad), Err(TaxonomyError::Invalid(_))));
        let space = LabelSpace::default();
        let sets = LabelSets { ui: [OTHER.to_string()].into(), ..Default::default() };
        assert!(space.encode(&sets).unwrap().ui.iter().all(|b| !b));
    }

    #[test]
    fn taxonomy_file_round_trip() {
        let space = LabelSpace::default();
        let text = toml::to_string(&space.to_file()).unwrap();
        assert_eq!(LabelSpace::from_toml(&text).unwrap(), space);
    }

    #[test]
    fn kb_metadata() {
        let tree = LabelSpace::default().tree;
        let entity = tree.coarse_id("Ask an Entity").unwrap();
        let fee = tree.fine_id(entity, "Fee").unwrap();
        assert_eq!(tree.attributes_for(fee), ["fee"]);
        assert_eq!(tree.kb_mode(entity), KbMode::Attribute);
        let intro = tree.coarse_id("Ask for Introduction").unwrap();
        let plan = tree.fine_id(intro, "Plan").unwrap();
        assert_eq!(tree.entity_type_for(plan), Some("plan"));
    }
}
