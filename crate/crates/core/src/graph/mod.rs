//! Layered knowledge-graph data model.
//!
//! A user's graph holds L0 behavioral instances and L1–L4 synthesized nodes.
//! Edges are implied by `source_ids` on the upper node and always connect a
//! node to nodes in the layer immediately below it, so every graph accepted by
//! [`LayeredGraph::put_nodes`] is acyclic by construction.

pub(crate) mod store;

pub use store::{DataDir, GraphStore, RevisionLogEntry};
pub(crate) use store::write_atomic;
pub(crate) use store::write_json_atomic;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, NaiveTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("duplicate id: {0}")]
    Duplicate(String),
    #[error("dangling source: node {node} references missing ids {missing:?}")]
    DanglingSource { node: String, missing: Vec<String> },
    #[error("non-adjacent layers: node {node} ({layer}) cites {source_id} ({source_layer})")]
    NonAdjacent {
        node: String,
        layer: LayerTag,
        source_id: String,
        source_layer: LayerTag,
    },
    #[error("invalid node {node}: {reason}")]
    InvalidNode { node: String, reason: String },
    #[error("node not found: {0}")]
    NotFound(String),
    #[error("layer pair {0}->{1} is not adjacent")]
    NonAdjacentPair(LayerTag, LayerTag),
    #[error("snapshot error: {0}")]
    Snapshot(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for GraphError {
    fn from(e: std::io::Error) -> Self {
        GraphError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for GraphError {
    fn from(e: serde_json::Error) -> Self {
        GraphError::Snapshot(e.to_string())
    }
}

/// Abstraction layer of a node; totally ordered L0 < L1 < … < L4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerTag {
    L0,
    L1,
    L2,
    L3,
    L4,
}

impl LayerTag {
    pub const ALL: [LayerTag; 5] = [LayerTag::L0, LayerTag::L1, LayerTag::L2, LayerTag::L3, LayerTag::L4];
    /// Layers holding synthesized nodes.
    pub const SYNTHESIZED: [LayerTag; 4] = [LayerTag::L1, LayerTag::L2, LayerTag::L3, LayerTag::L4];
    /// Layers built from analytical dimensions.
    pub const ABSTRACT: [LayerTag; 3] = [LayerTag::L2, LayerTag::L3, LayerTag::L4];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<LayerTag> {
        Self::ALL.get(i).copied()
    }

    pub fn below(self) -> Option<LayerTag> {
        self.index().checked_sub(1).and_then(Self::from_index)
    }

    pub fn above(self) -> Option<LayerTag> {
        Self::from_index(self.index() + 1)
    }
}

impl fmt::Display for LayerTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}", self.index())
    }
}

impl FromStr for LayerTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let digits = t.strip_prefix('L').or_else(|| t.strip_prefix('l')).unwrap_or(t);
        digits
            .parse::<usize>()
            .ok()
            .and_then(LayerTag::from_index)
            .ok_or_else(|| format!("unknown layer: {s}"))
    }
}

/// Pipeline progress recorded on each snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseState {
    Empty,
    Ingested,
    L1Built,
    FullBuilt,
    Refined,
}

mod hhmm {
    use chrono::NaiveTime;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &NaiveTime, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&t.format("%H:%M").to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NaiveTime, D::Error> {
        let raw = String::deserialize(d)?;
        NaiveTime::parse_from_str(&raw, "%H:%M").map_err(serde::de::Error::custom)
    }
}

/// Clock-time span parsed from an instance's `when` text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weekday: Option<String>,
    #[serde(with = "hhmm")]
    pub start: NaiveTime,
    #[serde(with = "hhmm")]
    pub end: NaiveTime,
}

/// One atomic 5W1H event extracted from a journal entry (an L0 node).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "InstanceDoc", try_from = "InstanceDoc")]
pub struct BehavioralInstance {
    pub id: String,
    pub what: String,
    pub when: String,
    pub where_: String,
    pub who: String,
    pub why: String,
    pub how: String,
    pub date: NaiveDate,
    pub time_window: Option<TimeWindow>,
    pub journal_entry_id: String,
}

#[derive(Serialize, Deserialize)]
struct InstanceDoc {
    id: String,
    layer: LayerTag,
    what: String,
    when: String,
    #[serde(rename = "where")]
    where_: String,
    who: String,
    why: String,
    how: String,
    date: NaiveDate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    time_window: Option<TimeWindow>,
    journal_entry_id: String,
}

impl From<BehavioralInstance> for InstanceDoc {
    fn from(b: BehavioralInstance) -> Self {
        InstanceDoc {
            id: b.id,
            layer: LayerTag::L0,
            what: b.what,
            when: b.when,
            where_: b.where_,
            who: b.who,
            why: b.why,
            how: b.how,
            date: b.date,
            time_window: b.time_window,
            journal_entry_id: b.journal_entry_id,
        }
    }
}

impl TryFrom<InstanceDoc> for BehavioralInstance {
    type Error = String;

    fn try_from(d: InstanceDoc) -> Result<Self, Self::Error> {
        if d.layer != LayerTag::L0 {
            return Err(format!("instance {} must be on L0, found {}", d.id, d.layer));
        }
        Ok(BehavioralInstance {
            id: d.id,
            what: d.what,
            when: d.when,
            where_: d.where_,
            who: d.who,
            why: d.why,
            how: d.how,
            date: d.date,
            time_window: d.time_window,
            journal_entry_id: d.journal_entry_id,
        })
    }
}

impl BehavioralInstance {
    /// Text of one 5W1H attribute.
    pub fn attribute(&self, attr: Attribute) -> &str {
        match attr {
            Attribute::What => &self.what,
            Attribute::When => &self.when,
            Attribute::Where => &self.where_,
            Attribute::Who => &self.who,
            Attribute::Why => &self.why,
            Attribute::How => &self.how,
        }
    }
}

/// The six 5W1H attributes, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    What,
    When,
    Where,
    Who,
    Why,
    How,
}

impl Attribute {
    pub const ALL: [Attribute; 6] = [
        Attribute::What,
        Attribute::When,
        Attribute::Where,
        Attribute::Who,
        Attribute::Why,
        Attribute::How,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::What => "what",
            Attribute::When => "when",
            Attribute::Where => "where",
            Attribute::Who => "who",
            Attribute::Why => "why",
            Attribute::How => "how",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One content rewrite of a node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Revision {
    pub timestamp: DateTime<Utc>,
    pub prior_content: String,
    pub updated_content: String,
    pub feedback_id: String,
}

/// A synthesized L1–L4 node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "PtmNodeDoc", try_from = "PtmNodeDoc")]
pub struct PtmNode {
    pub id: String,
    pub layer: LayerTag,
    pub title: String,
    pub content: String,
    pub dimension_id: Option<String>,
    pub source_ids: Vec<String>,
    pub revisions: Vec<Revision>,
}

// Field names follow the synthesis prompt outputs: L1 cites `source_instances`,
// L2–L4 cite `source_nodes`.
#[derive(Serialize, Deserialize)]
struct PtmNodeDoc {
    id: String,
    layer: LayerTag,
    title: String,
    content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dimension_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_instances: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_nodes: Option<Vec<String>>,
    #[serde(default)]
    revisions: Vec<Revision>,
}

impl From<PtmNode> for PtmNodeDoc {
    fn from(n: PtmNode) -> Self {
        let (source_instances, source_nodes) = if n.layer == LayerTag::L1 {
            (Some(n.source_ids), None)
        } else {
            (None, Some(n.source_ids))
        };
        PtmNodeDoc {
            id: n.id,
            layer: n.layer,
            title: n.title,
            content: n.content,
            dimension_id: n.dimension_id,
            source_instances,
            source_nodes,
            revisions: n.revisions,
        }
    }
}

impl TryFrom<PtmNodeDoc> for PtmNode {
    type Error = String;

    fn try_from(d: PtmNodeDoc) -> Result<Self, Self::Error> {
        if d.layer == LayerTag::L0 {
            return Err(format!("synthesized node {} cannot be on L0", d.id));
        }
        let source_ids = match (d.layer, d.source_instances, d.source_nodes) {
            (LayerTag::L1, Some(s), None) => s,
            (LayerTag::L1, _, _) => return Err(format!("L1 node {} needs `source_instances`", d.id)),
            (_, None, Some(s)) => s,
            _ => return Err(format!("node {} needs `source_nodes`", d.id)),
        };
        Ok(PtmNode {
            id: d.id,
            layer: d.layer,
            title: d.title,
            content: d.content,
            dimension_id: d.dimension_id,
            source_ids,
            revisions: d.revisions,
        })
    }
}

/// An LLM-generated analytical lens guiding synthesis of one higher layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticalDimension {
    pub id: String,
    pub layer: LayerTag,
    pub title: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GraphNode {
    Instance(BehavioralInstance),
    Synthesized(PtmNode),
}

impl GraphNode {
    pub fn id(&self) -> &str {
        match self {
            GraphNode::Instance(i) => &i.id,
            GraphNode::Synthesized(n) => &n.id,
        }
    }

    pub fn layer(&self) -> LayerTag {
        match self {
            GraphNode::Instance(_) => LayerTag::L0,
            GraphNode::Synthesized(n) => n.layer,
        }
    }

    pub fn sources(&self) -> &[String] {
        match self {
            GraphNode::Instance(_) => &[],
            GraphNode::Synthesized(n) => &n.source_ids,
        }
    }

    pub fn as_instance(&self) -> Option<&BehavioralInstance> {
        match self {
            GraphNode::Instance(i) => Some(i),
            GraphNode::Synthesized(_) => None,
        }
    }

    pub fn as_synthesized(&self) -> Option<&PtmNode> {
        match self {
            GraphNode::Instance(_) => None,
            GraphNode::Synthesized(n) => Some(n),
        }
    }
}

impl From<BehavioralInstance> for GraphNode {
    fn from(i: BehavioralInstance) -> Self {
        GraphNode::Instance(i)
    }
}

impl From<PtmNode> for GraphNode {
    fn from(n: PtmNode) -> Self {
        GraphNode::Synthesized(n)
    }
}

/// Immutable snapshot of one user's layered graph.
///
/// Every mutating operation returns a new snapshot with `version + 1` and
/// leaves `self` untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "GraphDocument", try_from = "GraphDocument")]
pub struct LayeredGraph {
    pub user_id: String,
    pub version: u64,
    pub phase_state: PhaseState,
    pub generated_at: DateTime<Utc>,
    dimensions: Vec<AnalyticalDimension>,
    nodes: Vec<GraphNode>,
    index: HashMap<String, usize>,
}

/// Serialized graph export: `{user_id, version, nodes, generated_at}` plus
/// phase state and the analytical dimensions referenced by L2–L4 nodes.
#[derive(Serialize, Deserialize)]
struct GraphDocument {
    user_id: String,
    version: u64,
    phase_state: PhaseState,
    generated_at: DateTime<Utc>,
    #[serde(default)]
    dimensions: Vec<AnalyticalDimension>,
    nodes: Vec<GraphNode>,
}

impl From<LayeredGraph> for GraphDocument {
    fn from(g: LayeredGraph) -> Self {
        GraphDocument {
            user_id: g.user_id,
            version: g.version,
            phase_state: g.phase_state,
            generated_at: g.generated_at,
            dimensions: g.dimensions,
            nodes: g.nodes,
        }
    }
}

impl TryFrom<GraphDocument> for LayeredGraph {
    type Error = String;

    fn try_from(d: GraphDocument) -> Result<Self, Self::Error> {
        let mut g = LayeredGraph::new(d.user_id, d.generated_at);
        g.version = d.version;
        g.phase_state = d.phase_state;
        g.dimensions = d.dimensions;
        for node in d.nodes {
            if g.index.contains_key(node.id()) {
                return Err(format!("duplicate id in document: {}", node.id()));
            }
            g.index.insert(node.id().to_string(), g.nodes.len());
            g.nodes.push(node);
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InDegreeStats {
    pub mean: f64,
    pub sd: f64,
    pub total_links: usize,
    pub min: usize,
    pub max: usize,
}

impl LayeredGraph {
    /// An empty version-0 graph.
    pub fn new(user_id: impl Into<String>, generated_at: DateTime<Utc>) -> Self {
        LayeredGraph {
            user_id: user_id.into(),
            version: 0,
            phase_state: PhaseState::Empty,
            generated_at,
            dimensions: Vec::new(),
            nodes: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn get(&self, id: &str) -> Option<&GraphNode> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// All nodes in insertion order.
    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn dimensions(&self) -> &[AnalyticalDimension] {
        &self.dimensions
    }

    pub fn dimension(&self, id: &str) -> Option<&AnalyticalDimension> {
        self.dimensions.iter().find(|d| d.id == id)
    }

    pub fn instances(&self) -> impl Iterator<Item = &BehavioralInstance> {
        self.nodes.iter().filter_map(GraphNode::as_instance)
    }

    pub fn layer_nodes(&self, layer: LayerTag) -> impl Iterator<Item = &PtmNode> {
        self.nodes
            .iter()
            .filter_map(GraphNode::as_synthesized)
            .filter(move |n| n.layer == layer)
    }

    pub fn count(&self, layer: LayerTag) -> usize {
        self.nodes.iter().filter(|n| n.layer() == layer).count()
    }

    fn next_version(&self, generated_at: DateTime<Utc>) -> LayeredGraph {
        let mut g = self.clone();
        g.version += 1;
        g.generated_at = generated_at;
        g
    }

    /// Inserts a batch of nodes and returns the next snapshot.
    ///
    /// Nodes may cite other nodes of the same batch; the whole batch is
    /// rejected on the first invariant violation.
    pub fn put_nodes(&self, nodes: Vec<GraphNode>, at: DateTime<Utc>) -> Result<LayeredGraph, GraphError> {
        let mut g = self.next_version(at);
        let mut pending = nodes;
        // Validate lower layers first so a batch may carry a whole sub-DAG.
        pending.sort_by_key(GraphNode::layer);
        for node in pending {
            g.validate_insert(&node)?;
            g.index.insert(node.id().to_string(), g.nodes.len());
            g.nodes.push(node);
        }
        Ok(g)
    }

    fn validate_insert(&self, node: &GraphNode) -> Result<(), GraphError> {
        let id = node.id();
        if id.trim().is_empty() {
            return Err(GraphError::InvalidNode { node: id.into(), reason: "empty id".into() });
        }
        if self.contains(id) {
            return Err(GraphError::Duplicate(id.into()));
        }
        match node {
            GraphNode::Instance(inst) => {
                if inst.what.trim().is_empty() {
                    return Err(GraphError::InvalidNode { node: id.into(), reason: "empty `what`".into() });
                }
                Ok(())
            }
            GraphNode::Synthesized(n) => self.validate_synthesized(n),
        }
    }

    fn validate_synthesized(&self, n: &PtmNode) -> Result<(), GraphError> {
        let invalid = |reason: &str| GraphError::InvalidNode { node: n.id.clone(), reason: reason.into() };
        let Some(expected) = n.layer.below() else {
            return Err(invalid("synthesized node on L0"));
        };
        if n.source_ids.is_empty() {
            return Err(invalid("no sources"));
        }
        let missing: Vec<String> = n.source_ids.iter().filter(|s| !self.contains(s)).cloned().collect();
        if !missing.is_empty() {
            return Err(GraphError::DanglingSource { node: n.id.clone(), missing });
        }
        for s in &n.source_ids {
            let source_layer = self.get(s).map(GraphNode::layer).unwrap_or(LayerTag::L0);
            if source_layer != expected {
                return Err(GraphError::NonAdjacent {
                    node: n.id.clone(),
                    layer: n.layer,
                    source_id: s.clone(),
                    source_layer,
                });
            }
        }
        match (n.layer, &n.dimension_id) {
            (LayerTag::L1, None) => Ok(()),
            (LayerTag::L1, Some(_)) => Err(invalid("L1 nodes carry no dimension")),
            (_, None) => Err(invalid("L2–L4 nodes need a dimension")),
            (layer, Some(dim)) => match self.dimension(dim) {
                Some(d) if d.layer == layer => Ok(()),
                Some(d) => Err(invalid(&format!("dimension {dim} belongs to {}", d.layer))),
                None => Err(invalid(&format!("unknown dimension {dim}"))),
            },
        }
    }

    /// Registers analytical dimensions and returns the next snapshot.
    pub fn put_dimensions(
        &self,
        dims: Vec<AnalyticalDimension>,
        at: DateTime<Utc>,
    ) -> Result<LayeredGraph, GraphError> {
        let mut g = self.next_version(at);
        for d in dims {
            if g.dimension(&d.id).is_some() {
                return Err(GraphError::Duplicate(d.id));
            }
            if d.layer < LayerTag::L2 || d.title.trim().is_empty() {
                return Err(GraphError::InvalidNode { node: d.id, reason: "invalid dimension".into() });
            }
            g.dimensions.push(d);
        }
        Ok(g)
    }

    /// Returns the next snapshot with a new phase state.
    pub fn with_phase(&self, phase: PhaseState, at: DateTime<Utc>) -> LayeredGraph {
        let mut g = self.next_version(at);
        g.phase_state = phase;
        g
    }

    /// Next snapshot without any node or dimension above `layer`.
    pub fn truncate_above(&self, layer: LayerTag, at: DateTime<Utc>) -> LayeredGraph {
        let mut g = self.next_version(at);
        g.nodes.retain(|n| n.layer() <= layer);
        g.dimensions.retain(|d| d.layer <= layer);
        g.index = g.nodes.iter().enumerate().map(|(i, n)| (n.id().to_string(), i)).collect();
        g
    }

    /// Rewrites a synthesized node's content, appending a revision. Nothing but
    /// `content` and `revisions` changes.
    pub fn revise_node(
        &self,
        node_id: &str,
        updated_content: String,
        feedback_id: &str,
        at: DateTime<Utc>,
    ) -> Result<LayeredGraph, GraphError> {
        let mut g = self.next_version(at);
        let idx = *g.index.get(node_id).ok_or_else(|| GraphError::NotFound(node_id.into()))?;
        let GraphNode::Synthesized(node) = &mut g.nodes[idx] else {
            return Err(GraphError::InvalidNode { node: node_id.into(), reason: "L0 instances are not revisable".into() });
        };
        let prior = std::mem::replace(&mut node.content, updated_content.clone());
        node.revisions.push(Revision {
            timestamp: at,
            prior_content: prior,
            updated_content,
            feedback_id: feedback_id.into(),
        });
        if g.phase_state == PhaseState::FullBuilt {
            g.phase_state = PhaseState::Refined;
        }
        Ok(g)
    }

    /// Link statistics from `lower` into `upper`. Mean in-degree is total links
    /// over upper-layer node count; `sd` is the population standard deviation.
    pub fn in_degree_stats(&self, lower: LayerTag, upper: LayerTag) -> Result<InDegreeStats, GraphError> {
        if upper.below() != Some(lower) {
            return Err(GraphError::NonAdjacentPair(lower, upper));
        }
        let degrees: Vec<usize> = self.layer_nodes(upper).map(|n| n.source_ids.len()).collect();
        if degrees.is_empty() {
            return Ok(InDegreeStats { mean: 0.0, sd: 0.0, total_links: 0, min: 0, max: 0 });
        }
        let total: usize = degrees.iter().sum();
        let n = degrees.len() as f64;
        let mean = total as f64 / n;
        let var = degrees.iter().map(|&d| (d as f64 - mean).powi(2)).sum::<f64>() / n;
        Ok(InDegreeStats {
            mean,
            sd: var.sqrt(),
            total_links: total,
            min: *degrees.iter().min().unwrap_or(&0),
            max: *degrees.iter().max().unwrap_or(&0),
        })
    }

    /// All L0 instances reachable from `node_id` through source links,
    /// deduplicated and ordered by (date, id).
    pub fn trace_to_evidence(&self, node_id: &str) -> Result<Vec<BehavioralInstance>, GraphError> {
        let start = self.get(node_id).ok_or_else(|| GraphError::NotFound(node_id.into()))?;
        let mut seen: HashSet<&str> = HashSet::new();
        let mut found: BTreeSet<(NaiveDate, &str)> = BTreeSet::new();
        let mut stack = vec![start];
        while let Some(node) = stack.pop() {
            if !seen.insert(node.id()) {
                continue;
            }
            match node {
                GraphNode::Instance(i) => {
                    found.insert((i.date, i.id.as_str()));
                }
                GraphNode::Synthesized(n) => {
                    stack.extend(n.source_ids.iter().filter_map(|s| self.get(s)));
                }
            }
        }
        Ok(found
            .into_iter()
            .filter_map(|(_, id)| self.get(id).and_then(GraphNode::as_instance).cloned())
            .collect())
    }

    /// Nodes of `layer` ordered as inserted.
    pub fn layer_ids(&self, layer: LayerTag) -> Vec<String> {
        self.layer_nodes(layer).map(|n| n.id.clone()).collect()
    }

    /// Checks every structural invariant; returns the list of violations.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut problems = Vec::new();
        for node in &self.nodes {
            let GraphNode::Synthesized(n) = node else { continue };
            if n.source_ids.is_empty() {
                problems.push(format!("{} has no sources", n.id));
            }
            for s in &n.source_ids {
                match self.get(s) {
                    None => problems.push(format!("{} cites missing {}", n.id, s)),
                    Some(src) if Some(src.layer()) != n.layer.below() => {
                        problems.push(format!("{} cites non-adjacent {}", n.id, s))
                    }
                    _ => {}
                }
            }
            match (&n.dimension_id, n.layer) {
                (Some(_), LayerTag::L1) => problems.push(format!("{} is L1 with a dimension", n.id)),
                (None, l) if l >= LayerTag::L2 => problems.push(format!("{} lacks a dimension", n.id)),
                (Some(d), l) => match self.dimension(d) {
                    Some(dim) if dim.layer == l => {}
                    _ => problems.push(format!("{} has dimension {} of the wrong layer", n.id, d)),
                },
                _ => {}
            }
            if let Some(last) = n.revisions.last() {
                if last.updated_content != n.content {
                    problems.push(format!("{} content differs from its last revision", n.id));
                }
            }
            if self.trace_to_evidence(&n.id).map(|v| v.is_empty()).unwrap_or(true) {
                problems.push(format!("{} does not trace to any instance", n.id));
            }
        }
        problems
    }
}

/// Deterministic layer-prefixed id, e.g. `L2_Node_7`.
pub fn node_id(layer: LayerTag, counter: usize) -> String {
    format!("{layer}_Node_{counter}")
}

/// Deterministic dimension id, e.g. `L3_Dim_2`.
pub fn dimension_id(layer: LayerTag, counter: usize) -> String {
    format!("{layer}_Dim_{counter}")
}

#[cfg(test)]
mod tests;
