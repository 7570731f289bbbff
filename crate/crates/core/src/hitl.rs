//! Fact-checking sessions: question generation, answers, NR refinement.

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::graph::{write_json_atomic, DataDir, GraphError, LayerTag, LayeredGraph, PhaseState, PtmNode};
use crate::llm::{bounded_map, ExpectedShape, Llm, LlmError};
use crate::prompts::{vars, TemplateId};
use crate::text::word_count;

pub const DEFAULT_SESSION_SIZE: usize = 18;

#[derive(Debug, Error)]
pub enum HitlError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("no item {0} in the session")]
    UnknownItem(String),
    #[error("item {item} is already {status:?}")]
    NotPending { item: String, status: ItemStatus },
    #[error("answer must not be empty")]
    EmptyAnswer,
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("session storage: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemStatus {
    Pending,
    Answered,
    Skipped,
    /// NR never produced a usable rewrite; the node is unchanged.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactCheckItem {
    pub id: String,
    pub node_id: String,
    pub question: String,
    pub status: ItemStatus,
    pub layer: LayerTag,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback_question: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub item_id: String,
    pub answer: String,
    pub word_count: usize,
    pub t_unit_count: usize,
    pub submitted_at: DateTime<Utc>,
}

impl FeedbackRecord {
    /// Counts always come from the answer text.
    pub fn new(item_id: &str, answer: &str, at: DateTime<Utc>) -> Self {
        FeedbackRecord {
            item_id: item_id.into(),
            answer: answer.into(),
            word_count: word_count(answer),
            t_unit_count: count_t_units(answer),
            submitted_at: at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitlSession {
    pub user_id: String,
    pub seed: u64,
    pub items: Vec<FactCheckItem>,
    pub feedback: Vec<FeedbackRecord>,
    pub graph_version_pre: u64,
    pub graph_version_post: Option<u64>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl HitlSession {
    pub fn item(&self, id: &str) -> Option<&FactCheckItem> {
        self.items.iter().find(|i| i.id == id)
    }

    pub fn next_pending(&self) -> Option<&FactCheckItem> {
        self.items.iter().find(|i| i.status == ItemStatus::Pending)
    }

    pub fn is_complete(&self) -> bool {
        self.next_pending().is_none()
    }

    fn pending_mut(&mut self, id: &str) -> Result<&mut FactCheckItem, HitlError> {
        let item = self.items.iter_mut().find(|i| i.id == id).ok_or_else(|| HitlError::UnknownItem(id.into()))?;
        if item.status != ItemStatus::Pending {
            return Err(HitlError::NotPending { item: id.into(), status: item.status });
        }
        Ok(item)
    }

    /// Marks an item skipped; the node is not touched.
    pub fn skip(&mut self, item_id: &str) -> Result<(), HitlError> {
        self.pending_mut(item_id)?.status = ItemStatus::Skipped;
        Ok(())
    }

    pub fn report(&self) -> SessionReport {
        let count = |s| self.items.iter().filter(|i| i.status == s).count();
        let mean = |f: fn(&FeedbackRecord) -> usize| {
            if self.feedback.is_empty() {
                0.0
            } else {
                self.feedback.iter().map(f).sum::<usize>() as f64 / self.feedback.len() as f64
            }
        };
        SessionReport {
            items: self.items.clone(),
            answered: count(ItemStatus::Answered),
            skipped: count(ItemStatus::Skipped),
            failed: count(ItemStatus::Failed),
            pending: count(ItemStatus::Pending),
            mean_word_count: mean(|r| r.word_count),
            mean_t_units: mean(|r| r.t_unit_count),
            version_pre: self.graph_version_pre,
            version_post: self.graph_version_post,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub items: Vec<FactCheckItem>,
    pub answered: usize,
    pub skipped: usize,
    pub failed: usize,
    pub pending: usize,
    pub mean_word_count: f64,
    pub mean_t_units: f64,
    pub version_pre: u64,
    pub version_post: Option<u64>,
}

/// Splits `n` items across layers in proportion to `sizes`. Floors first,
/// then leftover items go one at a time to the lowest layer with room.
pub fn allocate(sizes: &[usize], n: usize) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    if n >= total {
        return sizes.to_vec();
    }
    let mut out: Vec<usize> = sizes.iter().map(|&s| s * n / total).collect();
    let mut left = n - out.iter().sum::<usize>();
    while left > 0 {
        for (i, &s) in sizes.iter().enumerate() {
            if left > 0 && out[i] < s {
                out[i] += 1;
                left -= 1;
            }
        }
    }
    out
}

pub fn fallback_question(title: &str) -> String {
    format!("Is it true that {}? Please explain.", title.trim().trim_end_matches(['.', '!', '?']))
}

fn first_query(v: Value) -> Result<Option<String>, String> {
    let arr = v.as_array().ok_or("expected a JSON array")?;
    Ok(arr
        .iter()
        .filter_map(|q| q.get("query").and_then(Value::as_str))
        .map(str::trim)
        .find(|q| !q.is_empty())
        .map(String::from))
}

/// QA rendered over one node; the first query wins. Returns the question and
/// whether the fallback was used.
pub fn generate_question(llm: &Llm, node: &PtmNode) -> Result<(String, bool), LlmError> {
    let scope = format!("{}: {}", node.title, node.content);
    match llm.call_json(TemplateId::QA, vars([("journal_entries", scope)]), ExpectedShape::JsonArray, first_query) {
        Ok(Some(q)) => Ok((q, false)),
        Ok(None) | Err(LlmError::InvalidResponse { .. }) => {
            tracing::warn!(node = %node.id, "no usable question generated, using fallback");
            Ok((fallback_question(&node.title), true))
        }
        Err(e) => Err(e),
    }
}

/// Stratified, seeded session over L1–L4. With fewer nodes than `n_items`
/// every node is questioned once.
pub fn open_session(
    llm: &Llm,
    graph: &LayeredGraph,
    n_items: usize,
    seed: u64,
    max_in_flight: usize,
) -> Result<HitlSession, HitlError> {
    if graph.phase_state != PhaseState::FullBuilt {
        return Err(HitlError::Precondition(format!("sessions need phase full_built, graph is {:?}", graph.phase_state)));
    }
    let layers: Vec<Vec<&PtmNode>> = LayerTag::SYNTHESIZED.iter().map(|&l| graph.layer_nodes(l).collect()).collect();
    let sizes: Vec<usize> = layers.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    let mut warnings = Vec::new();
    if total < n_items {
        let w = format!("only {total} nodes for a session of {n_items}; questioning every node");
        tracing::warn!("{w}");
        warnings.push(w);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<&PtmNode> = Vec::new();
    for (nodes, k) in layers.iter().zip(allocate(&sizes, n_items)) {
        let mut idx = rand::seq::index::sample(&mut rng, nodes.len(), k).into_vec();
        idx.sort_unstable();
        chosen.extend(idx.into_iter().map(|i| nodes[i]));
    }
    chosen.shuffle(&mut rng);
    let questions = bounded_map(&chosen, max_in_flight, |n| generate_question(llm, n));
    let mut items = Vec::with_capacity(chosen.len());
    for (i, (node, q)) in chosen.iter().zip(questions).enumerate() {
        let (question, fallback) = q?;
        items.push(FactCheckItem {
            id: format!("i{}", i + 1),
            node_id: node.id.clone(),
            question,
            status: ItemStatus::Pending,
            layer: node.layer,
            fallback_question: fallback,
        });
    }
    Ok(HitlSession {
        user_id: graph.user_id.clone(),
        seed,
        items,
        feedback: Vec::new(),
        graph_version_pre: graph.version,
        graph_version_post: None,
        warnings,
    })
}

fn updated_content(v: Value) -> Result<String, String> {
    v.get("updated_content")
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .ok_or_else(|| "missing \"updated_content\"".into())
}

/// NR over the node's current content and the answer. Only `content` and
/// `revisions` change.
pub fn apply_feedback(
    llm: &Llm,
    graph: &LayeredGraph,
    node_id: &str,
    feedback: &FeedbackRecord,
    at: DateTime<Utc>,
) -> Result<LayeredGraph, HitlError> {
    if feedback.answer.trim().is_empty() {
        return Err(HitlError::EmptyAnswer);
    }
    let node = graph
        .get(node_id)
        .and_then(|n| n.as_synthesized())
        .ok_or_else(|| HitlError::Graph(GraphError::NotFound(node_id.into())))?;
    let content = llm.call_json(
        TemplateId::NR,
        vars([("existing_node_content", node.content.clone()), ("new_instances_text", feedback.answer.clone())]),
        ExpectedShape::JsonObject,
        updated_content,
    )?;
    Ok(graph.revise_node(node_id, content, &feedback.item_id, at)?)
}

#[derive(Debug, Clone)]
pub enum AnswerOutcome {
    Refined { graph: LayeredGraph, record: FeedbackRecord },
    /// NR failed after its re-ask; the graph is unchanged.
    Failed { record: FeedbackRecord, detail: String },
}

/// Records an answer and refines the node. Transport errors leave the item
/// pending so it can be retried.
pub fn submit_answer(
    session: &mut HitlSession,
    llm: &Llm,
    graph: &LayeredGraph,
    item_id: &str,
    answer: &str,
    at: DateTime<Utc>,
) -> Result<AnswerOutcome, HitlError> {
    if answer.trim().is_empty() {
        return Err(HitlError::EmptyAnswer);
    }
    let node_id = session.pending_mut(item_id)?.node_id.clone();
    let record = FeedbackRecord::new(item_id, answer, at);
    let outcome = match apply_feedback(llm, graph, &node_id, &record, at) {
        Ok(g) => {
            session.graph_version_post = Some(g.version);
            AnswerOutcome::Refined { graph: g, record: record.clone() }
        }
        Err(HitlError::Llm(LlmError::InvalidResponse { detail, .. })) => {
            AnswerOutcome::Failed { record: record.clone(), detail }
        }
        Err(e) => return Err(e),
    };
    let item = session.pending_mut(item_id)?;
    item.status = match outcome {
        AnswerOutcome::Refined { .. } => ItemStatus::Answered,
        AnswerOutcome::Failed { .. } => ItemStatus::Failed,
    };
    session.feedback.push(record);
    Ok(outcome)
}

const COORDINATORS: [&str; 7] = ["and", "but", "or", "so", "yet", "nor", "for"];

/// Approximate T-unit count (one main clause plus its dependents).
///
/// Sentences split on `.`, `!`, `?`. Inside a sentence a new unit starts at a
/// semicolon, or at a comma directly followed by a coordinating conjunction,
/// when both sides keep at least two words. A comma-joined head means a
/// serial list, not two clauses. Any non-empty text counts as at least one
/// unit.
pub fn count_t_units(text: &str) -> usize {
    let words = |s: &str| s.split_whitespace().filter(|w| w.chars().any(char::is_alphanumeric)).count();
    let mut total = 0;
    for sentence in text.split(['.', '!', '?']) {
        if words(sentence) == 0 {
            continue;
        }
        let mut units = 1;
        let mut rest = sentence;
        loop {
            let cut = rest.char_indices().find_map(|(i, c)| match c {
                ';' => Some((i, i + 1)),
                ',' => {
                    let after = &rest[i + 1..];
                    let next = after.split_whitespace().next()?.to_lowercase();
                    COORDINATORS.contains(&next.as_str()).then(|| (i, i + 1))
                }
                _ => None,
            });
            let Some((at, skip)) = cut else { break };
            let (head, tail) = (&rest[..at], &rest[skip..]);
            let list = rest.as_bytes()[at] == b',' && head.contains(',');
            let tail_words = tail.split_whitespace().skip_while(|w| COORDINATORS.contains(&w.to_lowercase().as_str()));
            if !list && words(head) >= 2 && tail_words.filter(|w| w.chars().any(char::is_alphanumeric)).count() >= 2 {
                units += 1;
            }
            rest = tail;
        }
        total += units;
    }
    if total == 0 && text.chars().any(char::is_alphanumeric) {
        1
    } else {
        total
    }
}

fn session_path(dir: &DataDir, user_id: &str) -> std::path::PathBuf {
    dir.hitl_dir(user_id).join("session.json")
}

pub fn save_session(dir: &DataDir, session: &HitlSession) -> Result<(), HitlError> {
    write_json_atomic(&session_path(dir, &session.user_id), session).map_err(|e| HitlError::Io(e.to_string()))
}

pub fn load_session(dir: &DataDir, user_id: &str) -> Result<Option<HitlSession>, HitlError> {
    let path = session_path(dir, user_id);
    match std::fs::read(&path) {
        Ok(bytes) => serde_json::from_slice(&bytes).map(Some).map_err(|e| HitlError::Io(e.to_string())),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(HitlError::Io(e.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn allocation_examples() {
        assert_eq!(allocate(&[73, 37, 28, 18], 18), vec![9, 4, 3, 2]);
        assert_eq!(allocate(&[5, 3, 2, 1], 11), vec![5, 3, 2, 1]);
        assert_eq!(allocate(&[5, 3, 2, 1], 40), vec![5, 3, 2, 1]);
        assert_eq!(allocate(&[1, 10, 0, 0], 3), vec![1, 2, 0, 0]);
    }

    #[test]
    fn t_units() {
        assert_eq!(count_t_units("Rest feels earned."), 1);
        assert_eq!(count_t_units(""), 0);
        assert_eq!(count_t_units("I plan ahead, and I relax later."), 2);
        assert_eq!(count_t_units("Provides focus."), 1);
        assert_eq!(count_t_units("Tea, coffee, and juice are fine."), 1);
        assert_eq!(count_t_units("I study; I rest. Then I sleep!"), 3);
        assert_eq!(count_t_units("ok"), 1);
        assert_eq!(count_t_units("..."), 0);
    }

    #[test]
    fn fallback_contains_title() {
        assert_eq!(fallback_question("You plan ahead."), "Is it true that You plan ahead? Please explain.");
    }

    #[test]
    fn feedback_counts_come_from_text() {
        let at = DateTime::<Utc>::UNIX_EPOCH;
        let r = FeedbackRecord::new("i1", "I plan ahead, and I relax later.", at);
        assert_eq!((r.word_count, r.t_unit_count), (7, 2));
    }
}
