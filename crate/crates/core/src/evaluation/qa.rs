//! Question sets, model-context answering and atomic point matching.

use std::collections::BTreeSet;

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::graph::{LayerTag, LayeredGraph, PhaseState, PtmNode};
use crate::ingestion::JournalEntry;
use crate::llm::{ExpectedShape, Llm, LlmError};
use crate::prompts::{vars, TemplateId};

use super::metrics::Counts;

pub const REFUSAL: &str = "I cannot answer this based on the provided context.";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateWindow {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateWindow {
    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d <= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    pub id: String,
    pub query: String,
    pub ground_truth: String,
    pub source_window: DateWindow,
    pub target_layer_hint: Option<LayerTag>,
}

/// `count` seeded windows of `days` consecutive days, each starting on a
/// journal date. Windows may overlap.
pub fn choose_windows(dates: &[NaiveDate], days: u32, count: usize, seed: u64) -> Vec<DateWindow> {
    let distinct: BTreeSet<NaiveDate> = dates.iter().copied().collect();
    let starts: Vec<NaiveDate> = distinct.into_iter().collect();
    if starts.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let start = starts[rng.gen_range(0..starts.len())];
            DateWindow { start, end: start + Duration::days(days.max(1) as i64 - 1) }
        })
        .collect()
}

fn parse_pairs(v: Value) -> Result<Vec<(String, String)>, String> {
    let arr = v.as_array().ok_or("expected a JSON array")?;
    let mut out = Vec::new();
    for (i, q) in arr.iter().enumerate() {
        let field = |k: &str| q.get(k).and_then(Value::as_str).map(str::trim).unwrap_or("").to_string();
        if !q.is_object() {
            return Err(format!("item {i} is not an object"));
        }
        let (query, gt) = (field("query"), field("ground_truth"));
        if !query.is_empty() && !gt.is_empty() {
            out.push((query, gt));
        }
    }
    Ok(out)
}

/// QA over the journal entries inside `window`. Items carry no id or layer
/// hint yet; see [`finalize_testset`].
pub fn generate_testset(llm: &Llm, journals: &[JournalEntry], window: DateWindow) -> Result<Vec<QaItem>, EvalError> {
    let entries: Vec<&JournalEntry> = journals.iter().filter(|e| window.contains(e.date)).collect();
    if entries.is_empty() {
        return Err(EvalError::Precondition(format!("no journal entries between {} and {}", window.start, window.end)));
    }
    let text = entries.iter().map(|e| format!("[{}] {}", e.date, e.text)).collect::<Vec<_>>().join("\n\n");
    let pairs = llm.call_json(TemplateId::QA, vars([("journal_entries", text)]), ExpectedShape::JsonArray, parse_pairs)?;
    Ok(pairs
        .into_iter()
        .map(|(query, ground_truth)| QaItem {
            id: String::new(),
            query,
            ground_truth,
            source_window: window,
            target_layer_hint: None,
        })
        .collect())
}

/// Truncates to `size`, numbers items `q1..` and tags layer hints round-robin
/// over L1–L4.
pub fn finalize_testset(mut items: Vec<QaItem>, size: usize) -> Vec<QaItem> {
    items.truncate(size);
    for (i, it) in items.iter_mut().enumerate() {
        it.id = format!("q{}", i + 1);
        it.target_layer_hint = Some(LayerTag::SYNTHESIZED[i % 4]);
    }
    items
}

fn parse_ids(v: Value) -> Result<Vec<i64>, String> {
    v.as_array()
        .ok_or("expected a JSON array")?
        .iter()
        .map(|x| x.as_i64().ok_or_else(|| format!("{x} is not an integer")))
        .collect()
}

/// Keeps unique in-range ids in order, truncates to `num_target` and fills
/// the gap with the lowest unused indices.
pub fn repair_selection(raw: &[i64], n_labels: usize, num_target: usize) -> (Vec<usize>, bool) {
    let mut out: Vec<usize> = Vec::with_capacity(num_target);
    for &i in raw {
        if let Ok(u) = usize::try_from(i) {
            if u < n_labels && !out.contains(&u) {
                out.push(u);
            }
        }
    }
    out.truncate(num_target);
    let mut next = 0;
    while out.len() < num_target {
        if !out.contains(&next) {
            out.push(next);
        }
        next += 1;
    }
    let repaired = raw.len() != num_target || raw.iter().zip(&out).any(|(&a, &b)| a != b as i64);
    (out, repaired)
}

/// LS over `labels` (indexed from 0); always exactly `num_target` ids.
pub fn select_labels(llm: &Llm, query: &str, labels: &[String], num_target: usize) -> Result<Vec<usize>, EvalError> {
    if num_target > labels.len() {
        return Err(EvalError::Precondition(format!("{num_target} labels requested from {}", labels.len())));
    }
    let data = labels.iter().enumerate().map(|(i, l)| format!("{i}: {l}")).collect::<Vec<_>>().join("\n");
    let raw = llm.call_json(
        TemplateId::LS,
        vars([("num_target", num_target.to_string()), ("query", query.to_string()), ("label_data", data)]),
        ExpectedShape::JsonArray,
        parse_ids,
    )?;
    let (ids, repaired) = repair_selection(&raw, labels.len(), num_target);
    if repaired {
        tracing::warn!(?raw, ?ids, "label selection repaired");
    }
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub context_node_ids: Vec<String>,
}

/// Selects up to `num_target` nodes across L1–L4 by title, then answers with
/// CA from their contents only.
pub fn answer_from_ptm(llm: &Llm, query: &str, graph: &LayeredGraph, num_target: usize) -> Result<Answer, EvalError> {
    if !matches!(graph.phase_state, PhaseState::FullBuilt | PhaseState::Refined) {
        return Err(EvalError::Precondition(format!("answering needs a built model, graph is {:?}", graph.phase_state)));
    }
    let nodes: Vec<&PtmNode> = LayerTag::SYNTHESIZED.iter().flat_map(|&l| graph.layer_nodes(l)).collect();
    let titles: Vec<String> = nodes.iter().map(|n| n.title.clone()).collect();
    let picked = select_labels(llm, query, &titles, num_target.min(nodes.len()))?;
    let context = picked
        .iter()
        .map(|&i| format!("[{}] {}\n{}", nodes[i].id, nodes[i].title, nodes[i].content))
        .collect::<Vec<_>>()
        .join("\n\n");
    let text = llm.call_text(TemplateId::CA, vars([("context", context), ("query", query.to_string())]))?;
    Ok(Answer { text: text.trim().to_string(), context_node_ids: picked.iter().map(|&i| nodes[i].id.clone()).collect() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruePositive {
    pub gt_point: String,
    pub p_point: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FalseNegative {
    pub gt_point: String,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FalsePositive {
    pub p_point: String,
    pub attempted_gt: String,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicMatchReport {
    pub item_id: String,
    pub true_positives: Vec<TruePositive>,
    pub false_negatives: Vec<FalseNegative>,
    pub false_positives: Vec<FalsePositive>,
    pub counts: Counts,
}

type PeLists = (Vec<TruePositive>, Vec<FalseNegative>, Vec<FalsePositive>);

fn parse_pe(v: Value) -> Result<PeLists, String> {
    let list = |k: &str| v.get(k).and_then(Value::as_array).ok_or_else(|| format!("missing \"{k}\" array"));
    let s = |x: &Value, k: &str| x.get(k).and_then(Value::as_str).unwrap_or("").trim().to_string();
    let tp = list("true_positives")?.iter().map(|x| TruePositive { gt_point: s(x, "gt_atomic_point"), p_point: s(x, "p_atomic_point") });
    let fneg = list("false_negatives")?
        .iter()
        .map(|x| FalseNegative { gt_point: s(x, "gt_atomic_point"), explanation: s(x, "explanation") });
    let fpos = list("false_positives")?.iter().map(|x| FalsePositive {
        p_point: s(x, "p_atomic_point"),
        attempted_gt: s(x, "gt_atomic_point"),
        explanation: s(x, "explanation"),
    });
    Ok((tp.collect(), fneg.collect(), fpos.collect()))
}

/// Builds the report from a PE reply; counts are the list lengths.
pub fn match_report(item_id: &str, lists: PeLists) -> AtomicMatchReport {
    let (tp, fneg, fpos) = lists;
    let counts = Counts::new(tp.len() as u64, fpos.len() as u64, fneg.len() as u64);
    AtomicMatchReport { item_id: item_id.into(), true_positives: tp, false_negatives: fneg, false_positives: fpos, counts }
}

pub fn atomic_match(llm: &Llm, item_id: &str, query: &str, prediction: &str, ground_truth: &str) -> Result<AtomicMatchReport, EvalError> {
    if prediction.trim().is_empty() || ground_truth.trim().is_empty() {
        return Err(EvalError::Precondition("prediction and ground truth must be non-empty".into()));
    }
    let lists = llm.call_json(
        TemplateId::PE,
        vars([("query", query.to_string()), ("pred", prediction.to_string()), ("gt", ground_truth.to_string())]),
        ExpectedShape::JsonObject,
        parse_pe,
    )?;
    Ok(match_report(item_id, lists))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemStatus {
    Evaluated,
    /// Answering failed; excluded from scores.
    Unanswered,
    /// Matching failed; excluded from scores.
    Unevaluated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub item_id: String,
    pub layer_hint: Option<LayerTag>,
    pub status: ItemStatus,
    pub prediction: Option<String>,
    pub context_node_ids: Vec<String>,
    pub report: Option<AtomicMatchReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Answer then match one item. LLM failures become item statuses; other
/// errors propagate.
pub fn evaluate_item(llm: &Llm, item: &QaItem, graph: &LayeredGraph, num_target: usize) -> Result<ItemResult, EvalError> {
    let mut out = ItemResult {
        item_id: item.id.clone(),
        layer_hint: item.target_layer_hint,
        status: ItemStatus::Unanswered,
        prediction: None,
        context_node_ids: Vec::new(),
        report: None,
        error: None,
    };
    let answer = match answer_from_ptm(llm, &item.query, graph, num_target) {
        Ok(a) if !a.text.is_empty() => a,
        Ok(_) => {
            out.error = Some("empty answer".into());
            return Ok(out);
        }
        Err(EvalError::Llm(e)) => {
            out.error = Some(e.to_string());
            return Ok(out);
        }
        Err(e) => return Err(e),
    };
    out.prediction = Some(answer.text.clone());
    out.context_node_ids = answer.context_node_ids;
    match atomic_match(llm, &item.id, &item.query, &answer.text, &item.ground_truth) {
        Ok(r) => {
            out.status = ItemStatus::Evaluated;
            out.report = Some(r);
        }
        Err(EvalError::Llm(e)) => {
            out.status = ItemStatus::Unevaluated;
            out.error = Some(e.to_string());
        }
        Err(e) => return Err(e),
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_repair_rule() {
        assert_eq!(repair_selection(&[10, 10, 4], 80, 3), (vec![10, 4, 0], true));
        assert_eq!(repair_selection(&[0, 1, 2], 80, 3), (vec![0, 1, 2], false));
        assert_eq!(repair_selection(&[99, -1, 2, 3, 4], 5, 2), (vec![2, 3], true));
        assert_eq!(repair_selection(&[], 3, 3), (vec![0, 1, 2], true));
    }

    #[test]
    fn testset_numbering_and_hints() {
        let w = DateWindow { start: NaiveDate::from_ymd_opt(2025, 9, 1).unwrap(), end: NaiveDate::from_ymd_opt(2025, 9, 5).unwrap() };
        let item = QaItem { id: String::new(), query: "q".into(), ground_truth: "g".into(), source_window: w, target_layer_hint: None };
        let out = finalize_testset(vec![item; 6], 5);
        assert_eq!(out.len(), 5);
        assert_eq!(out[4].id, "q5");
        let hints: Vec<_> = out.iter().map(|i| i.target_layer_hint.unwrap()).collect();
        assert_eq!(hints, [LayerTag::L1, LayerTag::L2, LayerTag::L3, LayerTag::L4, LayerTag::L1]);
    }

    #[test]
    fn windows_are_seeded() {
        let d: Vec<NaiveDate> = (1..=30).map(|i| NaiveDate::from_ymd_opt(2025, 9, i).unwrap()).collect();
        let a = choose_windows(&d, 5, 3, 1);
        assert_eq!(a, choose_windows(&d, 5, 3, 1));
        assert!(a.iter().all(|w| (w.end - w.start).num_days() == 4));
    }

    #[test]
    fn pe_counts_are_list_lengths() {
        let v = serde_json::json!({
            "true_positives": [{"gt_atomic_point": "a", "p_atomic_point": "a", "score": 1.0}],
            "false_negatives": [{"gt_atomic_point": "b", "explanation": "missing"}],
            "false_positives": [{"p_atomic_point": "c", "gt_atomic_point": "", "explanation": "extra", "score": 1.0},
                                {"p_atomic_point": "d", "gt_atomic_point": "b", "explanation": "wrong", "score": 1.0}]
        });
        let r = match_report("q1", parse_pe(v).unwrap());
        assert_eq!(r.counts, Counts::new(1, 2, 1));
        assert_eq!(r.false_positives[1].attempted_gt, "b");
        assert!(parse_pe(serde_json::json!({"true_positives": []})).is_err());
    }
}
