//! Automatic evaluation, semantic alignment and rating statistics.

pub mod coherence;
pub mod likert;
pub mod metrics;
pub mod qa;
pub mod stats;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::consensus::ConsensusConfig;
use crate::embed::{EmbedError, EmbeddingProvider};
use crate::graph::{LayerTag, LayeredGraph};
use crate::hitl::HitlSession;
use crate::ingestion::JournalEntry;
use crate::llm::{bounded_map, Llm};
use crate::text::vocabulary;

pub use coherence::{layer_semantics, silhouette, LayerSemantics};
pub use likert::{record_likert, summarize_likert, LikertPhase, LikertRecord, LikertSummary};
pub use metrics::{aggregate_scores, jaccard, Counts, GroupBy, ScoreSummary, ScoredItem};
pub use qa::{answer_from_ptm, atomic_match, select_labels, EvalError, ItemResult, ItemStatus, QaItem};
pub use stats::{paired_t, pearson_r, Correlation, Stat, StatsError, TTest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalCondition {
    Pre,
    Post,
}

impl std::fmt::Display for EvalCondition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalCondition::Pre => "pre",
            EvalCondition::Post => "post",
        })
    }
}

impl std::str::FromStr for EvalCondition {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pre" => Ok(EvalCondition::Pre),
            "post" => Ok(EvalCondition::Post),
            _ => Err(format!("unknown condition {s:?}, expected pre or post")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub num_target_labels: usize,
    pub testset_size: usize,
    pub window_days: u32,
    pub num_windows: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { num_target_labels: 5, testset_size: 28, window_days: 5, num_windows: 2 }
    }
}

/// Seeded windows, one QA call each, then trimmed and tagged.
pub fn build_testset(llm: &Llm, journals: &[JournalEntry], cfg: &EvalConfig, seed: u64) -> Result<Vec<QaItem>, EvalError> {
    let dates: Vec<_> = journals.iter().map(|e| e.date).collect();
    let mut items = Vec::new();
    for w in qa::choose_windows(&dates, cfg.window_days, cfg.num_windows, seed) {
        items.extend(qa::generate_testset(llm, journals, w)?);
    }
    Ok(qa::finalize_testset(items, cfg.testset_size))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTTest {
    pub name: String,
    pub n: usize,
    pub result: Option<TTest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedCorrelation {
    pub name: String,
    pub n: usize,
    pub result: Option<Correlation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

fn named_t(name: &str, pre: &[f64], post: &[f64]) -> NamedTTest {
    let r = paired_t(pre, post);
    NamedTTest { name: name.into(), n: pre.len(), note: r.as_ref().err().map(ToString::to_string), result: r.ok() }
}

fn named_r(name: &str, x: &[f64], y: &[f64]) -> NamedCorrelation {
    let r = pearson_r(x, y);
    NamedCorrelation { name: name.into(), n: x.len(), note: r.as_ref().err().map(ToString::to_string), result: r.ok() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub condition: EvalCondition,
    pub user_id: String,
    pub graph_version: u64,
    pub prompt_version: String,
    pub overall: ScoreSummary,
    pub by_layer: BTreeMap<String, ScoreSummary>,
    pub unanswered: usize,
    pub unevaluated: usize,
    pub semantics: Vec<LayerSemantics>,
    pub jaccard_by_layer: BTreeMap<String, f64>,
    pub correlations: Vec<NamedCorrelation>,
    pub t_tests: Vec<NamedTTest>,
    pub likert: Vec<LikertSummary>,
    pub items: Vec<ItemResult>,
}

/// Texts compared against the journals per layer. L0 uses the extracted
/// attribute strings.
pub fn layer_texts(graph: &LayeredGraph, layer: LayerTag) -> Vec<String> {
    if layer == LayerTag::L0 {
        return graph
            .instances()
            .map(|i| [&i.what, &i.when, &i.where_, &i.who, &i.why, &i.how].map(|s| s.as_str()).join(" "))
            .collect();
    }
    graph.layer_nodes(layer).map(|n| format!("{} {}", n.title, n.content)).collect()
}

pub fn jaccard_by_layer(graph: &LayeredGraph, journals: &[JournalEntry]) -> BTreeMap<String, f64> {
    let journal_vocab = vocabulary(journals.iter().map(|e| e.text.as_str()));
    LayerTag::ALL
        .iter()
        .map(|&l| {
            let texts = layer_texts(graph, l);
            let v: BTreeSet<String> = vocabulary(texts.iter().map(String::as_str));
            (l.to_string(), jaccard(&v, &journal_vocab))
        })
        .collect()
}

pub fn semantics_by_layer(
    graph: &LayeredGraph,
    provider: &dyn EmbeddingProvider,
    cfg: &ConsensusConfig,
) -> Result<Vec<LayerSemantics>, EmbedError> {
    LayerTag::SYNTHESIZED
        .iter()
        .map(|&l| {
            let texts: Vec<String> = graph.layer_nodes(l).map(|n| n.content.clone()).collect();
            layer_semantics(l, &texts, provider, cfg)
        })
        .collect()
}

pub struct EvalInputs<'a> {
    pub llm: &'a Llm,
    pub provider: &'a dyn EmbeddingProvider,
    pub consensus: &'a ConsensusConfig,
    pub config: &'a EvalConfig,
    pub max_in_flight: usize,
    pub graph: &'a LayeredGraph,
    pub journals: &'a [JournalEntry],
    pub testset: &'a [QaItem],
    pub likert: &'a [LikertRecord],
    /// The pre-refinement report, for paired comparisons.
    pub baseline: Option<&'a EvalReport>,
    pub session: Option<&'a HitlSession>,
}

#[derive(Debug, thiserror::Error)]
pub enum RunEvalError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

pub fn run_evaluation(condition: EvalCondition, inp: &EvalInputs<'_>) -> Result<EvalReport, RunEvalError> {
    let results = bounded_map(inp.testset, inp.max_in_flight, |item| {
        qa::evaluate_item(inp.llm, item, inp.graph, inp.config.num_target_labels)
    });
    let items: Vec<ItemResult> = results.into_iter().collect::<Result<_, _>>()?;
    let user = inp.graph.user_id.clone();
    let scored: Vec<ScoredItem> = items
        .iter()
        .filter_map(|r| {
            r.report.as_ref().map(|m| ScoredItem {
                user_id: user.clone(),
                item_id: r.item_id.clone(),
                layer: r.layer_hint.map(|l| l.to_string()),
                counts: m.counts,
            })
        })
        .collect();
    let overall = aggregate_scores(&scored, GroupBy::Overall).remove("overall").unwrap_or_default();
    let by_layer = aggregate_scores(&scored, GroupBy::Layer);

    let mut t_tests = Vec::new();
    if let Some(base) = inp.baseline {
        let before: BTreeMap<&str, f64> =
            base.items.iter().filter_map(|r| r.report.as_ref().map(|m| (r.item_id.as_str(), m.counts.f1()))).collect();
        let (mut pre, mut post) = (Vec::new(), Vec::new());
        for s in &scored {
            if let Some(&b) = before.get(s.item_id.as_str()) {
                pre.push(b);
                post.push(s.counts.f1());
            }
        }
        t_tests.push(named_t("item_f1_pre_vs_post", &pre, &post));
    }
    let ratings = likert::latest_ratings(inp.likert);
    let rated: Vec<(&String, f64, f64)> = ratings
        .iter()
        .filter(|((_, p), _)| *p == LikertPhase::PreHitl)
        .filter_map(|((node, _), &pre)| ratings.get(&(node.clone(), LikertPhase::PostHitl)).map(|&post| (node, pre as f64, post as f64)))
        .collect();
    if condition == EvalCondition::Post {
        let (pre, post): (Vec<f64>, Vec<f64>) = rated.iter().map(|r| (r.1, r.2)).unzip();
        t_tests.push(named_t("likert_pre_vs_post", &pre, &post));
    }

    let mut correlations = Vec::new();
    if let Some(session) = inp.session {
        let delta: BTreeMap<&str, f64> = rated.iter().map(|(n, pre, post)| (n.as_str(), post - pre)).collect();
        let (mut wc, mut tu, mut dy) = (Vec::new(), Vec::new(), Vec::new());
        for f in &session.feedback {
            let node = session.item(&f.item_id).map(|i| i.node_id.as_str());
            if let Some(&d) = node.and_then(|n| delta.get(n)) {
                wc.push(f.word_count as f64);
                tu.push(f.t_unit_count as f64);
                dy.push(d);
            }
        }
        correlations.push(named_r("word_count_vs_delta_likert", &wc, &dy));
        correlations.push(named_r("t_units_vs_delta_likert", &tu, &dy));
    }

    Ok(EvalReport {
        condition,
        user_id: user,
        graph_version: inp.graph.version,
        prompt_version: inp.llm.prompts().version_hash().to_string(),
        overall,
        by_layer,
        unanswered: items.iter().filter(|r| r.status == ItemStatus::Unanswered).count(),
        unevaluated: items.iter().filter(|r| r.status == ItemStatus::Unevaluated).count(),
        semantics: semantics_by_layer(inp.graph, inp.provider, inp.consensus)?,
        jaccard_by_layer: jaccard_by_layer(inp.graph, inp.journals),
        correlations,
        t_tests,
        likert: summarize_likert(inp.likert),
        items,
    })
}

/// Per-user F1, pre vs post, across a cohort of users.
pub fn cohort_t_test(pre: &[EvalReport], post: &[EvalReport]) -> NamedTTest {
    let before: BTreeMap<&str, f64> = pre.iter().filter_map(|r| r.overall.f1.map(|f| (r.user_id.as_str(), f))).collect();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for r in post {
        if let (Some(&x), Some(y)) = (before.get(r.user_id.as_str()), r.overall.f1) {
            a.push(x);
            b.push(y);
        }
    }
    named_t("user_f1_pre_vs_post", &a, &b)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Flat CSV tables next to the JSON report: scores, semantics, jaccard and
/// likert.
pub fn write_report_csv(report: &EvalReport, dir: &Path) -> csv::Result<()> {
    std::fs::create_dir_all(dir)?;
    let cond = report.condition.to_string();
    let mut w = csv::Writer::from_path(dir.join(format!("scores_{cond}.csv")))?;
    w.write_record(["condition", "scope", "precision", "recall", "f1", "sd", "tp", "fp", "fn", "n"])?;
    let rows = std::iter::once(("overall".to_string(), &report.overall)).chain(report.by_layer.iter().map(|(k, v)| (k.clone(), v)));
    for (scope, s) in rows {
        w.write_record([
            cond.clone(),
            scope,
            opt(s.precision),
            opt(s.recall),
            opt(s.f1),
            opt(s.sd),
            s.tp.to_string(),
            s.fp.to_string(),
            s.fn_.to_string(),
            s.n.to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join(format!("semantics_{cond}.csv")))?;
    w.write_record(["layer", "nodes", "coherence", "similarity", "within_topic_similarity", "silhouette", "topics"])?;
    for s in &report.semantics {
        w.write_record([
            s.layer.to_string(),
            s.nodes.to_string(),
            opt(s.coherence),
            opt(s.mean_pairwise_similarity),
            opt(s.within_topic_similarity),
            opt(s.silhouette),
            s.topic_count.to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join(format!("jaccard_{cond}.csv")))?;
    w.write_record(["layer", "jaccard"])?;
    for (l, v) in &report.jaccard_by_layer {
        w.write_record([l.clone(), format!("{v:.6}")])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join(format!("likert_{cond}.csv")))?;
    w.write_record(["layer", "phase", "mean", "sd", "n", "pct_of_max", "pct_of_range"])?;
    for s in &report.likert {
        w.write_record([
            s.layer.map(|l| l.to_string()).unwrap_or_else(|| "all".into()),
            serde_json::to_value(s.phase).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            format!("{:.6}", s.mean),
            opt(s.sd),
            s.n.to_string(),
            format!("{:.4}", s.pct_of_max),
            format!("{:.4}", s.pct_of_range),
        ])?;
    }
    w.flush()?;
    Ok(())
}
