//! Five-point node ratings captured before and after refinement.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::graph::{DataDir, GraphError, LayerTag, LayeredGraph};

use super::metrics::mean_sd;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikertPhase {
    PreHitl,
    PostHitl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikertRecord {
    pub node_id: String,
    pub layer: LayerTag,
    pub phase: LikertPhase,
    pub rating: u8,
    pub recorded_at: DateTime<Utc>,
}

/// Validates and appends one rating. The node must exist in `graph`.
pub fn record_likert(
    dir: &DataDir,
    graph: &LayeredGraph,
    node_id: &str,
    phase: LikertPhase,
    rating: i64,
    at: DateTime<Utc>,
) -> Result<LikertRecord, GraphError> {
    if !(1..=5).contains(&rating) {
        return Err(GraphError::InvalidNode { node: node_id.into(), reason: format!("rating {rating} is outside 1..5") });
    }
    let node = graph.get(node_id).ok_or_else(|| GraphError::NotFound(node_id.into()))?;
    let record = LikertRecord { node_id: node_id.into(), layer: node.layer(), phase, rating: rating as u8, recorded_at: at };
    let path = dir.likert_path(&graph.user_id);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(&record)?)?;
    Ok(record)
}

pub fn load_likert(dir: &DataDir, user_id: &str) -> Result<Vec<LikertRecord>, GraphError> {
    match std::fs::read_to_string(dir.likert_path(user_id)) {
        Ok(s) => s.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikertSummary {
    /// `None` for the all-layer row.
    pub layer: Option<LayerTag>,
    pub phase: LikertPhase,
    pub mean: f64,
    pub sd: Option<f64>,
    pub n: usize,
    /// mean / 5 × 100.
    pub pct_of_max: f64,
    /// (mean − 1) / 4 × 100.
    pub pct_of_range: f64,
}

/// Per (layer, phase) rows followed by one all-layer row per phase.
pub fn summarize_likert(records: &[LikertRecord]) -> Vec<LikertSummary> {
    let mut groups: BTreeMap<(Option<LayerTag>, LikertPhase), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups.entry((Some(r.layer), r.phase)).or_default().push(r.rating as f64);
        groups.entry((None, r.phase)).or_default().push(r.rating as f64);
    }
    let mut rows: Vec<LikertSummary> = groups
        .into_iter()
        .map(|((layer, phase), xs)| {
            let (mean, sd) = mean_sd(&xs);
            let mean = mean.unwrap_or(0.0);
            LikertSummary {
                layer,
                phase,
                mean,
                sd,
                n: xs.len(),
                pct_of_max: mean / 5.0 * 100.0,
                pct_of_range: (mean - 1.0) / 4.0 * 100.0,
            }
        })
        .collect();
    rows.sort_by_key(|r| (r.layer.is_none(), r.layer, r.phase));
    rows
}

/// Latest rating per node and phase.
pub fn latest_ratings(records: &[LikertRecord]) -> BTreeMap<(String, LikertPhase), u8> {
    records.iter().map(|r| ((r.node_id.clone(), r.phase), r.rating)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(layer: LayerTag, phase: LikertPhase, rating: u8) -> LikertRecord {
        LikertRecord { node_id: "n".into(), layer, phase, rating, recorded_at: DateTime::<Utc>::UNIX_EPOCH }
    }

    #[test]
    fn summary_arithmetic() {
        let rs = [4, 5, 4].map(|r| rec(LayerTag::L1, LikertPhase::PreHitl, r));
        let s = summarize_likert(&rs);
        assert_eq!(s.len(), 2);
        assert!((s[0].mean - 13.0 / 3.0).abs() < 1e-12);
        assert_eq!(s[0].layer, Some(LayerTag::L1));
        assert_eq!(s[1].layer, None);
        let mid = summarize_likert(&[rec(LayerTag::L2, LikertPhase::PostHitl, 3)]);
        assert_eq!((mid[0].pct_of_max, mid[0].pct_of_range), (60.0, 50.0));
    }
}
