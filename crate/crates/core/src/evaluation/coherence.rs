//! Per-layer semantic alignment: topic coherence (C_v), cosine similarity,
//! silhouette and topic count.
//!
//! C_v follows Röder, Both & Hinneburg (2015), "Exploring the Space of Topic
//! Coherence Measures": boolean sliding windows over a reference corpus, NPMI
//! between each topic's top terms, and indirect cosine confirmation of every
//! term against the whole term set. The reference corpus is the layer's own
//! node texts. Window size and top-N are the usual defaults of that
//! construction.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::consensus::{hdbscan, reduce, ConsensusConfig, NOISE};
use crate::embed::{cosine, EmbedError, EmbeddingProvider};
use crate::graph::LayerTag;
use crate::text::content_tokens;

pub const CV_WINDOW: usize = 110;
pub const CV_TOP_N: usize = 10;

/// Boolean windows over each document's content tokens. Documents no longer
/// than the window are a single window.
pub fn sliding_windows(docs: &[String], size: usize) -> Vec<BTreeSet<String>> {
    let mut out = Vec::new();
    for d in docs {
        let toks = content_tokens(d);
        if toks.is_empty() {
            continue;
        }
        if toks.len() <= size {
            out.push(toks.into_iter().collect());
        } else {
            for w in toks.windows(size) {
                out.push(w.iter().cloned().collect());
            }
        }
    }
    out
}

/// The `n` most frequent content terms, ties broken alphabetically.
pub fn top_terms(docs: &[&str], n: usize) -> Vec<String> {
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    for d in docs {
        for t in content_tokens(d) {
            *freq.entry(t).or_default() += 1;
        }
    }
    let mut v: Vec<(String, usize)> = freq.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v.into_iter().take(n).map(|(t, _)| t).collect()
}

/// NPMI from window probabilities. Terms that never co-occur score -1 and
/// terms present in every window score 1.
fn npmi(p_i: f64, p_j: f64, p_ij: f64) -> f64 {
    if p_ij <= 0.0 {
        -1.0
    } else if p_ij >= 1.0 {
        1.0
    } else {
        (p_ij / (p_i * p_j)).ln() / -p_ij.ln()
    }
}

/// C_v of one term set against `windows`; `None` for fewer than two terms or
/// no windows. Clamped at 0 from below.
pub fn c_v(terms: &[String], windows: &[BTreeSet<String>]) -> Option<f64> {
    if terms.len() < 2 || windows.is_empty() {
        return None;
    }
    let n = windows.len() as f64;
    let p = |a: &str, b: &str| windows.iter().filter(|w| w.contains(a) && w.contains(b)).count() as f64 / n;
    let single: Vec<f64> = terms.iter().map(|t| p(t, t)).collect();
    let k = terms.len();
    let vecs: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|j| npmi(single[i], single[j], if i == j { single[i] } else { p(&terms[i], &terms[j]) })).collect())
        .collect();
    let total: Vec<f64> = (0..k).map(|j| vecs.iter().map(|v| v[j]).sum()).collect();
    let mean = vecs.iter().map(|v| cosine(v, &total)).sum::<f64>() / k as f64;
    Some(mean.clamp(0.0, 1.0))
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette over non-noise points with Euclidean distance. Singleton
/// clusters score 0. `None` with fewer than two clusters.
pub fn silhouette(points: &[Vec<f64>], labels: &[i32]) -> Option<f64> {
    let idx: Vec<usize> = (0..points.len()).filter(|&i| labels[i] != NOISE).collect();
    let clusters: BTreeSet<i32> = idx.iter().map(|&i| labels[i]).collect();
    if clusters.len() < 2 {
        return None;
    }
    let mut total = 0.0;
    for &i in &idx {
        let mut sums: BTreeMap<i32, (f64, usize)> = BTreeMap::new();
        for &j in &idx {
            if i != j {
                let e = sums.entry(labels[j]).or_default();
                e.0 += euclid(&points[i], &points[j]);
                e.1 += 1;
            }
        }
        let own = sums.get(&labels[i]).copied().unwrap_or((0.0, 0));
        if own.1 == 0 {
            continue;
        }
        let a = own.0 / own.1 as f64;
        let b = sums
            .iter()
            .filter(|(l, _)| **l != labels[i])
            .map(|(_, (s, c))| s / *c as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Some(total / idx.len() as f64)
}

fn mean_cosine(vectors: &[Vec<f64>], pairs: impl Iterator<Item = (usize, usize)>) -> Option<f64> {
    let (mut s, mut c) = (0.0, 0usize);
    for (i, j) in pairs {
        s += cosine(&vectors[i], &vectors[j]);
        c += 1;
    }
    (c > 0).then(|| s / c as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSemantics {
    pub layer: LayerTag,
    pub nodes: usize,
    /// False below three nodes; every metric is then null.
    pub defined: bool,
    pub coherence: Option<f64>,
    pub mean_pairwise_similarity: Option<f64>,
    pub within_topic_similarity: Option<f64>,
    pub silhouette: Option<f64>,
    pub topic_count: usize,
}

/// Embeds `texts`, clusters them into topics with the consensus clustering
/// settings, then scores the topics. When every point is noise the whole
/// layer is one topic.
pub fn layer_semantics(
    layer: LayerTag,
    texts: &[String],
    provider: &dyn EmbeddingProvider,
    config: &ConsensusConfig,
) -> Result<LayerSemantics, EmbedError> {
    let n = texts.len();
    if n < 3 {
        return Ok(LayerSemantics {
            layer,
            nodes: n,
            defined: false,
            coherence: None,
            mean_pairwise_similarity: None,
            within_topic_similarity: None,
            silhouette: None,
            topic_count: 0,
        });
    }
    let vectors = provider.embed(texts)?;
    let points = if n < config.reduce_dim {
        vectors.clone()
    } else {
        reduce::reduce(&vectors, config.reduce_dim, config.reducer, config.seed)
    };
    let mut labels = hdbscan(&points, config.min_cluster_size, config.min_cluster_size);
    if labels.iter().all(|&l| l == NOISE) {
        tracing::debug!(%layer, "no topics found, treating the layer as one topic");
        labels = vec![0; n];
    }
    let topics: BTreeSet<i32> = labels.iter().copied().filter(|&l| l != NOISE).collect();
    let windows = sliding_windows(texts, CV_WINDOW);
    let scores: Vec<f64> = topics
        .iter()
        .filter_map(|&t| {
            let docs: Vec<&str> = (0..n).filter(|&i| labels[i] == t).map(|i| texts[i].as_str()).collect();
            c_v(&top_terms(&docs, CV_TOP_N), &windows)
        })
        .collect();
    let all_pairs = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j)));
    let within = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).filter(|&(i, j)| labels[i] != NOISE && labels[i] == labels[j]);
    Ok(LayerSemantics {
        layer,
        nodes: n,
        defined: true,
        coherence: (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64),
        mean_pairwise_similarity: mean_cosine(&vectors, all_pairs),
        within_topic_similarity: mean_cosine(&vectors, within),
        silhouette: silhouette(&vectors, &labels),
        topic_count: topics.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silhouette_hand_fixture() {
        // clusters {0, 1} and {4, 6} on a line
        let pts: Vec<Vec<f64>> = [0.0, 1.0, 4.0, 6.0].iter().map(|&x| vec![x]).collect();
        let s = silhouette(&pts, &[0, 0, 1, 1]).unwrap();
        let s0 = (5.0 - 1.0) / 5.0;
        let s1 = (4.0 - 1.0) / 4.0;
        let s2 = (3.5 - 2.0) / 3.5;
        let s3 = (5.5 - 2.0) / 5.5;
        assert!((s - (s0 + s1 + s2 + s3) / 4.0).abs() < 1e-12);
        assert_eq!(silhouette(&pts, &[0, 0, 0, 0]), None);
        assert_eq!(silhouette(&pts, &[0, NOISE, 1, 1]).map(|v| v > 0.0), Some(true));
    }

    #[test]
    fn npmi_limits() {
        assert_eq!(npmi(0.5, 0.5, 0.0), -1.0);
        assert!((npmi(0.5, 0.5, 0.5) - 1.0).abs() < 1e-12);
        assert!(npmi(0.5, 0.5, 0.25).abs() < 1e-12);
    }

    #[test]
    fn identical_texts_are_fully_coherent() {
        let docs = vec!["morning run park".to_string(); 3];
        let w = sliding_windows(&docs, CV_WINDOW);
        let terms = top_terms(&docs.iter().map(String::as_str).collect::<Vec<_>>(), CV_TOP_N);
        assert_eq!(terms, vec!["morning", "park", "run"]);
        assert!((c_v(&terms, &w).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn windows_slide_over_long_documents() {
        let doc = (0..5).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        assert_eq!(sliding_windows(&[doc.clone()], 3).len(), 3);
        assert_eq!(sliding_windows(&[doc], 10).len(), 1);
    }
}
