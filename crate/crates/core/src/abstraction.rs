//! Dimension-guided synthesis of L2–L4.
//!
//! One GD call proposes `K` analytical dimensions per higher layer from a
//! seeded sample of L1 nodes. Each layer is then built from the one below:
//! for every dimension, CD groups the previous layer's titles and ID turns
//! each group into 1–3 insight nodes. Layers are strictly sequential.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::consensus::{filter_drafts, parse_drafts, Draft};
use crate::graph::{
    dimension_id, node_id, AnalyticalDimension, GraphError, GraphNode, LayerTag, LayeredGraph, PhaseState, PtmNode,
};
use crate::llm::{bounded_map, ExpectedShape, Llm, LlmError};
use crate::prompts::{vars, TemplateId};

#[derive(Debug, Error)]
pub enum AbstractionError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("layer {layer} produced no nodes; halted")]
    EmptyLayer { layer: LayerTag, partial: Box<LayeredGraph> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AbstractionConfig {
    pub sample_size: usize,
    pub dims_per_layer: usize,
    /// Fixed cluster count per dimension; derived from layer size when unset.
    pub clusters_per_dimension: Option<usize>,
    pub seed: u64,
}

impl Default for AbstractionConfig {
    fn default() -> Self {
        AbstractionConfig { sample_size: 50, dims_per_layer: 3, clusters_per_dimension: None, seed: 42 }
    }
}

impl AbstractionConfig {
    pub fn num_clusters(&self, prev_layer_len: usize) -> usize {
        self.clusters_per_dimension.unwrap_or_else(|| (prev_layer_len / 5).max(2))
    }
}

/// Seeded uniform sample without replacement of `min(sample_size, n)` nodes.
pub fn sample_l1<'a>(nodes: &[&'a PtmNode], config: &AbstractionConfig) -> Vec<&'a PtmNode> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let m = config.sample_size.min(nodes.len());
    rand::seq::index::sample(&mut rng, nodes.len(), m).into_iter().map(|i| nodes[i]).collect()
}

fn parse_dimensions(v: Value, k: usize) -> Result<Vec<AnalyticalDimension>, String> {
    let obj = v.as_object().ok_or("expected a JSON object")?;
    let mut out = Vec::new();
    for layer in LayerTag::ABSTRACT {
        let key = layer.to_string();
        let arr = obj.get(&key).and_then(Value::as_array).ok_or_else(|| format!("missing key \"{key}\""))?;
        if arr.len() != k {
            return Err(format!("{key} has {} dimensions, expected {k}", arr.len()));
        }
        for (i, d) in arr.iter().enumerate() {
            let field = |f: &str| {
                d.get(f)
                    .and_then(Value::as_str)
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .ok_or_else(|| format!("{key}[{i}] has no \"{f}\""))
            };
            out.push(AnalyticalDimension {
                id: dimension_id(layer, i + 1),
                layer,
                title: field("title")?,
                description: field("description")?,
            });
        }
    }
    Ok(out)
}

/// One GD call producing exactly `K` dimensions for each of L2, L3 and L4.
pub fn generate_dimensions(
    llm: &Llm,
    sample: &[&PtmNode],
    config: &AbstractionConfig,
) -> Result<Vec<AnalyticalDimension>, AbstractionError> {
    if sample.is_empty() {
        return Err(AbstractionError::Precondition("dimension generation needs at least one L1 node".into()));
    }
    let text = sample.iter().map(|n| format!("- {}: {}", n.title, n.content)).collect::<Vec<_>>().join("\n");
    let k = config.dims_per_layer;
    Ok(llm.call_json(
        TemplateId::GD,
        vars([("layer_number", "1".into()), ("num_dimensions", k.to_string()), ("sampled_nodes_text", text)]),
        ExpectedShape::JsonObject,
        |v| parse_dimensions(v, k),
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionCluster {
    pub dimension_id: String,
    pub cluster_label: String,
    pub member_node_ids: Vec<String>,
}

type RawCluster = (String, Vec<i64>);

fn parse_clusters(v: Value) -> Result<Vec<RawCluster>, String> {
    let arr = v.get("clusters").and_then(Value::as_array).ok_or("missing \"clusters\" array")?;
    arr.iter()
        .enumerate()
        .map(|(i, c)| {
            let label = c.get("cluster_label").and_then(Value::as_str).ok_or_else(|| format!("cluster {i} has no label"))?;
            let idx = c
                .get("node_indices")
                .and_then(Value::as_array)
                .ok_or_else(|| format!("cluster {i} has no node_indices"))?
                .iter()
                .map(|x| x.as_i64().ok_or_else(|| format!("cluster {i} has a non-integer index")))
                .collect::<Result<Vec<i64>, String>>()?;
            Ok((label.trim().to_string(), idx))
        })
        .collect()
}

/// Numbered title list sent to CD; indices start at 1.
pub fn numbered_titles(nodes: &[&PtmNode]) -> String {
    nodes.iter().enumerate().map(|(i, n)| format!("{}. {}", i + 1, n.title)).collect::<Vec<_>>().join("\n")
}

/// CD over the previous layer's titles. Out-of-range indices and groups with
/// fewer than two members are dropped and reported.
pub fn cluster_by_dimension(
    llm: &Llm,
    prev: &[&PtmNode],
    dimension: &AnalyticalDimension,
    num_clusters: usize,
) -> Result<(Vec<DimensionCluster>, Vec<String>), AbstractionError> {
    if let Some(bad) = prev.iter().find(|n| Some(n.layer) != dimension.layer.below()) {
        return Err(AbstractionError::Precondition(format!("{} is not on the layer below {}", bad.id, dimension.id)));
    }
    let raw = llm.call_json(
        TemplateId::CD,
        vars([
            ("dimension_title", dimension.title.clone()),
            ("dimension_description", dimension.description.clone()),
            ("num_clusters", num_clusters.to_string()),
            ("numbered_nodes_text", numbered_titles(prev)),
        ]),
        ExpectedShape::JsonObject,
        parse_clusters,
    )?;
    let mut clusters = Vec::new();
    let mut dropped = Vec::new();
    for (label, indices) in raw {
        let mut members: Vec<String> = Vec::new();
        for i in indices {
            match usize::try_from(i).ok().filter(|&i| i >= 1 && i <= prev.len()) {
                Some(i) => {
                    let id = &prev[i - 1].id;
                    if !members.contains(id) {
                        members.push(id.clone());
                    }
                }
                None => dropped.push(format!("{}: index {i} out of range in \"{label}\"", dimension.id)),
            }
        }
        if members.len() < 2 {
            dropped.push(format!("{}: cluster \"{label}\" has fewer than two nodes", dimension.id));
            continue;
        }
        clusters.push(DimensionCluster { dimension_id: dimension.id.clone(), cluster_label: label, member_node_ids: members });
    }
    if clusters.is_empty() {
        dropped.push(format!("{}: no usable clusters", dimension.id));
    }
    for d in &dropped {
        tracing::warn!("{d}");
    }
    Ok((clusters, dropped))
}

/// ID over one cluster; returns drafts whose sources stay inside the cluster.
pub fn synthesize_layer(
    llm: &Llm,
    cluster: &DimensionCluster,
    members: &[&PtmNode],
    dimension: &AnalyticalDimension,
) -> Result<(Vec<Draft>, Vec<String>), AbstractionError> {
    let records: Vec<Value> =
        members.iter().map(|n| json!({"node_id": n.id, "title": n.title, "content": n.content})).collect();
    let drafts = llm.call_json(
        TemplateId::ID,
        vars([
            ("dimension_title", dimension.title.clone()),
            ("dimension_description", dimension.description.clone()),
            ("cluster_label", cluster.cluster_label.clone()),
            ("source_nodes_json", serde_json::to_string_pretty(&records).expect("json values serialize")),
        ]),
        ExpectedShape::JsonArray,
        |v| parse_drafts(v, "source_nodes"),
    )?;
    let allowed: BTreeSet<&str> = cluster.member_node_ids.iter().map(String::as_str).collect();
    let out = filter_drafts(drafts, &allowed, &format!("{} \"{}\"", dimension.id, cluster.cluster_label));
    Ok((out.drafts, out.dropped))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerBuild {
    pub layer: String,
    pub clusters: usize,
    pub nodes: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AbstractionReport {
    pub sampled: usize,
    pub dimensions: usize,
    pub layers: Vec<LayerBuild>,
    pub dropped: Vec<String>,
}

/// Builds one layer from the layer below across all of its dimensions.
fn build_layer(
    llm: &Llm,
    graph: &LayeredGraph,
    layer: LayerTag,
    config: &AbstractionConfig,
    max_in_flight: usize,
) -> Result<(Vec<PtmNode>, LayerBuild, Vec<String>), AbstractionError> {
    let below = layer.below().expect("abstract layers have a layer below");
    let prev: Vec<&PtmNode> = graph.layer_nodes(below).collect();
    let dims: Vec<&AnalyticalDimension> = graph.dimensions().iter().filter(|d| d.layer == layer).collect();
    let k = config.num_clusters(prev.len());
    let per_dim = bounded_map(&dims, max_in_flight, |dim| -> Result<_, AbstractionError> {
        let (clusters, mut dropped) = cluster_by_dimension(llm, &prev, dim, k)?;
        let mut drafts = Vec::new();
        for c in &clusters {
            let members: Vec<&PtmNode> = c.member_node_ids.iter().filter_map(|id| prev.iter().find(|n| &n.id == id).copied()).collect();
            let (d, drop) = synthesize_layer(llm, c, &members, dim)?;
            drafts.extend(d.into_iter().map(|d| (dim.id.clone(), d)));
            dropped.extend(drop);
        }
        Ok((clusters.len(), drafts, dropped))
    });
    let mut build = LayerBuild { layer: layer.to_string(), ..LayerBuild::default() };
    let mut nodes = Vec::new();
    let mut dropped = Vec::new();
    for r in per_dim {
        let (n_clusters, drafts, drop) = r?;
        build.clusters += n_clusters;
        dropped.extend(drop);
        for (dim, d) in drafts {
            nodes.push(PtmNode {
                id: node_id(layer, nodes.len() + 1),
                layer,
                title: d.title,
                content: d.content,
                dimension_id: Some(dim),
                source_ids: d.sources,
                revisions: Vec::new(),
            });
        }
    }
    build.nodes = nodes.len();
    Ok((nodes, build, dropped))
}

/// L2 from L1, L3 from L2, L4 from L3. Starts from the graph's L0/L1 content,
/// so a rerun replaces earlier higher layers. A layer with no nodes halts the
/// build; the partial graph travels in the error.
pub fn build_higher_layers(
    graph: &LayeredGraph,
    llm: &Llm,
    config: &AbstractionConfig,
    max_in_flight: usize,
    at: chrono::DateTime<chrono::Utc>,
) -> Result<(LayeredGraph, AbstractionReport), AbstractionError> {
    if graph.phase_state != PhaseState::L1Built {
        return Err(AbstractionError::Precondition(format!(
            "higher layers need phase l1_built, graph is {:?}",
            graph.phase_state
        )));
    }
    let l1: Vec<&PtmNode> = graph.layer_nodes(LayerTag::L1).collect();
    if l1.is_empty() {
        return Err(AbstractionError::Precondition("no L1 nodes".into()));
    }
    let mut report = AbstractionReport::default();
    let sample = sample_l1(&l1, config);
    report.sampled = sample.len();
    let dims = generate_dimensions(llm, &sample, config)?;
    report.dimensions = dims.len();
    let mut g = graph.truncate_above(LayerTag::L1, at).put_dimensions(dims, at)?;
    for layer in LayerTag::ABSTRACT {
        let (nodes, build, dropped) = build_layer(llm, &g, layer, config, max_in_flight)?;
        report.dropped.extend(dropped);
        report.layers.push(build);
        if nodes.is_empty() {
            return Err(AbstractionError::EmptyLayer { layer, partial: Box::new(g) });
        }
        g = g.put_nodes(nodes.into_iter().map(GraphNode::from).collect(), at)?;
    }
    Ok((g.with_phase(PhaseState::FullBuilt, at), report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l1(k: usize) -> PtmNode {
        PtmNode {
            id: node_id(LayerTag::L1, k),
            layer: LayerTag::L1,
            title: format!("Pattern {k}"),
            content: format!("The user does thing {k}."),
            dimension_id: None,
            source_ids: vec!["x".into()],
            revisions: vec![],
        }
    }

    #[test]
    fn sampling_without_replacement() {
        let nodes: Vec<PtmNode> = (1..=73).map(l1).collect();
        let refs: Vec<&PtmNode> = nodes.iter().collect();
        let cfg = AbstractionConfig::default();
        let s = sample_l1(&refs, &cfg);
        assert_eq!(s.len(), 50);
        let ids: BTreeSet<&str> = s.iter().map(|n| n.id.as_str()).collect();
        assert_eq!(ids.len(), 50);
        let again: Vec<&str> = sample_l1(&refs, &cfg).iter().map(|n| n.id.as_str()).collect();
        assert_eq!(again, s.iter().map(|n| n.id.as_str()).collect::<Vec<_>>());
        assert_eq!(sample_l1(&refs[..30], &cfg).len(), 30);
    }

    #[test]
    fn cluster_count_rule() {
        let cfg = AbstractionConfig::default();
        assert_eq!((cfg.num_clusters(3), cfg.num_clusters(10), cfg.num_clusters(73)), (2, 2, 14));
        let fixed = AbstractionConfig { clusters_per_dimension: Some(1), ..cfg };
        assert_eq!(fixed.num_clusters(40), 1);
    }

    #[test]
    fn dimension_validation() {
        let dim = |t: &str| json!({"title": t, "description": "d"});
        let ok = json!({"L2": [dim("a"), dim("b")], "L3": [dim("c"), dim("d")], "L4": [dim("e"), dim("f")]});
        let dims = parse_dimensions(ok, 2).unwrap();
        assert_eq!(dims.len(), 6);
        assert_eq!((dims[2].id.as_str(), dims[2].layer), ("L3_Dim_1", LayerTag::L3));
        let short = json!({"L2": [dim("a"), dim("b")], "L3": [dim("c")], "L4": [dim("e"), dim("f")]});
        assert!(parse_dimensions(short, 2).unwrap_err().contains("L3 has 1"));
        assert!(parse_dimensions(json!({"L2": []}), 0).is_err());
    }
}
