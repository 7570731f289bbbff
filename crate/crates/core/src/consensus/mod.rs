//! Pattern discovery over L0 instances: one density clustering per 5W1H
//! attribute, a weighted agreement matrix with a same-day penalty, threshold
//! grouping, and L1 synthesis per group.

pub mod hdbscan;
pub mod reduce;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::embed::{EmbedError, EmbeddingProvider};
use crate::graph::{node_id, Attribute, BehavioralInstance, LayerTag, PtmNode};
use crate::llm::{ExpectedShape, Llm, LlmError};
use crate::prompts::{vars, TemplateId};

pub use hdbscan::{hdbscan, NOISE};
pub use reduce::ReducerKind;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConsensusError {
    #[error("invalid consensus config: {0}")]
    Config(String),
    #[error("assignment for attribute {attribute} is missing instance {id}")]
    MissingInstance { attribute: Attribute, id: String },
    #[error("no assignment for attribute {0}")]
    MissingAttribute(Attribute),
    #[error("duplicate assignment for attribute {0}")]
    DuplicateAttribute(Attribute),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsensusConfig {
    pub weights: BTreeMap<Attribute, i32>,
    pub same_date_penalty: i32,
    pub tau: i32,
    pub reduce_dim: usize,
    pub min_cluster_size: usize,
    pub reducer: ReducerKind,
    pub seed: u64,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        let weights = Attribute::ALL.iter().map(|&a| (a, if a == Attribute::What { 2 } else { 1 })).collect();
        ConsensusConfig {
            weights,
            same_date_penalty: 2,
            tau: 4,
            reduce_dim: 25,
            min_cluster_size: 2,
            reducer: ReducerKind::Pca,
            seed: 42,
        }
    }
}

impl ConsensusConfig {
    pub fn validate(&self) -> Result<(), ConsensusError> {
        for a in Attribute::ALL {
            match self.weights.get(&a) {
                Some(w) if *w > 0 => {}
                _ => return Err(ConsensusError::Config(format!("weight for {a} must be a positive integer"))),
            }
        }
        if self.tau < 1 {
            return Err(ConsensusError::Config("tau must be at least 1".into()));
        }
        if self.reduce_dim < 2 {
            return Err(ConsensusError::Config("reduce_dim must be at least 2".into()));
        }
        if self.same_date_penalty < 0 {
            return Err(ConsensusError::Config("same_date_penalty must not be negative".into()));
        }
        Ok(())
    }

    pub fn weight(&self, a: Attribute) -> i32 {
        self.weights.get(&a).copied().unwrap_or(0)
    }
}

/// Labels for one attribute; [`NOISE`] marks outliers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeAssignment {
    pub attribute: Attribute,
    pub labels: BTreeMap<String, i32>,
}

/// Embeds one attribute's text for every instance and clusters it. Instances
/// are processed in id order.
pub fn base_cluster(
    instances: &[BehavioralInstance],
    attribute: Attribute,
    provider: &dyn EmbeddingProvider,
    config: &ConsensusConfig,
) -> Result<AttributeAssignment, ConsensusError> {
    let mut sorted: Vec<&BehavioralInstance> = instances.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let texts: Vec<String> = sorted.iter().map(|i| i.attribute(attribute).to_string()).collect();
    let vectors = provider.embed(&texts)?;
    let points = if sorted.len() < config.reduce_dim {
        tracing::debug!(%attribute, n = sorted.len(), "fewer instances than reduce_dim, clustering raw embeddings");
        vectors
    } else {
        reduce::reduce(&vectors, config.reduce_dim, config.reducer, config.seed)
    };
    let labels = hdbscan(&points, config.min_cluster_size, config.min_cluster_size);
    Ok(AttributeAssignment {
        attribute,
        labels: sorted.iter().zip(labels).map(|(i, l)| (i.id.clone(), l)).collect(),
    })
}

/// Pairwise raw agreement `R`, same-date penalty `P` and score `S = R - P`.
/// Diagonals are zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusMatrix {
    pub instance_ids: Vec<String>,
    pub r: Vec<Vec<i32>>,
    pub p: Vec<Vec<i32>>,
    pub s: Vec<Vec<i32>>,
}

impl ConsensusMatrix {
    pub fn len(&self) -> usize {
        self.instance_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instance_ids.is_empty()
    }

    /// CSV dump: one section per matrix, each headed by the instance ids.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
        for (name, m) in [("R", &self.r), ("P", &self.p), ("S", &self.s)] {
            let mut header = vec![name.to_string()];
            header.extend(self.instance_ids.iter().cloned());
            w.write_record(&header)?;
            for (id, row) in self.instance_ids.iter().zip(m) {
                let mut rec = vec![id.clone()];
                rec.extend(row.iter().map(i32::to_string));
                w.write_record(&rec)?;
            }
            w.write_record([""])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn build_consensus(
    assignments: &[AttributeAssignment],
    dates: &BTreeMap<String, NaiveDate>,
    config: &ConsensusConfig,
) -> Result<ConsensusMatrix, ConsensusError> {
    config.validate()?;
    let mut by_attr: HashMap<Attribute, &AttributeAssignment> = HashMap::new();
    for a in assignments {
        if by_attr.insert(a.attribute, a).is_some() {
            return Err(ConsensusError::DuplicateAttribute(a.attribute));
        }
    }
    let ids: Vec<String> = dates.keys().cloned().collect();
    let n = ids.len();
    // labels[a][i]
    let mut labels: Vec<(i32, Vec<i32>)> = Vec::with_capacity(6);
    for attr in Attribute::ALL {
        let a = by_attr.get(&attr).ok_or(ConsensusError::MissingAttribute(attr))?;
        let col = ids
            .iter()
            .map(|id| {
                a.labels
                    .get(id)
                    .copied()
                    .ok_or_else(|| ConsensusError::MissingInstance { attribute: attr, id: id.clone() })
            })
            .collect::<Result<Vec<i32>, _>>()?;
        labels.push((config.weight(attr), col));
    }
    let day: Vec<NaiveDate> = ids.iter().map(|id| dates[id]).collect();
    let mut r = vec![vec![0; n]; n];
    let mut p = vec![vec![0; n]; n];
    let mut s = vec![vec![0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let raw: i32 = labels
                .iter()
                .filter(|(_, col)| col[i] != NOISE && col[i] == col[j])
                .map(|(w, _)| *w)
                .sum();
            let pen = if day[i] == day[j] { config.same_date_penalty } else { 0 };
            r[i][j] = raw;
            r[j][i] = raw;
            p[i][j] = pen;
            p[j][i] = pen;
            s[i][j] = raw - pen;
            s[j][i] = raw - pen;
        }
    }
    Ok(ConsensusMatrix { instance_ids: ids, r, p, s })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSet {
    pub clusters: Vec<Vec<String>>,
    pub unclustered: Vec<String>,
}

/// Connected components of the graph with an edge wherever `S ≥ τ`.
/// Components of size one are unclustered. Clusters are ordered by their
/// earliest instance date, then by smallest id.
pub fn form_clusters(matrix: &ConsensusMatrix, dates: &BTreeMap<String, NaiveDate>, tau: i32) -> ClusterSet {
    let n = matrix.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for i in 0..n {
        for j in i + 1..n {
            if matrix.s[i][j] >= tau {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    let mut set = ClusterSet::default();
    let mut clusters: Vec<(NaiveDate, String, Vec<String>)> = Vec::new();
    for members in groups.into_values() {
        let ids: Vec<String> = members.iter().map(|&i| matrix.instance_ids[i].clone()).collect();
        if ids.len() < 2 {
            set.unclustered.extend(ids);
            continue;
        }
        let first = ids.iter().filter_map(|id| dates.get(id)).min().copied().unwrap_or(NaiveDate::MIN);
        clusters.push((first, ids[0].clone(), ids));
    }
    clusters.sort();
    set.clusters = clusters.into_iter().map(|c| c.2).collect();
    set.unclustered.sort();
    set
}

/// Runs the six attribute clusterings (in parallel) and returns them in
/// canonical attribute order.
pub fn cluster_all_attributes(
    instances: &[BehavioralInstance],
    provider: &dyn EmbeddingProvider,
    config: &ConsensusConfig,
) -> Result<Vec<AttributeAssignment>, ConsensusError> {
    Attribute::ALL.par_iter().map(|&a| base_cluster(instances, a, provider, config)).collect()
}

pub const MAX_PATTERNS: usize = 3;

/// A synthesized node before an id is assigned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draft {
    pub title: String,
    pub content: String,
    pub sources: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Synthesis {
    pub drafts: Vec<Draft>,
    pub dropped: Vec<String>,
}

/// Parses a JSON array of `{title, content, <sources_key>}` objects. Any
/// structural problem fails the whole reply (triggering a re-ask).
pub fn parse_drafts(v: Value, sources_key: &str) -> Result<Vec<Draft>, String> {
    let arr = v.as_array().ok_or("expected a JSON array")?;
    arr.iter()
        .enumerate()
        .map(|(i, item)| {
            let obj = item.as_object().ok_or_else(|| format!("item {i} is not an object"))?;
            let text = |k: &str| {
                obj.get(k).and_then(Value::as_str).map(|s| s.trim().to_string()).ok_or_else(|| format!("item {i} has no string \"{k}\""))
            };
            let sources = obj
                .get(sources_key)
                .and_then(Value::as_array)
                .ok_or_else(|| format!("item {i} has no \"{sources_key}\" array"))?
                .iter()
                .map(|s| match s {
                    Value::String(s) => Ok(s.trim().to_string()),
                    Value::Number(n) => Ok(n.to_string()),
                    _ => Err(format!("item {i} has a non-string source id")),
                })
                .collect::<Result<Vec<String>, String>>()?;
            Ok(Draft { title: text("title")?, content: text("content")?, sources })
        })
        .collect()
}

/// Keeps at most [`MAX_PATTERNS`] drafts whose sources are a non-empty subset
/// of `allowed`; everything else is reported in `dropped`.
pub fn filter_drafts(drafts: Vec<Draft>, allowed: &BTreeSet<&str>, context: &str) -> Synthesis {
    let mut out = Synthesis::default();
    for (i, mut d) in drafts.into_iter().enumerate() {
        if i >= MAX_PATTERNS {
            out.dropped.push(format!("{context}: draft {} exceeds the limit of {MAX_PATTERNS}", i + 1));
            continue;
        }
        let mut seen = BTreeSet::new();
        d.sources.retain(|s| seen.insert(s.clone()));
        let outside: Vec<&String> = d.sources.iter().filter(|s| !allowed.contains(s.as_str())).collect();
        if !outside.is_empty() {
            out.dropped.push(format!("{context}: draft \"{}\" cites ids outside the cluster: {outside:?}", d.title));
        } else if d.sources.is_empty() {
            out.dropped.push(format!("{context}: draft \"{}\" cites no sources", d.title));
        } else if d.title.is_empty() || d.content.is_empty() {
            out.dropped.push(format!("{context}: draft {} has an empty title or content", i + 1));
        } else {
            out.drafts.push(d);
        }
    }
    for reason in &out.dropped {
        tracing::warn!("{reason}");
    }
    out
}

pub fn instance_block(inst: &BehavioralInstance) -> String {
    format!(
        "[{}] date: {} | WHAT: {} | WHEN: {} | WHERE: {} | WHO: {} | WHY: {} | HOW: {}",
        inst.id, inst.date, inst.what, inst.when, inst.where_, inst.who, inst.why, inst.how
    )
}

/// IO over one consensus cluster.
pub fn synthesize_l1(llm: &Llm, cluster: &[&BehavioralInstance]) -> Result<Synthesis, LlmError> {
    let ids: Vec<&str> = cluster.iter().map(|i| i.id.as_str()).collect();
    let ids_json = serde_json::to_string(&ids).expect("string list serializes");
    let text = cluster.iter().map(|i| instance_block(i)).collect::<Vec<_>>().join("\n");
    let drafts = llm.call_json(
        TemplateId::IO,
        vars([("instance_ids_json", ids_json), ("instances_text", text)]),
        ExpectedShape::JsonArray,
        |v| parse_drafts(v, "source_instances"),
    )?;
    let allowed: BTreeSet<&str> = ids.iter().copied().collect();
    Ok(filter_drafts(drafts, &allowed, &format!("cluster {}", ids.first().unwrap_or(&""))))
}

/// Turns per-cluster drafts into L1 nodes numbered from `L1_Node_1`.
pub fn number_l1(drafts: impl IntoIterator<Item = Draft>) -> Vec<PtmNode> {
    drafts
        .into_iter()
        .enumerate()
        .map(|(k, d)| PtmNode {
            id: node_id(LayerTag::L1, k + 1),
            layer: LayerTag::L1,
            title: d.title,
            content: d.content,
            dimension_id: None,
            source_ids: d.sources,
            revisions: Vec::new(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn assign(attr: Attribute, labels: &[(&str, i32)]) -> AttributeAssignment {
        AttributeAssignment { attribute: attr, labels: labels.iter().map(|(k, v)| (k.to_string(), *v)).collect() }
    }

    fn pair(agree: &[Attribute], same_day: bool) -> ConsensusMatrix {
        let assignments: Vec<AttributeAssignment> = Attribute::ALL
            .iter()
            .map(|&a| if agree.contains(&a) { assign(a, &[("x", 0), ("y", 0)]) } else { assign(a, &[("x", 0), ("y", 1)]) })
            .collect();
        let dates = BTreeMap::from([("x".to_string(), d("2025-01-01")), ("y".to_string(), d(if same_day { "2025-01-01" } else { "2025-01-02" }))]);
        build_consensus(&assignments, &dates, &ConsensusConfig::default()).unwrap()
    }

    #[test]
    fn worked_pairs() {
        let m = pair(&Attribute::ALL, false);
        assert_eq!((m.r[0][1], m.p[0][1], m.s[0][1]), (7, 0, 7));
        let m = pair(&[Attribute::What, Attribute::When], true);
        assert_eq!((m.r[0][1], m.p[0][1], m.s[0][1]), (3, 2, 1));
    }

    #[test]
    fn noise_never_matches() {
        let assignments: Vec<AttributeAssignment> = Attribute::ALL
            .iter()
            .map(|&a| if a == Attribute::Who { assign(a, &[("x", NOISE), ("y", NOISE)]) } else { assign(a, &[("x", 0), ("y", 1)]) })
            .collect();
        for (day, expect) in [("2025-01-02", 0), ("2025-01-01", -2)] {
            let dates = BTreeMap::from([("x".to_string(), d("2025-01-01")), ("y".to_string(), d(day))]);
            let m = build_consensus(&assignments, &dates, &ConsensusConfig::default()).unwrap();
            assert_eq!((m.r[0][1], m.s[0][1]), (0, expect));
        }
    }

    #[test]
    fn missing_instance_names_attribute() {
        let mut a: Vec<AttributeAssignment> = Attribute::ALL.iter().map(|&x| assign(x, &[("x", 0), ("y", 0)])).collect();
        a[4].labels.remove("y");
        let dates = BTreeMap::from([("x".to_string(), d("2025-01-01")), ("y".to_string(), d("2025-01-02"))]);
        let err = build_consensus(&a, &dates, &ConsensusConfig::default()).unwrap_err();
        assert_eq!(err, ConsensusError::MissingInstance { attribute: Attribute::Why, id: "y".into() });
        assert!(build_consensus(&a[..5], &dates, &ConsensusConfig::default()).is_err());
    }

    fn matrix_from(ids: &[&str], edges: &[(usize, usize, i32)]) -> ConsensusMatrix {
        let n = ids.len();
        let mut s = vec![vec![0; n]; n];
        for &(i, j, v) in edges {
            s[i][j] = v;
            s[j][i] = v;
        }
        ConsensusMatrix { instance_ids: ids.iter().map(|s| s.to_string()).collect(), r: s.clone(), p: vec![vec![0; n]; n], s }
    }

    #[test]
    fn chained_components() {
        let m = matrix_from(&["a", "b", "c"], &[(0, 1, 5), (1, 2, 4), (0, 2, 1)]);
        let dates: BTreeMap<String, NaiveDate> = ["a", "b", "c"].iter().map(|s| (s.to_string(), d("2025-01-01"))).collect();
        let set = form_clusters(&m, &dates, 4);
        assert_eq!(set.clusters, vec![vec!["a", "b", "c"]]);
        assert!(set.unclustered.is_empty());
        let set = form_clusters(&m, &dates, 6);
        assert!(set.clusters.is_empty());
        assert_eq!(set.unclustered, vec!["a", "b", "c"]);
    }

    #[test]
    fn clusters_ordered_by_earliest_date() {
        let m = matrix_from(&["a", "b", "c", "d", "e"], &[(0, 1, 4), (2, 3, 4)]);
        let dates: BTreeMap<String, NaiveDate> = [("a", "2025-02-01"), ("b", "2025-02-03"), ("c", "2025-01-05"), ("d", "2025-03-01"), ("e", "2025-01-01")]
            .iter()
            .map(|(k, v)| (k.to_string(), d(v)))
            .collect();
        let set = form_clusters(&m, &dates, 4);
        assert_eq!(set.clusters, vec![vec!["c", "d"], vec!["a", "b"]]);
        assert_eq!(set.unclustered, vec!["e"]);
    }

    #[test]
    fn csv_dump_has_three_sections() {
        let m = pair(&Attribute::ALL, false);
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("R,x,y\nx,0,7\ny,7,0\n"));
        assert!(text.contains("\nP,x,y\n") && text.contains("\nS,x,y\n"));
    }

    #[test]
    fn draft_filtering() {
        let allowed: BTreeSet<&str> = ["a", "b", "c"].into_iter().collect();
        let mk = |t: &str, s: &[&str]| Draft { title: t.into(), content: "c".into(), sources: s.iter().map(|x| x.to_string()).collect() };
        let out = filter_drafts(
            vec![mk("one", &["a", "a", "b"]), mk("two", &["z"]), mk("three", &[]), mk("four", &["c"])],
            &allowed,
            "t",
        );
        assert_eq!(out.drafts.len(), 1);
        assert_eq!(out.drafts[0].sources, vec!["a", "b"]);
        assert_eq!(out.dropped.len(), 3);
    }

    #[test]
    fn base_cluster_groups_identical_text() {
        use crate::embed::HashingEmbedder;
        let mk = |id: &str, place: &str| BehavioralInstance {
            id: id.into(),
            what: "x".into(),
            when: String::new(),
            where_: place.into(),
            who: String::new(),
            why: String::new(),
            how: String::new(),
            date: d("2025-01-01"),
            time_window: None,
            journal_entry_id: "e".into(),
        };
        let inst = vec![
            mk("1", "Home"),
            mk("2", "Badminton court at the sports centre"),
            mk("3", "Home"),
            mk("4", "University library third floor"),
            mk("5", "Home"),
            mk("6", "Downtown coffee shop near the station"),
        ];
        let cfg = ConsensusConfig::default();
        let e = HashingEmbedder::default();
        let a = base_cluster(&inst, Attribute::Where, &e, &cfg).unwrap();
        let home = a.labels["1"];
        assert_ne!(home, NOISE);
        assert_eq!((a.labels["3"], a.labels["5"]), (home, home));
        let who = base_cluster(&inst, Attribute::Who, &e, &cfg).unwrap();
        assert!(who.labels.values().all(|&l| l == 0));
        let two = base_cluster(&inst[..2], Attribute::Where, &e, &cfg).unwrap();
        assert_eq!(two, base_cluster(&inst[..2], Attribute::Where, &e, &cfg).unwrap());
    }
}
