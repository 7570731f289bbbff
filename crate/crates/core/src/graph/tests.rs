use super::*;
use chrono::TimeZone;
use proptest::prelude::*;

fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap()
}

fn sample() -> LayeredGraph {
    serde_json::from_str(include_str!("../../fixtures/sample_graph.json")).unwrap()
}

fn instance(id: &str, date: &str) -> BehavioralInstance {
    BehavioralInstance {
        id: id.into(),
        what: format!("User did {id}"),
        when: "Monday, 10:00-11:00".into(),
        where_: "Home".into(),
        who: String::new(),
        why: "Because".into(),
        how: "Somehow".into(),
        date: date.parse().unwrap(),
        time_window: None,
        journal_entry_id: "e1".into(),
    }
}

fn synth(id: &str, layer: LayerTag, sources: &[&str], dim: Option<&str>) -> GraphNode {
    GraphNode::Synthesized(PtmNode {
        id: id.into(),
        layer,
        title: format!("Title {id}"),
        content: format!("Content {id}"),
        dimension_id: dim.map(String::from),
        source_ids: sources.iter().map(|s| s.to_string()).collect(),
        revisions: Vec::new(),
    })
}

fn dim(id: &str, layer: LayerTag) -> AnalyticalDimension {
    AnalyticalDimension { id: id.into(), layer, title: format!("Lens {id}"), description: "d".into() }
}

/// Graph with three L1 nodes and one L2 dimension at version 4.
fn base() -> LayeredGraph {
    let g = LayeredGraph::new("u1", t0());
    let g = g
        .put_nodes(
            vec![instance("a", "2025-01-01").into(), instance("b", "2025-01-02").into(), instance("c", "2025-01-03").into()],
            t0(),
        )
        .unwrap();
    let g = g
        .put_nodes(
            vec![
                synth("L1_Node_1", LayerTag::L1, &["a", "b"], None),
                synth("L1_Node_2", LayerTag::L1, &["b"], None),
                synth("L1_Node_3", LayerTag::L1, &["c"], None),
            ],
            t0(),
        )
        .unwrap();
    let g = g.put_dimensions(vec![dim("L2_Dim_1", LayerTag::L2)], t0()).unwrap();
    g.with_phase(PhaseState::L1Built, t0())
}

#[test]
fn layer_order_and_parse() {
    assert!(LayerTag::L0 < LayerTag::L1 && LayerTag::L3 < LayerTag::L4);
    assert_eq!("L3".parse::<LayerTag>().unwrap(), LayerTag::L3);
    assert_eq!("2".parse::<LayerTag>().unwrap(), LayerTag::L2);
    assert!("L9".parse::<LayerTag>().is_err());
    assert_eq!(LayerTag::L0.below(), None);
    assert_eq!(LayerTag::L4.above(), None);
}

#[test]
fn put_nodes_bumps_version_and_keeps_old_snapshot() {
    let g = base();
    assert_eq!(g.version, 4);
    let next = g
        .put_nodes(vec![synth("L2_Node_1", LayerTag::L2, &["L1_Node_1", "L1_Node_2", "L1_Node_3"], Some("L2_Dim_1"))], t0())
        .unwrap();
    assert_eq!(next.version, 5);
    assert!(next.contains("L2_Node_1"));
    assert!(!g.contains("L2_Node_1"));
}

#[test]
fn dangling_source_is_rejected() {
    let err = base()
        .put_nodes(vec![synth("L2_Node_1", LayerTag::L2, &["L1_Node_1", "L1_Node_9"], Some("L2_Dim_1"))], t0())
        .unwrap_err();
    assert_eq!(err, GraphError::DanglingSource { node: "L2_Node_1".into(), missing: vec!["L1_Node_9".into()] });
    assert!(err.to_string().contains("dangling source"));
}

#[test]
fn non_adjacent_source_is_rejected() {
    let g = base().put_dimensions(vec![dim("L3_Dim_1", LayerTag::L3)], t0()).unwrap();
    let err = g.put_nodes(vec![synth("L3_Node_1", LayerTag::L3, &["a"], Some("L3_Dim_1"))], t0()).unwrap_err();
    assert!(err.to_string().contains("non-adjacent layers"), "{err}");
}

#[test]
fn duplicate_id_is_rejected() {
    let err = base().put_nodes(vec![instance("a", "2025-01-05").into()], t0()).unwrap_err();
    assert_eq!(err, GraphError::Duplicate("a".into()));
    let err = base()
        .put_nodes(vec![instance("z", "2025-01-05").into(), instance("z", "2025-01-05").into()], t0())
        .unwrap_err();
    assert_eq!(err, GraphError::Duplicate("z".into()));
}

#[test]
fn dimension_rules() {
    let g = base();
    assert!(g.put_nodes(vec![synth("L1_Node_4", LayerTag::L1, &["a"], Some("L2_Dim_1"))], t0()).is_err());
    assert!(g.put_nodes(vec![synth("L2_Node_1", LayerTag::L2, &["L1_Node_1"], None)], t0()).is_err());
    assert!(g.put_nodes(vec![synth("L2_Node_1", LayerTag::L2, &["L1_Node_1"], Some("nope"))], t0()).is_err());
    assert!(g.put_nodes(vec![synth("L1_Node_5", LayerTag::L1, &[], None)], t0()).is_err());
}

#[test]
fn in_degree_hand_arithmetic() {
    let g = LayeredGraph::new("u", t0())
        .put_nodes((0..9).map(|i| instance(&format!("i{i}"), "2025-01-01").into()).collect(), t0())
        .unwrap()
        .put_nodes((0..9).map(|i| synth(&format!("p{i}"), LayerTag::L1, &[&format!("i{i}")], None)).collect(), t0())
        .unwrap()
        .put_dimensions(vec![dim("d", LayerTag::L2)], t0())
        .unwrap()
        .put_nodes(
            vec![
                synth("q1", LayerTag::L2, &["p0", "p1"], Some("d")),
                synth("q2", LayerTag::L2, &["p2", "p3", "p4"], Some("d")),
                synth("q3", LayerTag::L2, &["p5", "p6", "p7", "p8"], Some("d")),
            ],
            t0(),
        )
        .unwrap();
    let s = g.in_degree_stats(LayerTag::L1, LayerTag::L2).unwrap();
    assert_eq!(s.total_links, 9);
    assert_eq!(s.mean, 3.0);
    assert!((s.sd - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert_eq!((s.min, s.max), (2, 4));

    let single = base()
        .put_nodes(vec![synth("L2_Node_1", LayerTag::L2, &["L1_Node_1"], Some("L2_Dim_1"))], t0())
        .unwrap();
    let s = single.in_degree_stats(LayerTag::L1, LayerTag::L2).unwrap();
    assert_eq!((s.mean, s.sd), (1.0, 0.0));

    let empty = base().in_degree_stats(LayerTag::L3, LayerTag::L4).unwrap();
    assert_eq!(empty, InDegreeStats { mean: 0.0, sd: 0.0, total_links: 0, min: 0, max: 0 });
    assert!(base().in_degree_stats(LayerTag::L1, LayerTag::L3).is_err());
}

#[test]
fn sample_graph_linkage_and_trace() {
    let g = sample();
    assert!(g.check_invariants().is_empty(), "{:?}", g.check_invariants());
    let s = g.in_degree_stats(LayerTag::L3, LayerTag::L4).unwrap();
    assert_eq!(s.mean, 2.0);
    assert_eq!(s.total_links, 2);

    let ids: Vec<String> = g.trace_to_evidence("2.3").unwrap().into_iter().map(|i| i.id).collect();
    assert_eq!(ids, vec!["0.1", "0.2", "0.3"]);
    let ids: Vec<String> = g.trace_to_evidence("0.2").unwrap().into_iter().map(|i| i.id).collect();
    assert_eq!(ids, vec!["0.2"]);
    assert!(matches!(g.trace_to_evidence("9.9"), Err(GraphError::NotFound(_))));
}

#[test]
fn trace_deduplicates_shared_instances() {
    let g = base()
        .put_nodes(vec![synth("L2_Node_1", LayerTag::L2, &["L1_Node_1", "L1_Node_2"], Some("L2_Dim_1"))], t0())
        .unwrap();
    let ids: Vec<String> = g.trace_to_evidence("L2_Node_1").unwrap().into_iter().map(|i| i.id).collect();
    assert_eq!(ids, vec!["a", "b"]);
}

#[test]
fn revise_changes_only_content() {
    let g = base();
    let before = g.get("L1_Node_1").unwrap().as_synthesized().unwrap().clone();
    let g2 = g.revise_node("L1_Node_1", "new text".into(), "fb-1", t0()).unwrap();
    let after = g2.get("L1_Node_1").unwrap().as_synthesized().unwrap();
    assert_eq!(after.content, "new text");
    assert_eq!(after.revisions.len(), 1);
    assert_eq!(after.revisions[0].prior_content, before.content);
    assert_eq!((&after.id, after.layer, &after.source_ids, &after.dimension_id), (&before.id, before.layer, &before.source_ids, &before.dimension_id));
    assert!(g2.check_invariants().is_empty());
    assert!(g.revise_node("a", "x".into(), "fb", t0()).is_err());
}

#[test]
fn export_field_names() {
    let v = serde_json::to_value(sample()).unwrap();
    let nodes = v["nodes"].as_array().unwrap();
    let l1 = nodes.iter().find(|n| n["id"] == "1.5").unwrap();
    assert!(l1.get("source_instances").is_some() && l1.get("source_nodes").is_none());
    let l2 = nodes.iter().find(|n| n["id"] == "2.3").unwrap();
    assert!(l2.get("source_nodes").is_some());
    assert_eq!(l2["title"], "Task completion as non-negotiable anchor");
    for key in ["user_id", "version", "nodes", "generated_at"] {
        assert!(v.get(key).is_some(), "{key}");
    }
}

#[test]
fn store_round_trip_and_isolation() {
    let dir = tempfile::tempdir().unwrap();
    let store = GraphStore::new(DataDir::new(dir.path()));
    let mut g = LayeredGraph::new("u1", t0());
    let built = base();
    // replay the build as consecutive commits
    for v in 1..=built.version {
        g.version = v;
        let snapshot = if v == built.version { built.clone() } else { g.clone() };
        store.commit(&snapshot).unwrap();
    }
    assert!(store.commit(&built).is_err(), "same version twice");
    let loaded = store.load_latest("u1").unwrap();
    assert_eq!(loaded, built);
    let v4 = store.load("u1", 4).unwrap();
    let next = loaded.revise_node("L1_Node_2", "changed".into(), "fb", t0()).unwrap();
    store.commit(&next).unwrap();
    assert_eq!(store.load("u1", 4).unwrap(), v4);
    assert_eq!(store.versions("u1"), vec![1, 2, 3, 4, 5]);
    assert!(store.load_latest("../etc").is_err());
}

proptest! {
    #[test]
    fn serialization_round_trips(n_inst in 1usize..8, fan in prop::collection::vec(1usize..4, 1..6)) {
        let mut nodes: Vec<GraphNode> = (0..n_inst).map(|i| instance(&format!("e-{i}"), "2025-02-01").into()).collect();
        for (k, f) in fan.iter().enumerate() {
            let srcs: Vec<String> = (0..*f).map(|j| format!("e-{}", (k + j) % n_inst)).collect();
            let refs: Vec<&str> = srcs.iter().map(String::as_str).collect();
            nodes.push(synth(&format!("L1_Node_{k}"), LayerTag::L1, &refs, None));
        }
        let g = LayeredGraph::new("p", t0()).put_nodes(nodes, t0()).unwrap();
        let text = serde_json::to_string(&g).unwrap();
        let back: LayeredGraph = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(&back, &g);
        prop_assert!(back.check_invariants().is_empty());
    }
}
