use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use proptest::prelude::*;
use ptm_core::consensus::{build_consensus, form_clusters, AttributeAssignment, ConsensusConfig};
use ptm_core::evaluation::coherence::{c_v, sliding_windows};
use ptm_core::evaluation::metrics::{aggregate_scores, Counts, GroupBy, ScoredItem};
use ptm_core::evaluation::stats::{paired_t, pearson_r};
use ptm_core::graph::Attribute;
use ptm_core::hitl::{allocate, count_t_units};

fn labels_and_dates() -> impl Strategy<Value = (Vec<Vec<i32>>, Vec<u8>)> {
    (2usize..10).prop_flat_map(|n| (prop::collection::vec(prop::collection::vec(-1i32..3, n), 6), prop::collection::vec(0u8..3, n)))
}

fn case(labels: &[Vec<i32>], days: &[u8]) -> (Vec<AttributeAssignment>, BTreeMap<String, NaiveDate>) {
    let ids: Vec<String> = (0..days.len()).map(|i| format!("x{i:02}")).collect();
    let base = NaiveDate::from_ymd_opt(2025, 9, 1).unwrap();
    let dates = ids.iter().cloned().zip(days.iter().map(|d| base + chrono::Days::new(*d as u64))).collect();
    let assignments = Attribute::ALL
        .iter()
        .zip(labels)
        .map(|(&a, col)| AttributeAssignment { attribute: a, labels: ids.iter().cloned().zip(col.iter().copied()).collect() })
        .collect();
    (assignments, dates)
}

proptest! {
    #[test]
    fn consensus_weights_scale_agreement((labels, days) in labels_and_dates(), k in 1i32..4) {
        let (a, d) = case(&labels, &days);
        let base = build_consensus(&a, &d, &ConsensusConfig::default()).unwrap();
        let mut cfg = ConsensusConfig::default();
        for w in cfg.weights.values_mut() {
            *w *= k;
        }
        let scaled = build_consensus(&a, &d, &cfg).unwrap();
        for i in 0..base.len() {
            for j in 0..base.len() {
                prop_assert_eq!(scaled.r[i][j], k * base.r[i][j]);
                prop_assert_eq!(scaled.p[i][j], base.p[i][j]);
            }
        }
    }

    #[test]
    fn all_noise_never_clusters((labels, days) in labels_and_dates()) {
        let noise: Vec<Vec<i32>> = labels.iter().map(|c| vec![-1; c.len()]).collect();
        let (a, d) = case(&noise, &days);
        let m = build_consensus(&a, &d, &ConsensusConfig::default()).unwrap();
        prop_assert!(m.r.iter().flatten().all(|&x| x == 0));
        let set = form_clusters(&m, &d, 1);
        prop_assert!(set.clusters.is_empty());
        prop_assert_eq!(set.unclustered.len(), days.len());
    }

    #[test]
    fn clusters_are_ordered_and_disjoint((labels, days) in labels_and_dates(), tau in 1i32..8) {
        let (a, d) = case(&labels, &days);
        let m = build_consensus(&a, &d, &ConsensusConfig::default()).unwrap();
        let set = form_clusters(&m, &d, tau);
        let mut seen = BTreeSet::new();
        for c in set.clusters.iter().chain(std::iter::once(&set.unclustered)) {
            for id in c {
                prop_assert!(seen.insert(id.clone()), "{} appears twice", id);
            }
        }
        let firsts: Vec<NaiveDate> = set.clusters.iter().map(|c| c.iter().map(|id| d[id]).min().unwrap()).collect();
        prop_assert!(firsts.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn allocation_is_proportional(sizes in prop::collection::vec(0usize..80, 4), n in 0usize..40) {
        let out = allocate(&sizes, n);
        let total: usize = sizes.iter().sum();
        prop_assert_eq!(out.iter().sum::<usize>(), n.min(total));
        if n < total {
            let mut bumped_after_unfilled = false;
            let mut unfilled_unbumped = false;
            for (i, (&s, &o)) in sizes.iter().zip(&out).enumerate() {
                let floor = s * n / total;
                prop_assert!(o == floor || o == floor + 1, "layer {} got {} from floor {}", i, o, floor);
                prop_assert!(o <= s);
                if o == floor + 1 && unfilled_unbumped {
                    bumped_after_unfilled = true;
                }
                if o == floor && o < s {
                    unfilled_unbumped = true;
                }
            }
            prop_assert!(!bumped_after_unfilled, "remainder skipped a lower layer: {:?} -> {:?}", sizes, out);
        }
    }

    #[test]
    fn t_units_add_over_sentences(a in "[A-Z][a-z]{2,8}( [a-z]{2,8}){1,6}", b in "[A-Z][a-z]{2,8}( [a-z]{2,8}){1,6}") {
        let one = count_t_units(&format!("{a}."));
        prop_assert!(one >= 1);
        prop_assert_eq!(count_t_units(&format!("{a}. {b}.")), one + count_t_units(&format!("{b}.")));
        prop_assert_eq!(count_t_units(&format!("{a}; {b}.")), one + count_t_units(&format!("{b}.")));
    }

    #[test]
    fn overall_counts_sum_items(raw in prop::collection::vec((0u64..20, 0u64..20, 0u64..20, 1usize..5), 1..30)) {
        let items: Vec<ScoredItem> = raw.iter().enumerate().map(|(i, &(tp, fp, fn_, l))| ScoredItem {
            user_id: format!("u{}", i % 3),
            item_id: format!("q{i}"),
            layer: Some(format!("L{l}")),
            counts: Counts::new(tp, fp, fn_),
        }).collect();
        let overall = &aggregate_scores(&items, GroupBy::Overall)["overall"];
        let sum: Counts = items.iter().map(|i| i.counts).sum();
        prop_assert_eq!((overall.tp, overall.fp, overall.fn_), (sum.tp, sum.fp, sum.fn_));
        let by_layer = aggregate_scores(&items, GroupBy::Layer);
        let tp: u64 = by_layer.iter().filter(|(k, _)| k.as_str() != "overall").map(|(_, s)| s.tp).sum();
        prop_assert_eq!(tp, sum.tp);
    }

    #[test]
    fn paired_t_is_antisymmetric(pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 3..30)) {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        if let (Ok(a), Ok(b)) = (paired_t(&x, &y), paired_t(&y, &x)) {
            prop_assert!((a.t.0 + b.t.0).abs() < 1e-9 || (a.t.0.is_infinite() && a.t.0 == -b.t.0));
            prop_assert!((a.p - b.p).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a.p));
        }
    }

    #[test]
    fn pearson_is_symmetric_and_affine_invariant(
        pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 3..30),
        scale in 0.5f64..4.0,
        shift in -10.0f64..10.0,
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        if let (Ok(a), Ok(b)) = (pearson_r(&x, &y), pearson_r(&y, &x)) {
            prop_assert!((a.r - b.r).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&a.r));
            let xs: Vec<f64> = x.iter().map(|v| v * scale + shift).collect();
            let c = pearson_r(&xs, &y).unwrap();
            prop_assert!((a.r - c.r).abs() < 1e-9);
        }
    }

    #[test]
    fn coherence_is_bounded(docs in prop::collection::vec("[a-e]{1,3}( [a-e]{1,3}){2,12}", 2..8)) {
        let windows = sliding_windows(&docs, 5);
        let terms: Vec<String> = docs.iter().flat_map(|d| d.split(' ').map(String::from)).collect::<BTreeSet<_>>().into_iter().take(6).collect();
        if let Some(v) = c_v(&terms, &windows) {
            prop_assert!((0.0..=1.0).contains(&v), "c_v {}", v);
        }
    }
}
