//! Density clustering checked against labels produced by scikit-learn's
//! HDBSCAN on the same points (min_cluster_size = min_samples = 2, EOM).

use ptm_core::consensus::{hdbscan, NOISE};
use serde_json::Value;

fn canonical(labels: &[i64]) -> Vec<i64> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&l| {
            if l < 0 {
                -1
            } else {
                let next = map.len() as i64;
                *map.entry(l).or_insert(next)
            }
        })
        .collect()
}

#[test]
fn matches_reference_labels() {
    let doc: Value = serde_json::from_str(include_str!("fixtures/hdbscan_oracle.json")).unwrap();
    let cases = doc["cases"].as_array().unwrap();
    let mut mismatched = Vec::new();
    for (k, case) in cases.iter().enumerate() {
        let points: Vec<Vec<f64>> = serde_json::from_value(case["points"].clone()).unwrap();
        let expected: Vec<i64> = serde_json::from_value(case["labels"].clone()).unwrap();
        let got: Vec<i64> = hdbscan(&points, 2, 2).into_iter().map(i64::from).collect();
        assert!(got.iter().all(|&l| l >= i64::from(NOISE)));
        if canonical(&got) != canonical(&expected) {
            mismatched.push((k, got, expected));
        }
    }
    assert!(mismatched.is_empty(), "{} of {} cases differ: {:?}", mismatched.len(), cases.len(), mismatched.first());
}
