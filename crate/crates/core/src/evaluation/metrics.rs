//! Precision, recall, F1 and vocabulary overlap.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn new(tp: u64, fp: u64, fn_: u64) -> Self {
        Counts { tp, fp, fn_ }
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }
}

impl std::ops::Add for Counts {
    type Output = Counts;
    fn add(self, o: Counts) -> Counts {
        Counts { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_ }
    }
}

impl std::iter::Sum for Counts {
    fn sum<I: Iterator<Item = Counts>>(iter: I) -> Counts {
        iter.fold(Counts::default(), |a, b| a + b)
    }
}

/// `num / den`, with 0/0 taken as 0.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Sample mean and sample standard deviation (`n - 1`); `sd` is `None`
/// below two values.
pub fn mean_sd(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (Some(mean), None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some(var.sqrt()))
}

/// Micro-aggregated scores over a group. `sd` is over per-user F1; a single
/// user falls back to the spread of per-item F1.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub sd: Option<f64>,
    pub sd_over: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub n: usize,
    pub users: usize,
    pub macro_f1: Option<f64>,
    pub per_user_f1: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub user_id: String,
    pub item_id: String,
    pub layer: Option<String>,
    pub counts: Counts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    Overall,
    Layer,
    User,
}

pub fn summarize(items: &[&ScoredItem]) -> ScoreSummary {
    if items.is_empty() {
        return ScoreSummary { sd_over: "none".into(), ..ScoreSummary::default() };
    }
    let total: Counts = items.iter().map(|i| i.counts).sum();
    let mut by_user: BTreeMap<String, Counts> = BTreeMap::new();
    for i in items {
        let c = by_user.entry(i.user_id.clone()).or_default();
        *c = *c + i.counts;
    }
    let per_user_f1: BTreeMap<String, f64> = by_user.iter().map(|(u, c)| (u.clone(), c.f1())).collect();
    let user_f1: Vec<f64> = per_user_f1.values().copied().collect();
    let (macro_f1, user_sd) = mean_sd(&user_f1);
    let (sd, sd_over) = if by_user.len() >= 2 {
        (user_sd, "users")
    } else {
        let item_f1: Vec<f64> = items.iter().map(|i| i.counts.f1()).collect();
        (mean_sd(&item_f1).1, "items")
    };
    ScoreSummary {
        precision: Some(total.precision()),
        recall: Some(total.recall()),
        f1: Some(total.f1()),
        sd,
        sd_over: sd_over.into(),
        tp: total.tp,
        fp: total.fp,
        fn_: total.fn_,
        n: items.len(),
        users: by_user.len(),
        macro_f1,
        per_user_f1,
    }
}

/// Groups then micro-aggregates. Items without a layer land under
/// `"unassigned"` when grouping by layer.
pub fn aggregate_scores(items: &[ScoredItem], group_by: GroupBy) -> BTreeMap<String, ScoreSummary> {
    let mut groups: BTreeMap<String, Vec<&ScoredItem>> = BTreeMap::new();
    for i in items {
        let key = match group_by {
            GroupBy::Overall => "overall".to_string(),
            GroupBy::Layer => i.layer.clone().unwrap_or_else(|| "unassigned".into()),
            GroupBy::User => i.user_id.clone(),
        };
        groups.entry(key).or_default().push(i);
    }
    if groups.is_empty() && group_by == GroupBy::Overall {
        groups.insert("overall".into(), Vec::new());
    }
    groups.into_iter().map(|(k, v)| (k, summarize(&v))).collect()
}

/// |A ∩ B| / |A ∪ B|; 0 when both are empty.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        0.0
    } else {
        a.intersection(b).count() as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_arithmetic() {
        let c = Counts::new(3, 1, 1);
        assert_eq!((c.precision(), c.recall(), c.f1()), (0.75, 0.75, 0.75));
        let perfect = Counts::new(4, 0, 0);
        assert_eq!((perfect.precision(), perfect.recall(), perfect.f1()), (1.0, 1.0, 1.0));
        let refusal = Counts::new(0, 0, 5);
        assert_eq!((refusal.precision(), refusal.recall(), refusal.f1()), (0.0, 0.0, 0.0));
    }

    #[test]
    fn jaccard_examples() {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<BTreeSet<_>>();
        assert_eq!(jaccard(&s(&["a", "b", "c"]), &s(&["b", "c", "d"])), 0.5);
        assert_eq!(jaccard(&s(&["a"]), &s(&["a"])), 1.0);
        assert_eq!(jaccard(&s(&["a"]), &s(&["b"])), 0.0);
        assert_eq!(jaccard(&s(&[]), &s(&[])), 0.0);
    }

    #[test]
    fn micro_sums_and_user_sd() {
        let it = |u: &str, l: &str, c| ScoredItem { user_id: u.into(), item_id: "q".into(), layer: Some(l.into()), counts: c };
        let items =
            vec![it("a", "L1", Counts::new(1, 0, 0)), it("a", "L2", Counts::new(0, 1, 1)), it("b", "L1", Counts::new(2, 2, 0))];
        let all = &aggregate_scores(&items, GroupBy::Overall)["overall"];
        assert_eq!((all.tp, all.fp, all.fn_, all.n, all.users), (3, 3, 1, 3, 2));
        assert_eq!(all.sd_over, "users");
        let fa = Counts::new(1, 1, 1).f1();
        let fb = Counts::new(2, 2, 0).f1();
        let mean = (fa + fb) / 2.0;
        let sd = (((fa - mean).powi(2) + (fb - mean).powi(2)) / 1.0).sqrt();
        assert!((all.sd.unwrap() - sd).abs() < 1e-12);
        let by_layer = aggregate_scores(&items, GroupBy::Layer);
        assert_eq!(by_layer["L1"].tp, 3);
        let empty = &aggregate_scores(&[], GroupBy::Overall)["overall"];
        assert_eq!((empty.n, empty.f1), (0, None));
    }
}
