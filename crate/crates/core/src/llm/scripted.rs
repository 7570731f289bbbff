//! Deterministic offline responder for all ten templates.
//!
//! Replies depend only on the request variables. E0 understands the
//! synthetic corpus sentence form
//! `"<Weekday> HH:MM to HH:MM, I <what> at <where> (with <who>|alone) because <why>, <how>."`;
//! anything else becomes a bare WHAT. The other templates use token overlap
//! and fixed phrase banks. Used for offline demos and to record replay
//! fixtures without network access.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use regex::Regex;
use serde_json::{json, Value};

use super::{LlmClient, LlmError, LlmRequest};
use crate::evaluation::qa::REFUSAL;
use crate::prompts::{sha256_hex, TemplateId};
use crate::text::content_tokens;

#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedClient;

impl LlmClient for ScriptedClient {
    fn send(&self, r: &LlmRequest) -> Result<String, LlmError> {
        let var = |k: &str| r.variables.get(k).map(String::as_str).unwrap_or("");
        let reply = match r.template_id {
            TemplateId::E0 => extract(var("text")),
            TemplateId::IO => patterns(var("instances_text")),
            TemplateId::GD => dimensions(var("num_dimensions").parse().unwrap_or(3)),
            TemplateId::CD => clusters(var("dimension_title"), var("num_clusters").parse().unwrap_or(2), var("numbered_nodes_text")),
            TemplateId::ID => insights(var("dimension_title"), var("cluster_label"), var("source_nodes_json")),
            TemplateId::NR => json!({
                "updated_content": format!("{} The user also explains: {}", var("existing_node_content").trim(), var("new_instances_text").trim())
            }),
            TemplateId::QA => questions(var("journal_entries")),
            TemplateId::CA => {
                let ctx = r.variables.get("context").or_else(|| r.variables.get("INSERT_RETRIEVED_CONTEXT_HERE"));
                let q = r.variables.get("query").or_else(|| r.variables.get("INSERT_USER_QUESTION_HERE"));
                return Ok(answer(ctx.map(String::as_str).unwrap_or(""), q.map(String::as_str).unwrap_or("")));
            }
            TemplateId::PE => atomic(var("pred"), var("gt")),
            TemplateId::LS => select(var("query"), var("label_data"), var("num_target").parse().unwrap_or(1)),
        };
        Ok(serde_json::to_string_pretty(&reply).expect("json values serialize"))
    }
}

fn sentence_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"^(?P<when>[A-Z][a-z]+day \d{2}:\d{2} to \d{2}:\d{2}), I (?P<what>.+?) at (?P<where>.+?) (?:with (?P<who>.+?)|alone) because (?P<why>.+?), (?P<how>.+)$",
        )
        .expect("valid regex")
    })
}

fn sentences(text: &str) -> Vec<&str> {
    text.split_inclusive(['.', '!', '?']).map(|s| s.trim().trim_end_matches(['.', '!', '?'])).filter(|s| !s.is_empty()).collect()
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}

fn extract(text: &str) -> Value {
    let items: Vec<Value> = sentences(text)
        .into_iter()
        .map(|s| match sentence_re().captures(s) {
            Some(c) => {
                let g = |k: &str| c.name(k).map(|m| m.as_str().trim()).unwrap_or("");
                json!({
                    "WHAT": format!("User {}", g("what")),
                    "WHEN": g("when"),
                    "WHERE": g("where"),
                    "WHO": g("who"),
                    "WHY": g("why"),
                    "HOW": g("how"),
                })
            }
            None => json!({"WHAT": format!("User: {s}"), "WHEN": "", "WHERE": "", "WHO": "", "WHY": "", "HOW": ""}),
        })
        .collect();
    json!({ "informations": items })
}

/// Fields of one `instance_block` line.
fn parse_block(line: &str) -> Option<(String, BTreeMap<String, String>)> {
    let rest = line.strip_prefix('[')?;
    let (id, rest) = rest.split_once(']')?;
    let fields = rest
        .split(" | ")
        .filter_map(|p| p.trim().split_once(": "))
        .map(|(k, v)| (k.trim().to_lowercase(), v.trim().to_string()))
        .collect();
    Some((id.to_string(), fields))
}

fn patterns(instances_text: &str) -> Value {
    let blocks: Vec<(String, BTreeMap<String, String>)> = instances_text.lines().filter_map(parse_block).collect();
    let mut groups: Vec<(String, Vec<&(String, BTreeMap<String, String>)>)> = Vec::new();
    for b in &blocks {
        let what = b.1.get("what").cloned().unwrap_or_default();
        match groups.iter_mut().find(|g| g.0 == what) {
            Some(g) => g.1.push(b),
            None => groups.push((what, vec![b])),
        }
    }
    groups.sort_by(|a, b| b.1.len().cmp(&a.1.len()));
    let drafts: Vec<Value> = groups
        .into_iter()
        .take(3)
        .map(|(what, members)| {
            let f = |k: &str| members[0].1.get(k).cloned().unwrap_or_default();
            let act = what.strip_prefix("User: ").or_else(|| what.strip_prefix("User ")).unwrap_or(&what);
            let mut days: Vec<String> = Vec::new();
            for m in &members {
                if let Some(d) = m.1.get("when").and_then(|w| w.split_whitespace().next()).filter(|d| d.ends_with("day")) {
                    if !days.iter().any(|x| x == d) {
                        days.push(d.to_string());
                    }
                }
            }
            let slot = f("when").split_once(' ').map(|(_, t)| t.to_string()).unwrap_or_default();
            let who = if f("who").is_empty() { "alone".to_string() } else { format!("with {}", f("who")) };
            let when = if days.is_empty() { String::new() } else { format!(" on {} from {slot}", days.join(", ")) };
            let title: Vec<&str> = act.split_whitespace().take(6).collect();
            let sources: Vec<String> = members.iter().map(|m| m.0.clone()).collect();
            if f("where").is_empty() {
                // a free-form remark, not a routine
                return json!({
                    "title": capitalize(&title.join(" ")),
                    "content": format!("The user noted: {act}."),
                    "source_instances": sources,
                });
            }
            json!({
                "title": format!("{} routine", capitalize(&title.join(" "))),
                "content": format!(
                    "The user regularly {act} at {} {who}{when}. The user does this because {}, {}.",
                    f("where"), f("why"), f("how")
                ),
                "source_instances": sources,
            })
        })
        .collect();
    Value::Array(drafts)
}

const LENSES: [[(&str, &str); 4]; 3] = [
    [
        ("Habit Analysis", "How recurring activities form stable daily habits."),
        ("Time Management", "How the user arranges study, rest and chores across the week."),
        ("Social Context", "Who the user spends time with and how company shapes activities."),
        ("Learning Strategies", "Which methods the user applies to study and practice."),
    ],
    [
        ("Goal Prioritization", "How the user ranks competing goals and duties."),
        ("Stress Regulation", "How the user keeps pressure and worry under control."),
        ("Motivation Sources", "What drives the user to keep going."),
        ("Resource Planning", "How the user budgets money, energy and attention."),
    ],
    [
        ("Core Value Identification", "Which values sit underneath the user's choices."),
        ("Self Concept", "How the user sees themselves as a person."),
        ("Growth Orientation", "How the user relates to change and improvement."),
        ("Life Meaning", "What gives the user's life a sense of purpose."),
    ],
];

fn dimensions(k: usize) -> Value {
    let mut out = serde_json::Map::new();
    for (li, bank) in LENSES.iter().enumerate() {
        let dims: Vec<Value> = (0..k)
            .map(|i| match bank.get(i) {
                Some((t, d)) => json!({"title": t, "description": d}),
                None => json!({"title": format!("Layer {} Lens {}", li + 2, i + 1), "description": "An additional analytical lens."}),
            })
            .collect();
        out.insert(format!("L{}", li + 2), Value::Array(dims));
    }
    Value::Object(out)
}

/// 2, 3 or 4 for a known lens title; 2 otherwise.
fn lens_layer(title: &str) -> usize {
    LENSES.iter().position(|bank| bank.iter().any(|(t, _)| *t == title)).map(|i| i + 2).unwrap_or(2)
}

fn clusters(dimension: &str, requested: usize, numbered: &str) -> Value {
    let titles: Vec<(usize, &str)> = numbered
        .lines()
        .filter_map(|l| l.split_once(". "))
        .filter_map(|(i, t)| i.trim().parse().ok().map(|i| (i, t.trim())))
        .collect();
    let n = titles.len();
    if n < 2 {
        return json!({"clusters": []});
    }
    let k = requested.min(n / 4).max(1);
    let mut order = titles.clone();
    order.sort_by_key(|(i, t)| (sha256_hex(format!("{dimension}\n{t}").as_bytes()), *i));
    let out: Vec<Value> = (0..k)
        .map(|c| {
            let members: Vec<(usize, &str)> = order.iter().enumerate().filter(|(pos, _)| pos * k / n == c).map(|(_, m)| *m).collect();
            let mut freq: BTreeMap<String, usize> = BTreeMap::new();
            for (_, t) in &members {
                for w in content_tokens(t).into_iter().filter(|w| w != "routine") {
                    *freq.entry(w).or_default() += 1;
                }
            }
            let word = freq.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(w, _)| w.clone()).unwrap_or_default();
            let mut idx: Vec<usize> = members.iter().map(|m| m.0).collect();
            idx.sort_unstable();
            json!({"cluster_label": format!("{dimension}: {word} and related patterns"), "node_indices": idx})
        })
        .collect();
    json!({ "clusters": out })
}

const INSIGHTS: [[(&str, &str); 3]; 3] = [
    [
        ("Structured daily routine", "Under {dim}, the user keeps regular routines for study, exercise and daily chores, and these patterns around {label} repeat across the week in a steady and predictable way."),
        ("Consistent weekly habits", "Under {dim}, the user returns to the same activities around {label} each week, keeping study, exercise and chores in a steady and predictable routine."),
        ("Repeated practical choices", "Under {dim}, the user repeats practical choices around {label}, keeping study, rest and chores in regular and predictable slots."),
    ],
    [
        ("Planned steps reduce pressure", "Through {dim}, the user manages pressure by turning goals into small planned steps, protecting time for rest, and keeping worry under control."),
        ("Balance between duty and rest", "Through {dim}, the user balances duties with rest, breaking goals into small planned steps so that pressure and worry stay manageable."),
        ("Small steps toward goals", "Through {dim}, the user moves toward goals in small planned steps, keeping pressure low and leaving time for rest."),
    ],
    [
        ("Steady growth as core value", "The user values steady growth, self discipline and inner balance, and treats a calm, ordered life as the foundation of meaning."),
        ("Inner balance through discipline", "The user values inner balance and steady growth, and sees self discipline as the foundation of a calm and meaningful life."),
        ("Meaning through ordered living", "The user finds meaning in steady growth and inner balance, with self discipline giving a calm and ordered life its foundation."),
    ],
];

fn insights(dimension: &str, label: &str, nodes_json: &str) -> Value {
    let ids: Vec<String> = serde_json::from_str::<Value>(nodes_json)
        .ok()
        .and_then(|v| v.as_array().cloned())
        .unwrap_or_default()
        .iter()
        .filter_map(|n| n.get("node_id").and_then(Value::as_str).map(String::from))
        .collect();
    let layer = lens_layer(dimension);
    let bank = &INSIGHTS[layer - 2];
    let pick = usize::from_str_radix(&sha256_hex(label.as_bytes())[..4], 16).unwrap_or(0) % bank.len();
    let (title, content) = bank[pick];
    let topic = label.split_once(": ").map(|(_, t)| t).unwrap_or(label).trim_end_matches(" and related patterns");
    json!([{
        "title": title,
        "content": content.replace("{dim}", &dimension.to_lowercase()).replace("{label}", topic),
        "source_nodes": ids,
    }])
}

fn questions(entries: &str) -> Value {
    let dated: Vec<&str> = entries.lines().filter(|l| l.starts_with('[')).collect();
    if dated.is_empty() {
        let (title, content) = entries.split_once(": ").unwrap_or((entries, entries));
        let t = title.trim().trim_end_matches(" routine").to_lowercase();
        return json!([{
            "query": format!("What exactly do you do when it comes to {t}?"),
            "ground_truth": content.trim(),
        }]);
    }
    let mut out = Vec::new();
    for line in dated {
        let Some((_, text)) = line.split_once("] ") else { continue };
        for (i, s) in sentences(text).into_iter().enumerate() {
            let Some(c) = sentence_re().captures(s) else { continue };
            let g = |k: &str| c.name(k).map(|m| m.as_str().trim()).unwrap_or("");
            let who = if g("who").is_empty() { "alone".to_string() } else { format!("with {}", g("who")) };
            out.push(if i % 2 == 0 {
                json!({
                    "query": format!("What does the user do on {}?", g("when").replacen(' ', " from ", 1)),
                    "ground_truth": format!("The user {} at {} {who}.", g("what"), g("where")),
                })
            } else {
                json!({
                    "query": format!("Why does the user {}?", g("what")),
                    "ground_truth": format!("The user {} because {}.", g("what"), g("why")),
                })
            });
        }
    }
    Value::Array(out)
}

fn overlap(a: &str, b: &str) -> usize {
    let a: BTreeSet<String> = content_tokens(a).into_iter().collect();
    let b: BTreeSet<String> = content_tokens(b).into_iter().collect();
    a.intersection(&b).count()
}

fn select(query: &str, label_data: &str, k: usize) -> Value {
    let mut scored: Vec<(usize, usize)> = label_data
        .lines()
        .filter_map(|l| l.split_once(": "))
        .filter_map(|(i, t)| i.trim().parse().ok().map(|i| (overlap(query, t), i)))
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    json!(scored.into_iter().take(k).map(|s| s.1).collect::<Vec<_>>())
}

fn answer(context: &str, query: &str) -> String {
    let best = context
        .split("\n\n")
        .filter_map(|b| b.split_once('\n'))
        .map(|(_, content)| (overlap(query, content), content.trim()))
        .fold((0, ""), |best, c| if c.0 > best.0 { c } else { best });
    if best.0 >= 2 {
        best.1.to_string()
    } else {
        REFUSAL.to_string()
    }
}

fn points(text: &str) -> Vec<String> {
    text.split(['.', ';', '!', '?', ','])
        .flat_map(|s| s.split(" because "))
        .map(str::trim)
        .filter(|s| !content_tokens(s).is_empty())
        .map(String::from)
        .collect()
}

fn similar(a: &str, b: &str) -> f64 {
    let a: BTreeSet<String> = content_tokens(a).into_iter().collect();
    let b: BTreeSet<String> = content_tokens(b).into_iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        0.0
    } else {
        a.intersection(&b).count() as f64 / union as f64
    }
}

fn atomic(pred: &str, gt: &str) -> Value {
    let p = if pred.trim() == REFUSAL { Vec::new() } else { points(pred) };
    let mut used = vec![false; p.len()];
    let (mut tp, mut fneg) = (Vec::new(), Vec::new());
    for g in points(gt) {
        let best = (0..p.len()).filter(|&j| !used[j]).map(|j| (similar(&g, &p[j]), j)).fold(None, |b: Option<(f64, usize)>, c| {
            if b.is_none_or(|b| c.0 > b.0) {
                Some(c)
            } else {
                b
            }
        });
        match best {
            Some((s, j)) if s >= 0.5 => {
                used[j] = true;
                tp.push(json!({"gt_atomic_point": g, "p_atomic_point": p[j], "score": 1.0}));
            }
            _ => fneg.push(json!({"gt_atomic_point": g, "explanation": "Not stated in the prediction."})),
        }
    }
    let fpos: Vec<Value> = p
        .iter()
        .zip(&used)
        .filter(|(_, u)| !**u)
        .map(|(pt, _)| json!({"p_atomic_point": pt, "gt_atomic_point": "", "explanation": "Not supported by the ground truth.", "score": 1.0}))
        .collect();
    json!({"true_positives": tp, "false_negatives": fneg, "false_positives": fpos})
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extracts_corpus_sentences() {
        let v = extract("Monday 06:30 to 07:15, I went jogging at the campus track alone because running clears my head, keeping a steady pace. Then I slept.");
        let items = v["informations"].as_array().unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(items[0]["WHAT"], "User went jogging");
        assert_eq!(items[0]["WHERE"], "the campus track");
        assert_eq!(items[0]["WHO"], "");
        assert_eq!(items[0]["HOW"], "keeping a steady pace");
        assert_eq!(items[1]["WHAT"], "User: Then I slept");
    }

    #[test]
    fn refusal_and_identity_matching() {
        let gt = "The user went jogging at the campus track alone.";
        let same = atomic(gt, gt);
        assert_eq!(same["false_positives"].as_array().unwrap().len(), 0);
        assert_eq!(same["false_negatives"].as_array().unwrap().len(), 0);
        assert!(!same["true_positives"].as_array().unwrap().is_empty());
        let refusal = atomic(REFUSAL, gt);
        assert_eq!(refusal["true_positives"].as_array().unwrap().len(), 0);
        assert_eq!(refusal["false_negatives"].as_array().unwrap().len(), points(gt).len());
    }

    #[test]
    fn cluster_sizes() {
        let text = (1..=12).map(|i| format!("{i}. Pattern {i}")).collect::<Vec<_>>().join("\n");
        let v = clusters("Habit Analysis", 5, &text);
        let cs = v["clusters"].as_array().unwrap();
        assert_eq!(cs.len(), 3);
        let total: usize = cs.iter().map(|c| c["node_indices"].as_array().unwrap().len()).sum();
        assert_eq!(total, 12);
    }
}
