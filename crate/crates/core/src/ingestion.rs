//! Journal ingestion and 5W1H extraction into L0 instances.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::sync::OnceLock;

use chrono::{Duration, NaiveDate, NaiveTime};
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::graph::{write_atomic, BehavioralInstance, DataDir, GraphError, TimeWindow};
use crate::llm::{ExpectedShape, Llm, LlmError};
use crate::prompts::{vars, TemplateId};
use crate::text::word_count;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub id: String,
    pub user_id: String,
    pub date: NaiveDate,
    pub text: String,
    #[serde(default)]
    pub word_count: usize,
}

impl JournalEntry {
    pub fn new(id: &str, user_id: &str, date: NaiveDate, text: &str) -> Self {
        JournalEntry { id: id.into(), user_id: user_id.into(), date, text: text.into(), word_count: word_count(text) }
    }
}

#[derive(Debug, Deserialize)]
struct RawEntry {
    id: Option<Value>,
    user_id: Option<String>,
    date: Option<String>,
    text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    /// 1-based line number in the submitted batch.
    pub line: usize,
    pub id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub accepted: usize,
    pub rejected: Vec<Rejection>,
    pub corpus_size: usize,
}

/// Merges a JSONL batch into `corpus`. Bad lines are reported and skipped;
/// the corpus stays deduplicated by id and sorted by (date, id).
pub fn ingest(corpus: &mut Vec<JournalEntry>, user_id: &str, jsonl: &str) -> IngestReport {
    let mut seen: HashSet<String> = corpus.iter().map(|e| e.id.clone()).collect();
    let mut report = IngestReport::default();
    for (i, line) in jsonl.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let reject = |id: Option<String>, reason: &str| Rejection { line: lineno, id, reason: reason.into() };
        let raw: RawEntry = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                report.rejected.push(reject(None, &format!("malformed line: {e}")));
                continue;
            }
        };
        let id = match raw.id {
            Some(Value::String(s)) if !s.trim().is_empty() => s,
            Some(Value::Number(n)) => n.to_string(),
            _ => {
                report.rejected.push(reject(None, "missing id"));
                continue;
            }
        };
        let id_opt = Some(id.clone());
        if let Some(u) = &raw.user_id {
            if u != user_id {
                report.rejected.push(reject(id_opt, "user mismatch"));
                continue;
            }
        }
        let Some(date) = raw.date.as_deref().and_then(|d| NaiveDate::parse_from_str(d.trim(), "%Y-%m-%d").ok()) else {
            report.rejected.push(reject(id_opt, "malformed date"));
            continue;
        };
        let text = raw.text.unwrap_or_default();
        if text.trim().is_empty() {
            report.rejected.push(reject(id_opt, "empty text"));
            continue;
        }
        if !seen.insert(id.clone()) {
            report.rejected.push(reject(id_opt, "duplicate"));
            continue;
        }
        corpus.push(JournalEntry::new(&id, user_id, date, &text));
        report.accepted += 1;
    }
    corpus.sort_by(|a, b| (a.date, &a.id).cmp(&(b.date, &b.id)));
    report.corpus_size = corpus.len();
    report
}

pub fn load_corpus(dir: &DataDir, user_id: &str) -> Result<Vec<JournalEntry>, GraphError> {
    DataDir::validate_user_id(user_id)?;
    let Ok(text) = fs::read_to_string(dir.journals_path(user_id)) else { return Ok(Vec::new()) };
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(GraphError::from))
        .collect()
}

pub fn save_corpus(dir: &DataDir, user_id: &str, corpus: &[JournalEntry]) -> Result<(), GraphError> {
    DataDir::validate_user_id(user_id)?;
    let mut out = Vec::new();
    for e in corpus {
        out.extend(serde_json::to_vec(e)?);
        out.push(b'\n');
    }
    write_atomic(&dir.journals_path(user_id), &out)?;
    Ok(())
}

fn when_regexes() -> &'static (Regex, Regex) {
    static RE: OnceLock<(Regex, Regex)> = OnceLock::new();
    RE.get_or_init(|| {
        let range = Regex::new(
            r"(?i)^\s*(?:(?P<day>[a-z]+)\s*,?\s*)?(?P<s>\d{1,2}:\d{2})\s*(?:-{1,2}|–|—|to)\s*(?P<e>\d{1,2}:\d{2})",
        )
        .unwrap();
        let dur = Regex::new(
            r"(?i)^\s*(?:(?P<day>[a-z]+)\s*,?\s*)?(?P<s>\d{1,2}:\d{2})\D*?(?P<h>\d+(?:\.\d+)?)\s*(?:h|hr|hrs|hour|hours)\b",
        )
        .unwrap();
        (range, dur)
    })
}

fn weekday_name(raw: &str) -> Option<String> {
    const DAYS: [&str; 7] = ["Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday"];
    let lower = raw.to_lowercase();
    if lower.len() < 3 {
        return None;
    }
    DAYS.iter().find(|d| d.to_lowercase().starts_with(&lower)).map(|d| d.to_string())
}

/// Parses `Day, HH:MM-HH:MM` (or a start time plus a duration in hours).
/// Returns `None` when the text matches neither shape.
pub fn parse_when(when: &str) -> Option<TimeWindow> {
    let (range, dur) = when_regexes();
    let hm = |s: &str| NaiveTime::parse_from_str(s, "%H:%M").ok();
    if let Some(c) = range.captures(when) {
        let start = hm(&c["s"])?;
        let end = hm(&c["e"])?;
        let weekday = c.name("day").and_then(|d| weekday_name(d.as_str()));
        return Some(TimeWindow { weekday, start, end });
    }
    if let Some(c) = dur.captures(when) {
        let start = hm(&c["s"])?;
        let hours: f64 = c["h"].parse().ok()?;
        if !(0.0..=24.0).contains(&hours) {
            return None;
        }
        let end = start.overflowing_add_signed(Duration::minutes((hours * 60.0).round() as i64)).0;
        let weekday = c.name("day").and_then(|d| weekday_name(d.as_str()));
        return Some(TimeWindow { weekday, start, end });
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    pub entry_id: String,
    pub instances: Vec<BehavioralInstance>,
    /// Reasons for items dropped during validation.
    pub dropped: Vec<String>,
}

type RawItem = BTreeMap<String, String>;

fn parse_informations(v: Value) -> Result<Vec<RawItem>, String> {
    let items = v
        .get("informations")
        .and_then(Value::as_array)
        .ok_or_else(|| "missing \"informations\" array".to_string())?;
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let obj = item.as_object().ok_or_else(|| format!("informations[{i}] is not an object"))?;
            let mut out = RawItem::new();
            for (k, val) in obj {
                let text = match val {
                    Value::String(s) => s.trim().to_string(),
                    Value::Null => String::new(),
                    other => return Err(format!("informations[{i}].{k} is {other}, not a string")),
                };
                out.insert(k.to_lowercase(), text);
            }
            Ok(out)
        })
        .collect()
}

/// Runs E0 over one entry. Items without a WHAT are dropped; the rest become
/// instances `{entry_id}-{ordinal}` in the order the model listed them.
pub fn extract_l0(llm: &Llm, entry: &JournalEntry) -> Result<Extraction, LlmError> {
    let items = llm.call_json(
        TemplateId::E0,
        vars([("text", entry.text.clone())]),
        ExpectedShape::JsonObject,
        parse_informations,
    )?;
    let mut instances = Vec::new();
    let mut dropped = Vec::new();
    for (i, mut item) in items.into_iter().enumerate() {
        let mut take = |k: &str| item.remove(k).unwrap_or_default();
        let what = take("what");
        if what.is_empty() {
            let reason = format!("{}: item {} has no WHAT", entry.id, i + 1);
            tracing::warn!("{reason}");
            dropped.push(reason);
            continue;
        }
        let when = take("when");
        let time_window = parse_when(&when);
        instances.push(BehavioralInstance {
            id: format!("{}-{}", entry.id, instances.len() + 1),
            what,
            time_window,
            when,
            where_: take("where"),
            who: take("who"),
            why: take("why"),
            how: take("how"),
            date: entry.date,
            journal_entry_id: entry.id.clone(),
        });
    }
    Ok(Extraction { entry_id: entry.id.clone(), instances, dropped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{LlmClient, LlmRequest};
    use crate::prompts::PromptLibrary;
    use std::sync::Arc;

    #[test]
    fn when_formats() {
        let w = parse_when("Friday, 10:00-12:30").unwrap();
        assert_eq!(w.weekday.as_deref(), Some("Friday"));
        assert_eq!((w.start.to_string(), w.end.to_string()), ("10:00:00".into(), "12:30:00".into()));
        let w = parse_when("Monday, 20:00–22:00").unwrap();
        assert_eq!(w.end, NaiveTime::from_hms_opt(22, 0, 0).unwrap());
        let w = parse_when("Tue, 23:00, 2 hours").unwrap();
        assert_eq!((w.weekday.as_deref(), w.end), (Some("Tuesday"), NaiveTime::from_hms_opt(1, 0, 0).unwrap()));
        assert_eq!(parse_when("sometime in the evening"), None);
        assert_eq!(parse_when("9:15 - 10:00").unwrap().weekday, None);
    }

    #[test]
    fn ingest_sorts_dedups_and_rejects() {
        let mut corpus = Vec::new();
        let batch = r#"{"id":"b","user_id":"u","date":"2025-03-05","text":"later"}
{"id":"a","user_id":"u","date":"2025-03-03","text":"first"}
{"id":"a","user_id":"u","date":"2025-03-04","text":"again"}
{"id":"c","user_id":"u","date":"2025-03-04","text":"  "}
{"id":"d","user_id":"u","date":"2025-13-01","text":"bad date"}
{"id":"e","user_id":"u","date":"2025-03-04","text":"middle"}"#;
        let r = ingest(&mut corpus, "u", batch);
        assert_eq!(r.accepted, 3);
        assert_eq!(corpus.iter().map(|e| e.id.as_str()).collect::<Vec<_>>(), vec!["a", "e", "b"]);
        let reasons: Vec<&str> = r.rejected.iter().map(|x| x.reason.as_str()).collect();
        assert_eq!(reasons, vec!["duplicate", "empty text", "malformed date"]);
        assert_eq!(r.rejected[0].line, 3);
    }

    struct Fixed(&'static str);

    impl LlmClient for Fixed {
        fn send(&self, _r: &LlmRequest) -> Result<String, LlmError> {
            Ok(self.0.to_string())
        }
    }

    fn entry() -> JournalEntry {
        JournalEntry::new("e7", "u", NaiveDate::from_ymd_opt(2025, 3, 3).unwrap(), "Monday night I caught up on work.")
    }

    #[test]
    fn extraction_maps_items() {
        let reply = r#"{"informations": [
            {"WHAT": "User worked on catching up with several unfinished assignments", "WHEN": "Monday, 20:00-22:00",
             "WHERE": "Home", "WHO": "", "WHY": "Several tasks were overdue", "HOW": "Worked through them one by one"},
            {"WHAT": "", "WHEN": "Monday, 22:00-23:00", "WHERE": "Home", "WHO": "", "WHY": "x", "HOW": "y"},
            {"WHAT": "User went to bed", "WHEN": "late", "WHERE": "Home", "WHO": "", "WHY": "Tired"}
        ]}"#;
        let llm = Llm::new(Arc::new(Fixed(reply)), Arc::new(PromptLibrary::bundled()), 0.0);
        let x = extract_l0(&llm, &entry()).unwrap();
        assert_eq!(x.instances.len(), 2);
        assert_eq!(x.dropped.len(), 1);
        let a = &x.instances[0];
        assert_eq!(a.id, "e7-1");
        assert_eq!(a.what, "User worked on catching up with several unfinished assignments");
        let w = a.time_window.as_ref().unwrap();
        assert_eq!((w.start.format("%H:%M").to_string(), w.end.format("%H:%M").to_string()), ("20:00".into(), "22:00".into()));
        assert_eq!(a.date, entry().date);
        assert_eq!(a.journal_entry_id, "e7");
        let b = &x.instances[1];
        assert_eq!((b.id.as_str(), b.time_window.clone(), b.how.as_str()), ("e7-2", None, ""));
        assert_eq!(b.when, "late");
    }

    #[test]
    fn empty_informations_is_fine() {
        let llm = Llm::new(Arc::new(Fixed(r#"{"informations": []}"#)), Arc::new(PromptLibrary::bundled()), 0.0);
        let x = extract_l0(&llm, &entry()).unwrap();
        assert!(x.instances.is_empty() && x.dropped.is_empty());
    }
}
