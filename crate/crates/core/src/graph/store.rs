//! File-backed, append-only snapshot persistence.
//!
//! Layout under the data root:
//!
//! ```text
//! users/<user_id>/graph/snapshot-000001.json   one document per version
//! users/<user_id>/graph/revisions.jsonl        append-only revision log
//! ```
//!
//! Writes go to a temporary file in the target directory and are renamed into
//! place; existing snapshots are never overwritten.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{GraphError, LayeredGraph};

/// Per-user directory layout shared by every pipeline phase.
#[derive(Debug, Clone)]
pub struct DataDir {
    root: PathBuf,
}

impl DataDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DataDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Rejects ids that could escape the data root.
    pub fn validate_user_id(user_id: &str) -> Result<(), GraphError> {
        let ok = !user_id.is_empty()
            && user_id.len() <= 128
            && !user_id.starts_with('.')
            && user_id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
        if ok {
            Ok(())
        } else {
            Err(GraphError::InvalidNode { node: user_id.into(), reason: "invalid user id".into() })
        }
    }

    pub fn user_dir(&self, user_id: &str) -> PathBuf {
        self.root.join("users").join(user_id)
    }

    pub fn user_exists(&self, user_id: &str) -> bool {
        DataDir::validate_user_id(user_id).is_ok() && self.user_dir(user_id).is_dir()
    }

    pub fn graph_dir(&self, user_id: &str) -> PathBuf {
        self.user_dir(user_id).join("graph")
    }

    pub fn journals_path(&self, user_id: &str) -> PathBuf {
        self.user_dir(user_id).join("journals.jsonl")
    }

    pub fn state_path(&self, user_id: &str) -> PathBuf {
        self.user_dir(user_id).join("state.json")
    }

    pub fn hitl_dir(&self, user_id: &str) -> PathBuf {
        self.user_dir(user_id).join("hitl")
    }

    pub fn eval_dir(&self, user_id: &str) -> PathBuf {
        self.user_dir(user_id).join("eval")
    }

    pub fn runs_dir(&self, user_id: &str) -> PathBuf {
        self.user_dir(user_id).join("runs")
    }

    pub fn likert_path(&self, user_id: &str) -> PathBuf {
        self.user_dir(user_id).join("likert.jsonl")
    }

    /// Users with a directory under the data root, sorted.
    pub fn users(&self) -> Vec<String> {
        let mut out: Vec<String> = fs::read_dir(self.root.join("users"))
            .into_iter()
            .flatten()
            .flatten()
            .filter(|e| e.path().is_dir())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        out.sort();
        out
    }
}

/// Atomically writes `bytes` to `path` (temp file + rename).
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Serializes `value` as pretty JSON with a trailing newline and writes it atomically.
pub(crate) fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(std::io::Error::other)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// One line of the append-only revision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevisionLogEntry {
    pub version: u64,
    pub node_id: String,
    pub feedback_id: String,
    pub timestamp: DateTime<Utc>,
    pub prior_content: String,
    pub updated_content: String,
}

/// Versioned snapshot store. One writer per user at a time, any number of
/// readers of committed snapshots.
#[derive(Debug, Clone)]
pub struct GraphStore {
    dir: DataDir,
    writers: Arc<Mutex<HashMap<String, Arc<Mutex<()>>>>>,
}

impl GraphStore {
    pub fn new(dir: DataDir) -> Self {
        GraphStore { dir, writers: Arc::default() }
    }

    pub fn data_dir(&self) -> &DataDir {
        &self.dir
    }

    /// Lock serializing writes for one user.
    pub fn writer_lock(&self, user_id: &str) -> Arc<Mutex<()>> {
        let mut map = self.writers.lock().unwrap_or_else(|e| e.into_inner());
        map.entry(user_id.to_string()).or_default().clone()
    }

    fn snapshot_path(&self, user_id: &str, version: u64) -> PathBuf {
        self.dir.graph_dir(user_id).join(format!("snapshot-{version:06}.json"))
    }

    /// Committed versions in ascending order.
    pub fn versions(&self, user_id: &str) -> Vec<u64> {
        let mut v: Vec<u64> = fs::read_dir(self.dir.graph_dir(user_id))
            .into_iter()
            .flatten()
            .flatten()
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_prefix("snapshot-")?.strip_suffix(".json")?.parse().ok()
            })
            .collect();
        v.sort_unstable();
        v
    }

    pub fn latest_version(&self, user_id: &str) -> Option<u64> {
        self.versions(user_id).last().copied()
    }

    pub fn load(&self, user_id: &str, version: u64) -> Result<LayeredGraph, GraphError> {
        DataDir::validate_user_id(user_id)?;
        let path = self.snapshot_path(user_id, version);
        let bytes = fs::read(&path).map_err(|_| GraphError::NotFound(format!("{user_id}@v{version}")))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn load_latest(&self, user_id: &str) -> Result<LayeredGraph, GraphError> {
        DataDir::validate_user_id(user_id)?;
        let v = self
            .latest_version(user_id)
            .ok_or_else(|| GraphError::NotFound(format!("graph for {user_id}")))?;
        self.load(user_id, v)
    }

    /// Latest snapshot, or an empty version-0 graph when nothing is committed.
    pub fn load_or_empty(&self, user_id: &str, at: DateTime<Utc>) -> Result<LayeredGraph, GraphError> {
        match self.latest_version(user_id) {
            Some(v) => self.load(user_id, v),
            None => {
                DataDir::validate_user_id(user_id)?;
                Ok(LayeredGraph::new(user_id, at))
            }
        }
    }

    /// Persists `graph` as the next snapshot. Its version must be exactly one
    /// above the latest committed version.
    pub fn commit(&self, graph: &LayeredGraph) -> Result<(), GraphError> {
        DataDir::validate_user_id(&graph.user_id)?;
        let latest = self.latest_version(&graph.user_id).unwrap_or(0);
        if graph.version != latest + 1 {
            return Err(GraphError::Snapshot(format!(
                "version {} does not follow committed version {latest}",
                graph.version
            )));
        }
        let path = self.snapshot_path(&graph.user_id, graph.version);
        if path.exists() {
            return Err(GraphError::Snapshot(format!("snapshot {} already exists", graph.version)));
        }
        write_json_atomic(&path, graph)?;
        Ok(())
    }

    pub fn append_revision(&self, user_id: &str, entry: &RevisionLogEntry) -> Result<(), GraphError> {
        let dir = self.dir.graph_dir(user_id);
        fs::create_dir_all(&dir)?;
        let mut f = OpenOptions::new().create(true).append(true).open(dir.join("revisions.jsonl"))?;
        let mut line = serde_json::to_vec(entry)?;
        line.push(b'\n');
        f.write_all(&line)?;
        Ok(())
    }

    pub fn revision_log(&self, user_id: &str) -> Result<Vec<RevisionLogEntry>, GraphError> {
        let path = self.dir.graph_dir(user_id).join("revisions.jsonl");
        let Ok(text) = fs::read_to_string(path) else { return Ok(Vec::new()) };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(GraphError::from))
            .collect()
    }
}
