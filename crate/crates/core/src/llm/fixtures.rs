//! Prompt-hash keyed response fixtures.
//!
//! A fixture directory holds one file per request, named by the first 16 hex
//! digits of the SHA-256 of the rendered prompt and containing the raw reply.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use super::{ClientMode, LlmClient, LlmError, LlmRequest};
use crate::graph::write_atomic;

/// 16-hex-digit content hash of a rendered prompt.
pub fn prompt_hash(prompt: &str) -> String {
    let digest = Sha256::digest(prompt.as_bytes());
    hex::encode(&digest[..8])
}

#[derive(Debug, Clone)]
pub struct FixtureStore {
    dir: PathBuf,
}

impl FixtureStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FixtureStore { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, hash: &str) -> PathBuf {
        self.dir.join(hash)
    }

    pub fn get(&self, hash: &str) -> Option<String> {
        fs::read_to_string(self.path(hash)).ok()
    }

    pub fn put(&self, hash: &str, response: &str) -> std::io::Result<()> {
        write_atomic(&self.path(hash), response.as_bytes())
    }

    /// Hashes of every stored fixture, sorted.
    pub fn hashes(&self) -> Vec<String> {
        let mut out: Vec<String> = fs::read_dir(&self.dir)
            .into_iter()
            .flatten()
            .flatten()
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| n.len() == 16 && n.chars().all(|c| c.is_ascii_hexdigit()))
            .collect();
        out.sort();
        out
    }
}

/// Serves replies from a fixture store; a miss is an error.
pub struct ReplayClient {
    store: FixtureStore,
    used: Mutex<Vec<String>>,
}

impl ReplayClient {
    pub fn new(store: FixtureStore) -> Self {
        ReplayClient { store, used: Mutex::default() }
    }

    /// Hashes served so far, in request order.
    pub fn used(&self) -> Vec<String> {
        self.used.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl LlmClient for ReplayClient {
    fn send(&self, request: &LlmRequest) -> Result<String, LlmError> {
        let hash = request.hash();
        let reply = self
            .store
            .get(&hash)
            .ok_or_else(|| LlmError::ReplayMiss { template: request.template_id, hash: hash.clone() })?;
        self.used.lock().unwrap_or_else(|e| e.into_inner()).push(hash);
        Ok(reply)
    }

    fn mode(&self) -> ClientMode {
        ClientMode::Replay
    }
}

/// Forwards to another client and stores every successful reply.
pub struct RecordingClient<C> {
    inner: C,
    store: FixtureStore,
}

impl<C: LlmClient> RecordingClient<C> {
    pub fn new(inner: C, store: FixtureStore) -> Self {
        RecordingClient { inner, store }
    }
}

impl<C: LlmClient> LlmClient for RecordingClient<C> {
    fn send(&self, request: &LlmRequest) -> Result<String, LlmError> {
        let reply = self.inner.send(request)?;
        self.store
            .put(&request.hash(), &reply)
            .map_err(|e| LlmError::Transport(format!("fixture write failed: {e}")))?;
        Ok(reply)
    }

    fn mode(&self) -> ClientMode {
        self.inner.mode()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ExpectedShape;
    use crate::prompts::{vars, PromptLibrary, TemplateId};

    struct Echo;

    impl LlmClient for Echo {
        fn send(&self, r: &LlmRequest) -> Result<String, LlmError> {
            Ok(format!("{{\"n\": {}}}", r.prompt.len()))
        }
    }

    #[test]
    fn hash_is_sixteen_hex_digits() {
        let h = prompt_hash("abc");
        assert_eq!(h, "ba7816bf8f01cfea");
    }

    #[test]
    fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let store = FixtureStore::new(dir.path());
        let lib = PromptLibrary::bundled();
        let req = LlmRequest::new(&lib, TemplateId::E0, vars([("text", "hello".into())]), 0.0, ExpectedShape::JsonObject)
            .unwrap();
        let rec = RecordingClient::new(Echo, store.clone());
        let live = rec.send(&req).unwrap();
        let replay = ReplayClient::new(store.clone());
        assert_eq!(replay.send(&req).unwrap(), live);
        assert_eq!(replay.send(&req).unwrap(), live);
        assert_eq!(store.hashes(), vec![req.hash()]);

        let other = LlmRequest::new(&lib, TemplateId::E0, vars([("text", "bye".into())]), 0.0, ExpectedShape::JsonObject)
            .unwrap();
        assert!(matches!(replay.send(&other), Err(LlmError::ReplayMiss { .. })));
    }
}
