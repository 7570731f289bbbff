//! Shared helpers for the end-to-end tests. Drives the synthetic corpus
//! through every phase with a scripted or replayed model.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ptm_core::clock::FixedClock;
use ptm_core::config::{LlmMode, PipelineConfig};
use ptm_core::embed::HashingEmbedder;
use ptm_core::llm::{FixtureStore, LlmClient, RecordingClient, ReplayClient, ScriptedClient};
use ptm_core::pipeline::{fixed_instant, run_through, HitlScript, Pipeline};
use ptm_core::prompts::PromptLibrary;

pub const USER: &str = "u01";

pub fn synthetic_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/synthetic")
}

pub fn fixture_dir() -> PathBuf {
    synthetic_dir().join("llm")
}

pub fn journals() -> String {
    std::fs::read_to_string(synthetic_dir().join("journals.jsonl")).expect("synthetic corpus")
}

pub fn script() -> HitlScript {
    let raw = std::fs::read_to_string(synthetic_dir().join("hitl_script.json")).expect("hitl script");
    serde_json::from_str(&raw).expect("valid hitl script")
}

pub fn config(data_dir: &Path, mode: LlmMode) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.data_dir = data_dir.to_path_buf();
    cfg.llm.mode = mode;
    cfg.llm.fixture_dir = Some(fixture_dir());
    cfg
}

pub fn with_client(data_dir: &Path, mode: LlmMode, client: Arc<dyn LlmClient>) -> Pipeline {
    Pipeline::new(
        config(data_dir, mode),
        client,
        Arc::new(PromptLibrary::bundled()),
        Arc::new(HashingEmbedder::default()),
        Arc::new(FixedClock(fixed_instant())),
    )
}

pub fn scripted(data_dir: &Path) -> Pipeline {
    with_client(data_dir, LlmMode::Scripted, Arc::new(ScriptedClient))
}

pub fn replay(data_dir: &Path) -> Pipeline {
    with_client(data_dir, LlmMode::Replay, Arc::new(ReplayClient::new(FixtureStore::new(fixture_dir()))))
}

/// Scripted responder whose replies are saved under `fixtures`.
pub fn recording(data_dir: &Path, fixtures: &Path) -> Pipeline {
    with_client(data_dir, LlmMode::Record, Arc::new(RecordingClient::new(ScriptedClient, FixtureStore::new(fixtures))))
}

/// Every phase plus the scripted HITL session.
pub fn run_all(p: &Pipeline) {
    run_through(p, USER, &journals(), Some(&script())).expect("full pipeline run");
}
