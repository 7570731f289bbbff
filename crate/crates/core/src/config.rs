//! Pipeline configuration and its layered sources.
//!
//! Layers merge as JSON objects, later layers winning key by key:
//! defaults, environment, config file, command-line flags.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::abstraction::AbstractionConfig;
use crate::consensus::ConsensusConfig;
use crate::evaluation::EvalConfig;
use crate::hitl::DEFAULT_SESSION_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LlmMode {
    Live,
    #[default]
    Replay,
    /// Live calls, each reply saved as a fixture.
    Record,
    /// The built-in offline responder; no network.
    Scripted,
}

impl std::str::FromStr for LlmMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        serde_json::from_value(Value::String(s.to_lowercase())).map_err(|_| format!("unknown mode {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmSettings {
    pub endpoint: Option<String>,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub model_name: String,
    pub temperature: f64,
    pub mode: LlmMode,
    pub fixture_dir: Option<PathBuf>,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
}

impl Default for LlmSettings {
    fn default() -> Self {
        LlmSettings {
            endpoint: None,
            api_key: None,
            model_name: "gemini-2.5-pro".into(),
            temperature: 0.0,
            mode: LlmMode::Replay,
            fixture_dir: None,
            max_in_flight: 4,
            timeout_secs: 180,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    /// Feature hashing, in-process.
    #[default]
    Hashing,
    /// OpenAI-compatible `/embeddings` endpoint.
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingSettings {
    pub provider: EmbeddingKind,
    pub endpoint: Option<String>,
    pub model_name: String,
    pub dim: usize,
}

impl Default for EmbeddingSettings {
    fn default() -> Self {
        EmbeddingSettings { provider: EmbeddingKind::Hashing, endpoint: None, model_name: "all-MiniLM-L6-v2".into(), dim: 384 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HitlSettings {
    pub session_size: usize,
}

impl Default for HitlSettings {
    fn default() -> Self {
        HitlSettings { session_size: DEFAULT_SESSION_SIZE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub data_dir: PathBuf,
    pub seed: u64,
    pub consensus: ConsensusConfig,
    pub abstraction: AbstractionConfig,
    pub llm: LlmSettings,
    pub embedding: EmbeddingSettings,
    pub eval: EvalConfig,
    pub hitl: HitlSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data_dir: PathBuf::from("data"),
            seed: 42,
            consensus: ConsensusConfig::default(),
            abstraction: AbstractionConfig::default(),
            llm: LlmSettings::default(),
            embedding: EmbeddingSettings::default(),
            eval: EvalConfig::default(),
            hitl: HitlSettings::default(),
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Overlay from `PTM_*` variables.
pub fn env_overlay(lookup: impl Fn(&str) -> Option<String>) -> Value {
    let mut out = Map::new();
    let mut llm = Map::new();
    if let Some(v) = lookup("PTM_LLM_ENDPOINT") {
        llm.insert("endpoint".into(), json!(v));
    }
    if let Some(v) = lookup("PTM_LLM_API_KEY") {
        llm.insert("api_key".into(), json!(v));
    }
    if let Some(v) = lookup("PTM_MODE") {
        llm.insert("mode".into(), json!(v.to_lowercase()));
    }
    if !llm.is_empty() {
        out.insert("llm".into(), Value::Object(llm));
    }
    if let Some(v) = lookup("PTM_EMBED_ENDPOINT") {
        out.insert("embedding".into(), json!({"endpoint": v, "provider": "http"}));
    }
    if let Some(v) = lookup("PTM_DATA_DIR") {
        out.insert("data_dir".into(), json!(v));
    }
    Value::Object(out)
}

impl PipelineConfig {
    /// Defaults, then each overlay in order.
    pub fn layered(overlays: impl IntoIterator<Item = Value>) -> Result<Self, String> {
        let mut v = serde_json::to_value(PipelineConfig::default()).map_err(|e| e.to_string())?;
        for o in overlays {
            merge(&mut v, o);
        }
        let cfg: PipelineConfig = serde_json::from_value(v).map_err(|e| format!("invalid configuration: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The seed drives every stochastic step unless a section overrides it.
    pub fn validate(&self) -> Result<(), String> {
        self.consensus.validate().map_err(|e| e.to_string())?;
        if !(0.0..=2.0).contains(&self.llm.temperature) {
            return Err(format!("temperature {} outside [0, 2]", self.llm.temperature));
        }
        if self.abstraction.dims_per_layer == 0 || self.abstraction.sample_size == 0 {
            return Err("abstraction sample_size and dims_per_layer must be positive".into());
        }
        if self.eval.num_target_labels == 0 || self.eval.testset_size == 0 {
            return Err("eval num_target_labels and testset_size must be positive".into());
        }
        if self.hitl.session_size == 0 {
            return Err("hitl session_size must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn later_layers_win() {
        let env = env_overlay(|k| match k {
            "PTM_MODE" => Some("LIVE".into()),
            "PTM_DATA_DIR" => Some("/env".into()),
            "PTM_LLM_ENDPOINT" => Some("http://env".into()),
            _ => None,
        });
        let file = json!({"data_dir": "/file", "consensus": {"tau": 5}});
        let flags = json!({"data_dir": "/flag"});
        let cfg = PipelineConfig::layered([env, file, flags]).unwrap();
        assert_eq!(cfg.data_dir, PathBuf::from("/flag"));
        assert_eq!(cfg.llm.mode, LlmMode::Live);
        assert_eq!(cfg.llm.endpoint.as_deref(), Some("http://env"));
        assert_eq!(cfg.consensus.tau, 5);
        assert_eq!(cfg.consensus.reduce_dim, 25);
    }

    #[test]
    fn defaults_and_validation() {
        let cfg = PipelineConfig::default();
        assert_eq!((cfg.llm.temperature, cfg.consensus.tau, cfg.consensus.reduce_dim, cfg.hitl.session_size), (0.0, 4, 25, 18));
        assert!(PipelineConfig::layered([json!({"llm": {"temperature": 3.0}})]).is_err());
        assert!(PipelineConfig::layered([json!({"llm": {"mode": "sideways"}})]).is_err());
    }
}
