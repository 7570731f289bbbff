//! Configuration sources: environment, then a TOML file, then flags.

use std::path::Path;

use anyhow::{Context, Result};
use ptm_core::config::{env_overlay, PipelineConfig};
use serde::Deserialize;
use serde_json::Value;

/// `[server]` table of the config file; the pipeline ignores it.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(default)]
pub struct ServerSettings {
    pub addr: Option<String>,
    pub token: Option<String>,
}

pub struct Loaded {
    pub pipeline: PipelineConfig,
    pub server: ServerSettings,
}

pub fn read_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

pub fn load(file: Option<&Path>, flags: Value, env: impl Fn(&str) -> Option<String>) -> Result<Loaded> {
    let mut file_v = match file {
        Some(p) => read_file(p)?,
        None => Value::Object(Default::default()),
    };
    let server = match file_v.as_object_mut().and_then(|o| o.remove("server")) {
        Some(v) => serde_json::from_value(v).context("invalid [server] table")?,
        None => ServerSettings::default(),
    };
    let pipeline = PipelineConfig::layered([env_overlay(env), file_v, flags]).map_err(anyhow::Error::msg)?;
    Ok(Loaded { pipeline, server })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn flags_beat_file_beat_env() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ptm.toml");
        std::fs::write(
            &path,
            "data_dir = \"/from-file\"\nseed = 7\n[consensus]\ntau = 5\n[llm]\nmode = \"scripted\"\n[server]\naddr = \"0.0.0.0:9000\"\n",
        )
        .unwrap();
        let env = |k: &str| match k {
            "PTM_DATA_DIR" => Some("/from-env".to_string()),
            "PTM_MODE" => Some("live".to_string()),
            _ => None,
        };
        let l = load(Some(&path), json!({"seed": 9}), env).unwrap();
        assert_eq!(l.pipeline.data_dir, Path::new("/from-file"));
        assert_eq!(l.pipeline.seed, 9);
        assert_eq!(l.pipeline.consensus.tau, 5);
        assert_eq!(l.pipeline.llm.mode, ptm_core::config::LlmMode::Scripted);
        assert_eq!(l.server.addr.as_deref(), Some("0.0.0.0:9000"));

        let l = load(None, json!({}), env).unwrap();
        assert_eq!(l.pipeline.data_dir, Path::new("/from-env"));
        assert_eq!(l.pipeline.llm.mode, ptm_core::config::LlmMode::Live);
    }

    #[test]
    fn bad_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ptm.toml");
        std::fs::write(&path, "[llm]\ntemperature = 5.0\n").unwrap();
        assert!(load(Some(&path), json!({}), |_| None).is_err());
        std::fs::write(&path, "not = [valid").unwrap();
        assert!(load(Some(&path), json!({}), |_| None).is_err());
    }
}
