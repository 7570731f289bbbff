//! LLM client contract, replay fixtures and the JSON re-ask policy.
//!
//! Every call goes through [`Llm`], which renders the template, sends the
//! request through a pluggable [`LlmClient`] and validates the reply. A reply
//! that fails validation gets exactly one corrective re-ask; a second failure
//! is reported, never repaired.

mod fixtures;
mod live;
pub mod scripted;

pub use fixtures::{prompt_hash, FixtureStore, RecordingClient, ReplayClient};
pub use live::{HttpLlmClient, LiveConfig};
pub use scripted::ScriptedClient;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::prompts::{PromptError, PromptLibrary, TemplateId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("replay miss for {template} prompt {hash}")]
    ReplayMiss { template: TemplateId, hash: String },
    #[error("invalid {template} response after re-ask: {detail}")]
    InvalidResponse { template: TemplateId, detail: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

impl LlmError {
    pub fn is_transport(&self) -> bool {
        matches!(self, LlmError::Transport(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectedShape {
    JsonObject,
    JsonArray,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClientMode {
    Live,
    Replay,
}

/// Appended to the original prompt when a reply has to be asked for again.
pub const CORRECTIVE_LINE: &str = "\n\nYour previous response was not valid JSON matching the output schema above. Respond again with only the corrected JSON and nothing else.";

#[derive(Debug, Clone, PartialEq)]
pub struct LlmRequest {
    pub template_id: TemplateId,
    pub variables: BTreeMap<String, String>,
    pub temperature: f64,
    pub expected_shape: ExpectedShape,
    /// Fully rendered prompt text; the replay key is derived from it.
    pub prompt: String,
    /// 0 for the first ask, 1 for the corrective re-ask.
    pub attempt: u32,
}

impl LlmRequest {
    pub fn new(
        prompts: &PromptLibrary,
        template_id: TemplateId,
        variables: BTreeMap<String, String>,
        temperature: f64,
        expected_shape: ExpectedShape,
    ) -> Result<Self, LlmError> {
        if !(0.0..=2.0).contains(&temperature) {
            return Err(LlmError::InvalidRequest(format!("temperature {temperature} outside [0, 2]")));
        }
        let prompt = prompts.render(template_id, &variables)?;
        Ok(LlmRequest { template_id, variables, temperature, expected_shape, prompt, attempt: 0 })
    }

    pub fn corrective(&self) -> LlmRequest {
        LlmRequest { prompt: format!("{}{CORRECTIVE_LINE}", self.prompt), attempt: self.attempt + 1, ..self.clone() }
    }

    pub fn hash(&self) -> String {
        prompt_hash(&self.prompt)
    }
}

pub trait LlmClient: Send + Sync {
    fn send(&self, request: &LlmRequest) -> Result<String, LlmError>;

    fn mode(&self) -> ClientMode {
        ClientMode::Live
    }
}

impl<T: LlmClient + ?Sized> LlmClient for Arc<T> {
    fn send(&self, request: &LlmRequest) -> Result<String, LlmError> {
        (**self).send(request)
    }

    fn mode(&self) -> ClientMode {
        (**self).mode()
    }
}

/// Parses a reply as strict JSON of the expected top-level shape.
pub fn parse_json(raw: &str, shape: ExpectedShape) -> Result<Value, String> {
    let v: Value = serde_json::from_str(raw.trim()).map_err(|e| format!("not valid JSON: {e}"))?;
    match (shape, &v) {
        (ExpectedShape::JsonObject, Value::Object(_)) | (ExpectedShape::JsonArray, Value::Array(_)) => Ok(v),
        (ExpectedShape::Text, _) => Ok(v),
        (ExpectedShape::JsonObject, _) => Err("expected a JSON object".into()),
        (ExpectedShape::JsonArray, _) => Err("expected a JSON array".into()),
    }
}

/// Per-template call counts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CallStats {
    pub total: usize,
    pub reasks: usize,
    pub by_template: BTreeMap<String, usize>,
}

/// Rendering, sending and validation front-end shared by all phases.
pub struct Llm {
    client: Arc<dyn LlmClient>,
    prompts: Arc<PromptLibrary>,
    temperature: f64,
    calls: AtomicUsize,
    stats: Mutex<CallStats>,
}

impl Llm {
    pub fn new(client: Arc<dyn LlmClient>, prompts: Arc<PromptLibrary>, temperature: f64) -> Self {
        Llm { client, prompts, temperature, calls: AtomicUsize::new(0), stats: Mutex::default() }
    }

    pub fn prompts(&self) -> &PromptLibrary {
        &self.prompts
    }

    pub fn mode(&self) -> ClientMode {
        self.client.mode()
    }

    pub fn request(
        &self,
        template: TemplateId,
        variables: BTreeMap<String, String>,
        shape: ExpectedShape,
    ) -> Result<LlmRequest, LlmError> {
        LlmRequest::new(&self.prompts, template, variables, self.temperature, shape)
    }

    fn send(&self, request: &LlmRequest) -> Result<String, LlmError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        {
            let mut s = self.stats.lock().unwrap_or_else(|e| e.into_inner());
            s.total += 1;
            if request.attempt > 0 {
                s.reasks += 1;
            }
            *s.by_template.entry(request.template_id.to_string()).or_default() += 1;
        }
        self.client.send(request)
    }

    /// Sends a JSON-producing request and validates it with `parse`, re-asking
    /// once on failure.
    pub fn call_json<T>(
        &self,
        template: TemplateId,
        variables: BTreeMap<String, String>,
        shape: ExpectedShape,
        parse: impl Fn(Value) -> Result<T, String>,
    ) -> Result<T, LlmError> {
        let request = self.request(template, variables, shape)?;
        let first = self.send(&request)?;
        match parse_json(&first, shape).and_then(&parse) {
            Ok(v) => Ok(v),
            Err(reason) => {
                tracing::warn!(template = %template, %reason, "invalid reply, re-asking once");
                let retry = request.corrective();
                let second = self.send(&retry)?;
                parse_json(&second, shape)
                    .and_then(&parse)
                    .map_err(|detail| LlmError::InvalidResponse { template, detail })
            }
        }
    }

    /// Sends a free-text request and returns the reply verbatim.
    pub fn call_text(&self, template: TemplateId, variables: BTreeMap<String, String>) -> Result<String, LlmError> {
        let request = self.request(template, variables, ExpectedShape::Text)?;
        self.send(&request)
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn stats(&self) -> CallStats {
        self.stats.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

/// Maps `f` over `items` with at most `max_in_flight` calls running at once,
/// preserving input order in the output.
pub fn bounded_map<T: Sync, R: Send>(items: &[T], max_in_flight: usize, f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    match rayon::ThreadPoolBuilder::new().num_threads(max_in_flight.max(1)).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(_) => items.iter().map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::vars;

    struct Canned(Mutex<Vec<String>>);

    impl LlmClient for Canned {
        fn send(&self, _r: &LlmRequest) -> Result<String, LlmError> {
            let mut q = self.0.lock().unwrap();
            if q.is_empty() {
                Err(LlmError::Transport("empty".into()))
            } else {
                Ok(q.remove(0))
            }
        }
    }

    fn llm(replies: &[&str]) -> Llm {
        let client = Canned(Mutex::new(replies.iter().map(|s| s.to_string()).collect()));
        Llm::new(Arc::new(client), Arc::new(PromptLibrary::bundled()), 0.0)
    }

    fn parse_infos(v: Value) -> Result<usize, String> {
        v.get("informations").and_then(Value::as_array).map(Vec::len).ok_or_else(|| "missing informations".into())
    }

    #[test]
    fn reask_once_then_succeed() {
        let l = llm(&["not json", r#"{"informations": []}"#]);
        let n = l.call_json(TemplateId::E0, vars([("text", "t".into())]), ExpectedShape::JsonObject, parse_infos);
        assert_eq!(n, Ok(0));
        assert_eq!(l.stats().reasks, 1);
        assert_eq!(l.call_count(), 2);
    }

    #[test]
    fn second_failure_is_reported() {
        let l = llm(&["```json\n{}\n```", "{}"]);
        let err = l
            .call_json(TemplateId::E0, vars([("text", "t".into())]), ExpectedShape::JsonObject, parse_infos)
            .unwrap_err();
        assert!(matches!(err, LlmError::InvalidResponse { template: TemplateId::E0, .. }));
    }

    #[test]
    fn corrective_prompt_differs() {
        let lib = PromptLibrary::bundled();
        let r = LlmRequest::new(&lib, TemplateId::E0, vars([("text", "x".into())]), 0.0, ExpectedShape::JsonObject).unwrap();
        let c = r.corrective();
        assert_ne!(r.hash(), c.hash());
        assert!(c.prompt.starts_with(&r.prompt));
        assert!(LlmRequest::new(&lib, TemplateId::E0, vars([("text", "x".into())]), 2.5, ExpectedShape::Text).is_err());
    }
}
