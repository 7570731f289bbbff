//! Sentence embedding providers.
//!
//! The default [`HashingEmbedder`] needs no model weights or network: it maps
//! content words, word bigrams and character trigrams into a fixed number of
//! signed buckets and L2-normalizes. Identical texts get identical vectors and
//! texts sharing vocabulary land close together, which is what the consensus
//! clustering relies on. [`HttpEmbedder`] talks to an OpenAI-compatible
//! `/embeddings` endpoint for live runs, and [`FixtureEmbedder`] records or
//! replays vectors by text hash.

use std::time::Duration;

use serde_json::{json, Value};
use thiserror::Error;

use crate::llm::{prompt_hash, FixtureStore};
use crate::text;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("embedding transport error: {0}")]
    Transport(String),
    #[error("embedding replay miss for text hash {0}")]
    ReplayMiss(String),
    #[error("embedding provider returned {got} vectors of dim {dim}, expected {want}")]
    Shape { got: usize, dim: usize, want: usize },
}

pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError>;
}

#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder { dim: 384 }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 2, "embedding dim must be at least 2");
        HashingEmbedder { dim }
    }

    fn add(&self, v: &mut [f64], feature: &str, weight: f64) {
        let h = fnv1a(feature.as_bytes());
        let idx = (h % self.dim as u64) as usize;
        let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
        v[idx] += sign * weight;
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let mut toks = text::content_tokens(text);
        if toks.is_empty() {
            toks = text::tokens(text);
        }
        for t in &toks {
            self.add(&mut v, &format!("w:{t}"), 1.0);
            let padded: Vec<char> = format!("<{t}>").chars().collect();
            for tri in padded.windows(3) {
                self.add(&mut v, &format!("c:{}", tri.iter().collect::<String>()), 0.3);
            }
        }
        for pair in toks.windows(2) {
            self.add(&mut v, &format!("b:{} {}", pair[0], pair[1]), 0.5);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn name(&self) -> &str {
        "hashing-ngram"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// OpenAI-compatible embeddings endpoint.
pub struct HttpEmbedder {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    dim: usize,
    http: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(endpoint: &str, model: &str, api_key: Option<String>, dim: usize) -> Result<Self, EmbedError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| EmbedError::Transport(e.to_string()))?;
        Ok(HttpEmbedder { endpoint: endpoint.into(), model: model.into(), api_key, dim, http })
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn name(&self) -> &str {
        &self.model
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let mut req = self.http.post(&self.endpoint).json(&json!({"model": self.model, "input": texts}));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| EmbedError::Transport(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(EmbedError::Transport(format!("HTTP {}", resp.status())));
        }
        let body: Value = resp.json().map_err(|e| EmbedError::Transport(e.to_string()))?;
        let data = body.get("data").and_then(Value::as_array).cloned().unwrap_or_default();
        let out: Vec<Vec<f64>> = data
            .iter()
            .map(|d| {
                d.get("embedding")
                    .and_then(Value::as_array)
                    .map(|a| a.iter().filter_map(Value::as_f64).collect())
                    .unwrap_or_default()
            })
            .collect();
        let bad = out.iter().find(|v| v.len() != self.dim).map(Vec::len);
        if out.len() != texts.len() || bad.is_some() {
            return Err(EmbedError::Shape { got: out.len(), dim: bad.unwrap_or(self.dim), want: self.dim });
        }
        Ok(out)
    }
}

/// Records vectors from an inner provider, or replays them when there is none.
pub struct FixtureEmbedder {
    inner: Option<Box<dyn EmbeddingProvider>>,
    store: FixtureStore,
    name: String,
    dim: usize,
}

impl FixtureEmbedder {
    pub fn recording(inner: Box<dyn EmbeddingProvider>, store: FixtureStore) -> Self {
        let (name, dim) = (inner.name().to_string(), inner.dim());
        FixtureEmbedder { inner: Some(inner), store, name, dim }
    }

    pub fn replay(name: &str, dim: usize, store: FixtureStore) -> Self {
        FixtureEmbedder { inner: None, store, name: name.into(), dim }
    }

    fn key(&self, text: &str) -> String {
        prompt_hash(&format!("embed\n{}\n{}", self.name, text))
    }
}

impl EmbeddingProvider for FixtureEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        match &self.inner {
            Some(inner) => {
                let out = inner.embed(texts)?;
                for (t, v) in texts.iter().zip(&out) {
                    let body = serde_json::to_string(v).map_err(|e| EmbedError::Transport(e.to_string()))?;
                    self.store.put(&self.key(t), &body).map_err(|e| EmbedError::Transport(e.to_string()))?;
                }
                Ok(out)
            }
            None => texts
                .iter()
                .map(|t| {
                    let key = self.key(t);
                    let raw = self.store.get(&key).ok_or_else(|| EmbedError::ReplayMiss(key.clone()))?;
                    serde_json::from_str(&raw).map_err(|_| EmbedError::ReplayMiss(key))
                })
                .collect(),
        }
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashing_embedder_contract() {
        let e = HashingEmbedder::default();
        let v = e.embed(&["Home".into(), "Home".into(), "".into(), "University library".into()]).unwrap();
        assert_eq!(v[0], v[1]);
        assert!(v.iter().all(|x| x.len() == 384));
        assert!(v[2].iter().all(|x| *x == 0.0));
        let n: f64 = v[3].iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shared_words_are_closer() {
        let e = HashingEmbedder::default();
        let a = e.embed_one("studied statistics in the library");
        let b = e.embed_one("reviewed statistics at the library");
        let c = e.embed_one("played badminton with friends");
        assert!(cosine(&a, &b) > cosine(&a, &c) + 0.3);
    }

    #[test]
    fn fixture_embedder_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = FixtureStore::new(dir.path());
        let rec = FixtureEmbedder::recording(Box::new(HashingEmbedder::new(8)), store.clone());
        let texts = vec!["alpha".to_string(), "beta".to_string()];
        let live = rec.embed(&texts).unwrap();
        let rep = FixtureEmbedder::replay("hashing-ngram", 8, store);
        assert_eq!(rep.embed(&texts).unwrap(), live);
        assert!(matches!(rep.embed(&["gamma".into()]), Err(EmbedError::ReplayMiss(_))));
    }
}
