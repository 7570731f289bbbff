//! Prompt template assets and rendering.
//!
//! The ten templates ship as plain-text files under `prompts/` together with a
//! `manifest.json` pinning each file's SHA-256, its declared placeholders and
//! an anchor phrase. Rendering is a single left-to-right pass: `{name}` is
//! replaced by the bound value, `{{` and `}}` emit literal braces, and
//! substituted values are never re-scanned.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("unknown template: {0}")]
    UnknownTemplate(String),
    #[error("unbound: {0}")]
    Unbound(String),
    #[error("undeclared variable: {0}")]
    Undeclared(String),
    #[error("malformed template {template}: {reason}")]
    Malformed { template: TemplateId, reason: String },
    #[error("asset hash mismatch for {template}: manifest {expected}, file {actual}")]
    HashMismatch { template: TemplateId, expected: String, actual: String },
    #[error("manifest error: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TemplateId {
    /// Key information extraction (journal text to 5W1H instances).
    E0,
    /// L1 pattern synthesis from a consensus cluster.
    IO,
    /// Analytical dimension generation.
    GD,
    /// Dimension-guided clustering of node labels.
    CD,
    /// Higher-layer insight synthesis.
    ID,
    /// Node refinement from user feedback.
    NR,
    /// Question / ground-truth generation.
    QA,
    /// Context-restricted answering.
    CA,
    /// Atomic point matching of prediction against ground truth.
    PE,
    /// Label selection for retrieval.
    LS,
}

impl TemplateId {
    pub const ALL: [TemplateId; 10] = [
        TemplateId::E0,
        TemplateId::IO,
        TemplateId::GD,
        TemplateId::CD,
        TemplateId::ID,
        TemplateId::NR,
        TemplateId::QA,
        TemplateId::CA,
        TemplateId::PE,
        TemplateId::LS,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::E0 => "E0",
            TemplateId::IO => "IO",
            TemplateId::GD => "GD",
            TemplateId::CD => "CD",
            TemplateId::ID => "ID",
            TemplateId::NR => "NR",
            TemplateId::QA => "QA",
            TemplateId::CA => "CA",
            TemplateId::PE => "PE",
            TemplateId::LS => "LS",
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| PromptError::UnknownTemplate(s.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: TemplateId,
    pub file: String,
    pub sha256: String,
    pub placeholders: Vec<String>,
    pub anchor: String,
    /// Alternative binding names mapped onto declared placeholders.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub aliases: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub templates: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
enum Piece {
    Text(String),
    Slot(String),
}

#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub body: String,
    pub placeholders: BTreeSet<String>,
    pub anchor: String,
    pub sha256: String,
    aliases: BTreeMap<String, String>,
    pieces: Vec<Piece>,
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn parse_body(id: TemplateId, body: &str) -> Result<Vec<Piece>, PromptError> {
    let malformed = |reason: String| PromptError::Malformed { template: id, reason };
    let mut pieces = Vec::new();
    let mut text = String::new();
    let mut rest = body;
    while let Some(pos) = rest.find(['{', '}']) {
        text.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if tail.starts_with("{{") {
            text.push('{');
            rest = &tail[2..];
        } else if tail.starts_with("}}") {
            text.push('}');
            rest = &tail[2..];
        } else if tail.starts_with('}') {
            return Err(malformed(format!("lone '}}' at byte {}", body.len() - tail.len())));
        } else {
            let end = tail.find('}').ok_or_else(|| malformed("unterminated placeholder".into()))?;
            let name = &tail[1..end];
            if !is_ident(name) {
                return Err(malformed(format!("invalid placeholder {{{name}}}")));
            }
            if !text.is_empty() {
                pieces.push(Piece::Text(std::mem::take(&mut text)));
            }
            pieces.push(Piece::Slot(name.to_string()));
            rest = &tail[end + 1..];
        }
    }
    text.push_str(rest);
    if !text.is_empty() {
        pieces.push(Piece::Text(text));
    }
    Ok(pieces)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl PromptTemplate {
    fn from_entry(entry: &ManifestEntry, body: String) -> Result<Self, PromptError> {
        let actual = sha256_hex(body.as_bytes());
        if actual != entry.sha256 {
            return Err(PromptError::HashMismatch { template: entry.id, expected: entry.sha256.clone(), actual });
        }
        let pieces = parse_body(entry.id, &body)?;
        let found: BTreeSet<String> = pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Slot(s) => Some(s.clone()),
                Piece::Text(_) => None,
            })
            .collect();
        let declared: BTreeSet<String> = entry.placeholders.iter().cloned().collect();
        if found != declared {
            return Err(PromptError::Malformed {
                template: entry.id,
                reason: format!("declared placeholders {declared:?} differ from body {found:?}"),
            });
        }
        if !body.contains(&entry.anchor) {
            return Err(PromptError::Malformed { template: entry.id, reason: "anchor phrase missing".into() });
        }
        Ok(PromptTemplate {
            id: entry.id,
            body,
            placeholders: declared,
            anchor: entry.anchor.clone(),
            sha256: actual,
            aliases: entry.aliases.clone(),
            pieces,
        })
    }

    /// Substitutes `vars` into the template. Every declared placeholder must be
    /// bound (directly or through an alias) and no other names may be passed.
    pub fn render(&self, vars: &BTreeMap<String, String>) -> Result<String, PromptError> {
        let mut bound: BTreeMap<&str, &str> = BTreeMap::new();
        for (name, value) in vars {
            let target = self.aliases.get(name).unwrap_or(name);
            if !self.placeholders.contains(target) {
                return Err(PromptError::Undeclared(name.clone()));
            }
            bound.insert(target.as_str(), value.as_str());
        }
        if let Some(missing) = self.placeholders.iter().find(|p| !bound.contains_key(p.as_str())) {
            return Err(PromptError::Unbound(missing.clone()));
        }
        let mut out = String::with_capacity(self.body.len());
        for piece in &self.pieces {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(s) => out.push_str(bound[s.as_str()]),
            }
        }
        Ok(out)
    }
}

const MANIFEST: &str = include_str!("../prompts/manifest.json");

fn bundled_body(file: &str) -> Option<&'static str> {
    Some(match file {
        "e0.txt" => include_str!("../prompts/e0.txt"),
        "io.txt" => include_str!("../prompts/io.txt"),
        "gd.txt" => include_str!("../prompts/gd.txt"),
        "cd.txt" => include_str!("../prompts/cd.txt"),
        "id.txt" => include_str!("../prompts/id.txt"),
        "nr.txt" => include_str!("../prompts/nr.txt"),
        "qa.txt" => include_str!("../prompts/qa.txt"),
        "ca.txt" => include_str!("../prompts/ca.txt"),
        "pe.txt" => include_str!("../prompts/pe.txt"),
        "ls.txt" => include_str!("../prompts/ls.txt"),
        _ => return None,
    })
}

/// Loaded, hash-verified template set. Immutable once built.
#[derive(Debug, Clone)]
pub struct PromptLibrary {
    templates: BTreeMap<TemplateId, PromptTemplate>,
    version_hash: String,
}

impl PromptLibrary {
    /// Templates compiled into the binary from the crate's `prompts/` directory.
    pub fn bundled() -> Self {
        let manifest: Manifest = serde_json::from_str(MANIFEST).expect("bundled manifest parses");
        Self::build(&manifest, |file| bundled_body(file).map(str::to_string))
            .expect("bundled prompt assets match their manifest")
    }

    /// Loads `manifest.json` and the template files from a directory.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| PromptError::Manifest(format!("{}: {e}", dir.display())))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| PromptError::Manifest(e.to_string()))?;
        Self::build(&manifest, |file| std::fs::read_to_string(dir.join(file)).ok())
    }

    fn build(manifest: &Manifest, read: impl Fn(&str) -> Option<String>) -> Result<Self, PromptError> {
        let mut templates = BTreeMap::new();
        let mut hasher = Sha256::new();
        for entry in &manifest.templates {
            let body = read(&entry.file).ok_or_else(|| PromptError::Manifest(format!("missing asset {}", entry.file)))?;
            let t = PromptTemplate::from_entry(entry, body)?;
            hasher.update(entry.id.as_str().as_bytes());
            hasher.update(t.sha256.as_bytes());
            templates.insert(entry.id, t);
        }
        if let Some(missing) = TemplateId::ALL.iter().find(|t| !templates.contains_key(t)) {
            return Err(PromptError::Manifest(format!("manifest lacks {missing}")));
        }
        Ok(PromptLibrary { templates, version_hash: hex::encode(hasher.finalize()) })
    }

    pub fn get(&self, id: TemplateId) -> &PromptTemplate {
        &self.templates[&id]
    }

    /// Hash over all template hashes; changes whenever any asset changes.
    pub fn version_hash(&self) -> &str {
        &self.version_hash
    }

    pub fn render(&self, id: TemplateId, vars: &BTreeMap<String, String>) -> Result<String, PromptError> {
        self.get(id).render(vars)
    }

    /// Renders by textual template id.
    pub fn render_named(&self, id: &str, vars: &BTreeMap<String, String>) -> Result<String, PromptError> {
        self.render(id.parse()?, vars)
    }
}

impl Default for PromptLibrary {
    fn default() -> Self {
        Self::bundled()
    }
}

/// Convenience for building variable maps.
pub fn vars<const N: usize>(pairs: [(&str, String); N]) -> BTreeMap<String, String> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_assets_verify() {
        let lib = PromptLibrary::bundled();
        assert_eq!(lib.version_hash().len(), 64);
        for id in TemplateId::ALL {
            assert!(lib.get(id).body.contains(&lib.get(id).anchor));
        }
    }

    #[test]
    fn ca_renders_with_aliases() {
        let lib = PromptLibrary::bundled();
        let out = lib
            .render(TemplateId::CA, &vars([("context", "ctx".into()), ("query", "q?".into())]))
            .unwrap();
        assert!(out.contains("Source Material Only"));
        assert!(out.contains("Context:\nctx\n"));
        assert!(out.contains("User Query:\nq?"));
    }

    #[test]
    fn unbound_placeholder_named() {
        let lib = PromptLibrary::bundled();
        assert_eq!(lib.render(TemplateId::E0, &BTreeMap::new()), Err(PromptError::Unbound("text".into())));
        assert!(matches!(lib.render_named("ZZ", &BTreeMap::new()), Err(PromptError::UnknownTemplate(_))));
        assert_eq!(
            lib.render(TemplateId::E0, &vars([("text", "a".into()), ("extra", "b".into())])),
            Err(PromptError::Undeclared("extra".into()))
        );
    }

    #[test]
    fn ls_substitutes_count() {
        let lib = PromptLibrary::bundled();
        let out = lib
            .render(
                TemplateId::LS,
                &vars([("num_target", "5".into()), ("query", "q".into()), ("label_data", "[]".into())]),
            )
            .unwrap();
        assert!(out.contains("exactly 5 unique numeric IDs"));
        assert!(!out.contains("{num_target}"));
    }

    #[test]
    fn doubled_braces_and_no_recursive_expansion() {
        let lib = PromptLibrary::bundled();
        let out = lib.render(TemplateId::E0, &vars([("text", "{text} {{x}}".into())])).unwrap();
        assert!(out.contains("Info = {\"WHAT\":str"));
        assert!(out.ends_with("Input text:\n{text} {{x}}\n"));
    }

    #[test]
    fn tampered_asset_is_rejected() {
        let manifest: Manifest = serde_json::from_str(MANIFEST).unwrap();
        let err = PromptLibrary::build(&manifest, |f| {
            bundled_body(f).map(|b| if f == "nr.txt" { b.replace("JSON", "json") } else { b.to_string() })
        })
        .unwrap_err();
        assert!(matches!(err, PromptError::HashMismatch { template: TemplateId::NR, .. }));
    }

    #[test]
    fn parser_rejects_lone_braces() {
        assert!(parse_body(TemplateId::E0, "a } b").is_err());
        assert!(parse_body(TemplateId::E0, "a {b c} d").is_err());
        assert!(parse_body(TemplateId::E0, "a {b").is_err());
    }
}
