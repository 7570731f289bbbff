//! Phase orchestration: extract → phase1 → phase2 → evaluate_pre → hitl →
//! evaluate_post. Each phase run commits exactly one graph snapshot and
//! writes a run report.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abstraction::{build_higher_layers, AbstractionError};
use crate::clock::{Clock, FixedClock, SystemClock};
use crate::config::{EmbeddingKind, LlmMode, PipelineConfig};
use crate::consensus::{build_consensus, cluster_all_attributes, form_clusters, number_l1, synthesize_l1, ConsensusError};
use crate::embed::{EmbedError, EmbeddingProvider, FixtureEmbedder, HashingEmbedder, HttpEmbedder};
use crate::evaluation::likert::{load_likert, record_likert};
use crate::evaluation::{
    build_testset, run_evaluation, write_report_csv, EvalCondition, EvalError, EvalInputs, EvalReport, LikertPhase,
    LikertRecord, QaItem, RunEvalError,
};
use crate::graph::{
    write_json_atomic, BehavioralInstance, DataDir, GraphError, GraphNode, GraphStore, LayerTag, LayeredGraph,
    PhaseState, RevisionLogEntry,
};
use crate::hitl::{self, AnswerOutcome, HitlError, HitlSession};
use crate::ingestion::{extract_l0, ingest, load_corpus, save_corpus, IngestReport, JournalEntry};
use crate::llm::{
    bounded_map, FixtureStore, HttpLlmClient, LiveConfig, Llm, LlmClient, LlmError, RecordingClient, ReplayClient,
    ScriptedClient,
};
use crate::prompts::PromptLibrary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Extract,
    Phase1,
    Phase2,
    EvaluatePre,
    Hitl,
    EvaluatePost,
}

impl Phase {
    pub const ALL: [Phase; 6] =
        [Phase::Extract, Phase::Phase1, Phase::Phase2, Phase::EvaluatePre, Phase::Hitl, Phase::EvaluatePost];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Extract => "extract",
            Phase::Phase1 => "phase1",
            Phase::Phase2 => "phase2",
            Phase::EvaluatePre => "evaluate_pre",
            Phase::Hitl => "hitl",
            Phase::EvaluatePost => "evaluate_post",
        }
    }

    pub fn prerequisite(self) -> Option<Phase> {
        let i = Phase::ALL.iter().position(|&p| p == self).expect("listed");
        i.checked_sub(1).map(|j| Phase::ALL[j])
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Phase {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Phase::ALL.into_iter().find(|p| p.as_str() == s).ok_or_else(|| {
            format!("unknown phase {s:?}; expected one of {}", Phase::ALL.map(Phase::as_str).join(", "))
        })
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Graph(GraphError),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error("{0}")]
    Io(String),
}

impl From<GraphError> for PipelineError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::NotFound(s) => PipelineError::NotFound(s),
            other => PipelineError::Graph(other),
        }
    }
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Io(e.to_string())
    }
}

impl From<HitlError> for PipelineError {
    fn from(e: HitlError) -> Self {
        match e {
            HitlError::Precondition(s) => PipelineError::Precondition(s),
            HitlError::UnknownItem(s) => PipelineError::NotFound(format!("item {s}")),
            e @ (HitlError::NotPending { .. } | HitlError::EmptyAnswer) => PipelineError::Invalid(e.to_string()),
            HitlError::Llm(e) => PipelineError::Llm(e),
            HitlError::Graph(e) => e.into(),
            HitlError::Io(s) => PipelineError::Io(s),
        }
    }
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Precondition(s) => PipelineError::Precondition(s),
            EvalError::Llm(e) => PipelineError::Llm(e),
        }
    }
}

impl From<RunEvalError> for PipelineError {
    fn from(e: RunEvalError) -> Self {
        match e {
            RunEvalError::Eval(e) => e.into(),
            RunEvalError::Embed(e) => PipelineError::Embed(e),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub user_id: String,
    pub phase: Phase,
    pub status: RunStatus,
    pub started_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
    pub duration_ms: u64,
    pub graph_version: Option<u64>,
    pub counts: BTreeMap<String, u64>,
    pub dropped: Vec<String>,
    pub llm_calls: usize,
    pub llm_reasks: usize,
    pub llm_calls_by_template: BTreeMap<String, usize>,
    pub prompt_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub completed: Vec<Phase>,
    pub last_run: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestOutcome {
    #[serde(flatten)]
    pub report: IngestReport,
    pub graph_version: u64,
}

/// What a phase produced before its snapshot is committed.
struct PhaseOutput {
    graph: LayeredGraph,
    counts: BTreeMap<String, u64>,
    dropped: Vec<String>,
}

/// The instant used for every timestamp under deterministic modes.
pub fn fixed_instant() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2025, 10, 1, 0, 0, 0).single().expect("valid instant")
}

pub struct Pipeline {
    pub config: PipelineConfig,
    store: GraphStore,
    client: Arc<dyn LlmClient>,
    prompts: Arc<PromptLibrary>,
    embedder: Arc<dyn EmbeddingProvider>,
    clock: Arc<dyn Clock>,
    run_ids: std::sync::Mutex<()>,
}

impl Pipeline {
    pub fn new(
        config: PipelineConfig,
        client: Arc<dyn LlmClient>,
        prompts: Arc<PromptLibrary>,
        embedder: Arc<dyn EmbeddingProvider>,
        clock: Arc<dyn Clock>,
    ) -> Self {
        let store = GraphStore::new(DataDir::new(config.data_dir.clone()));
        Pipeline { config, store, client, prompts, embedder, clock, run_ids: std::sync::Mutex::new(()) }
    }

    /// Builds clients for the configured mode. Replay and scripted runs use a
    /// fixed clock.
    pub fn from_config(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate().map_err(PipelineError::Invalid)?;
        let prompts = Arc::new(PromptLibrary::bundled());
        let fixtures = || -> Result<FixtureStore, PipelineError> {
            let dir = config.llm.fixture_dir.clone().ok_or_else(|| {
                PipelineError::Invalid(format!("mode {:?} needs llm.fixture_dir", config.llm.mode))
            })?;
            Ok(FixtureStore::new(dir))
        };
        let live = || -> Result<HttpLlmClient, PipelineError> {
            let endpoint = config
                .llm
                .endpoint
                .clone()
                .ok_or_else(|| PipelineError::Invalid("live mode needs llm.endpoint (PTM_LLM_ENDPOINT)".into()))?;
            Ok(HttpLlmClient::new(LiveConfig {
                endpoint,
                api_key: config.llm.api_key.clone(),
                model: config.llm.model_name.clone(),
                timeout_secs: config.llm.timeout_secs,
                ..LiveConfig::default()
            })?)
        };
        let client: Arc<dyn LlmClient> = match config.llm.mode {
            LlmMode::Replay => Arc::new(ReplayClient::new(fixtures()?)),
            LlmMode::Live => Arc::new(live()?),
            LlmMode::Record => Arc::new(RecordingClient::new(live()?, fixtures()?)),
            LlmMode::Scripted => Arc::new(ScriptedClient),
        };
        let emb = &config.embedding;
        let embedder: Arc<dyn EmbeddingProvider> = match emb.provider {
            EmbeddingKind::Hashing => Arc::new(HashingEmbedder::new(emb.dim)),
            EmbeddingKind::Http => {
                let http = || -> Result<HttpEmbedder, PipelineError> {
                    let endpoint = emb
                        .endpoint
                        .as_deref()
                        .ok_or_else(|| PipelineError::Invalid("http embeddings need embedding.endpoint".into()))?;
                    Ok(HttpEmbedder::new(endpoint, &emb.model_name, config.llm.api_key.clone(), emb.dim)?)
                };
                match config.llm.mode {
                    LlmMode::Replay => Arc::new(FixtureEmbedder::replay(&emb.model_name, emb.dim, fixtures()?)),
                    LlmMode::Record => Arc::new(FixtureEmbedder::recording(Box::new(http()?), fixtures()?)),
                    _ => Arc::new(http()?),
                }
            }
        };
        let clock: Arc<dyn Clock> = match config.llm.mode {
            LlmMode::Replay | LlmMode::Scripted => Arc::new(FixedClock(fixed_instant())),
            _ => Arc::new(SystemClock),
        };
        Ok(Pipeline::new(config, client, prompts, embedder, clock))
    }

    pub fn store(&self) -> &GraphStore {
        &self.store
    }

    pub fn data_dir(&self) -> &DataDir {
        self.store.data_dir()
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    fn llm(&self) -> Llm {
        Llm::new(self.client.clone(), self.prompts.clone(), self.config.llm.temperature)
    }

    fn max_in_flight(&self) -> usize {
        self.config.llm.max_in_flight.max(1)
    }

    fn lock(&self, user_id: &str) -> Arc<std::sync::Mutex<()>> {
        self.store.writer_lock(user_id)
    }

    pub fn user_exists(&self, user_id: &str) -> bool {
        DataDir::validate_user_id(user_id).is_ok() && self.data_dir().user_exists(user_id)
    }

    pub fn require_user(&self, user_id: &str) -> Result<(), PipelineError> {
        DataDir::validate_user_id(user_id)?;
        if !self.data_dir().user_exists(user_id) {
            return Err(PipelineError::NotFound(format!("user {user_id}")));
        }
        Ok(())
    }

    /// Stamps `graph` as the next committed version and persists it.
    fn commit(&self, mut graph: LayeredGraph) -> Result<LayeredGraph, PipelineError> {
        graph.version = self.store.latest_version(&graph.user_id).unwrap_or(0) + 1;
        self.store.commit(&graph)?;
        Ok(graph)
    }

    pub fn state(&self, user_id: &str) -> Result<PipelineState, PipelineError> {
        match std::fs::read(self.data_dir().state_path(user_id)) {
            Ok(b) => serde_json::from_slice(&b).map_err(|e| PipelineError::Io(e.to_string())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(PipelineState::default()),
            Err(e) => Err(e.into()),
        }
    }

    fn save_state(&self, user_id: &str, state: &PipelineState) -> Result<(), PipelineError> {
        Ok(write_json_atomic(&self.data_dir().state_path(user_id), state)?)
    }

    /// Appends journal lines and commits one snapshot. Completed phases are
    /// cleared since the corpus changed.
    pub fn ingest(&self, user_id: &str, jsonl: &str) -> Result<IngestOutcome, PipelineError> {
        DataDir::validate_user_id(user_id)?;
        let lock = self.lock(user_id);
        let _g = lock.lock().unwrap_or_else(|e| e.into_inner());
        let dir = self.data_dir();
        let mut corpus = load_corpus(dir, user_id)?;
        let report = ingest(&mut corpus, user_id, jsonl);
        if report.accepted == 0 && corpus.is_empty() {
            return Err(PipelineError::Invalid(format!(
                "no valid journal lines ({} rejected)",
                report.rejected.len()
            )));
        }
        save_corpus(dir, user_id, &corpus)?;
        let at = self.now();
        let graph = self.store.load_or_empty(user_id, at)?;
        let phase = if graph.phase_state == PhaseState::Empty { PhaseState::Ingested } else { graph.phase_state };
        let committed = self.commit(graph.with_phase(phase, at))?;
        if report.accepted > 0 {
            let mut state = self.state(user_id)?;
            state.completed.clear();
            self.save_state(user_id, &state)?;
        }
        Ok(IngestOutcome { report, graph_version: committed.version })
    }

    fn run_count(&self, user_id: &str) -> usize {
        std::fs::read_dir(self.data_dir().runs_dir(user_id))
            .into_iter()
            .flatten()
            .flatten()
            .filter(|e| e.file_name().to_string_lossy().ends_with(".json"))
            .count()
    }

    pub fn next_run_id(&self, user_id: &str) -> String {
        format!("run-{:04}", self.run_count(user_id) + 1)
    }

    fn run_path(&self, user_id: &str, run_id: &str) -> PathBuf {
        self.data_dir().runs_dir(user_id).join(format!("{run_id}.json"))
    }

    pub fn load_run(&self, user_id: &str, run_id: &str) -> Result<RunReport, PipelineError> {
        if !run_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-') {
            return Err(PipelineError::NotFound(format!("run {run_id}")));
        }
        let bytes = std::fs::read(self.run_path(user_id, run_id)).map_err(|_| PipelineError::NotFound(format!("run {run_id}")))?;
        serde_json::from_slice(&bytes).map_err(|e| PipelineError::Io(e.to_string()))
    }

    /// Checks ordering without running anything.
    pub fn check_prerequisite(&self, user_id: &str, phase: Phase) -> Result<(), PipelineError> {
        self.require_user(user_id)?;
        if let Some(pre) = phase.prerequisite() {
            if !self.state(user_id)?.completed.contains(&pre) {
                return Err(PipelineError::Precondition(format!("{phase} requires {pre} to complete first")));
            }
        }
        Ok(())
    }

    /// Runs one phase under a fresh run id.
    pub fn run_phase(&self, user_id: &str, phase: Phase) -> Result<RunReport, PipelineError> {
        let queued = self.queue_run(user_id, phase)?;
        self.run_phase_as(user_id, phase, &queued.run_id)
    }

    /// Checks ordering, reserves a run id and records the run as running.
    /// The caller executes it later with [`Pipeline::run_phase_as`].
    pub fn queue_run(&self, user_id: &str, phase: Phase) -> Result<RunReport, PipelineError> {
        self.check_prerequisite(user_id, phase)?;
        let _g = self.run_ids.lock().unwrap_or_else(|e| e.into_inner());
        let report = RunReport {
            run_id: self.next_run_id(user_id),
            user_id: user_id.into(),
            phase,
            status: RunStatus::Running,
            started_at: self.now(),
            finished_at: None,
            duration_ms: 0,
            graph_version: None,
            counts: BTreeMap::new(),
            dropped: Vec::new(),
            llm_calls: 0,
            llm_reasks: 0,
            llm_calls_by_template: BTreeMap::new(),
            prompt_version: self.prompts.version_hash().to_string(),
            error: None,
        };
        self.write_run(&report)?;
        Ok(report)
    }

    /// Runs one phase under `run_id`; phase failures are recorded in the
    /// returned report rather than returned as errors.
    pub fn run_phase_as(&self, user_id: &str, phase: Phase, run_id: &str) -> Result<RunReport, PipelineError> {
        self.check_prerequisite(user_id, phase)?;
        let lock = self.lock(user_id);
        let _g = lock.lock().unwrap_or_else(|e| e.into_inner());
        let llm = self.llm();
        let started = self.now();
        let watch = self.clock.stopwatch();
        let mut report = RunReport {
            run_id: run_id.into(),
            user_id: user_id.into(),
            phase,
            status: RunStatus::Running,
            started_at: started,
            finished_at: None,
            duration_ms: 0,
            graph_version: None,
            counts: BTreeMap::new(),
            dropped: Vec::new(),
            llm_calls: 0,
            llm_reasks: 0,
            llm_calls_by_template: BTreeMap::new(),
            prompt_version: self.prompts.version_hash().to_string(),
            error: None,
        };
        let result = self.execute(user_id, phase, run_id, &llm, started);
        let result = match result {
            Ok(out) => self.commit(out.graph).map(|g| (g, out.counts, out.dropped)),
            Err((partial, e)) => {
                if let Some(p) = partial {
                    if let Ok(g) = self.commit(p) {
                        report.graph_version = Some(g.version);
                    }
                }
                Err(e)
            }
        };
        match result {
            Ok((g, counts, dropped)) => {
                report.status = RunStatus::Succeeded;
                report.graph_version = Some(g.version);
                report.counts = counts;
                report.dropped = dropped;
                let mut state = self.state(user_id)?;
                let keep = Phase::ALL.iter().position(|&p| p == phase).expect("listed");
                state.completed.retain(|p| Phase::ALL.iter().position(|q| q == p).is_some_and(|i| i < keep));
                state.completed.push(phase);
                state.last_run = Some(run_id.into());
                self.save_state(user_id, &state)?;
            }
            Err(e) => {
                tracing::error!(%phase, error = %e, "phase failed");
                report.status = RunStatus::Failed;
                report.error = Some(e.to_string());
            }
        }
        let stats = llm.stats();
        report.llm_calls = stats.total;
        report.llm_reasks = stats.reasks;
        report.llm_calls_by_template = stats.by_template;
        report.finished_at = Some(self.now());
        report.duration_ms = watch.elapsed_ms();
        write_json_atomic(&self.run_path(user_id, run_id), &report)?;
        Ok(report)
    }

    /// Records a run that never got to start (for example a rejected job).
    pub fn write_run(&self, report: &RunReport) -> Result<(), PipelineError> {
        Ok(write_json_atomic(&self.run_path(&report.user_id, &report.run_id), report)?)
    }

    fn execute(
        &self,
        user_id: &str,
        phase: Phase,
        run_id: &str,
        llm: &Llm,
        at: DateTime<Utc>,
    ) -> Result<PhaseOutput, (Option<LayeredGraph>, PipelineError)> {
        let plain = |e: PipelineError| (None, e);
        match phase {
            Phase::Extract => self.extract(user_id, llm, at).map_err(plain),
            Phase::Phase1 => self.phase1(user_id, run_id, llm, at).map_err(plain),
            Phase::Phase2 => self.phase2(user_id, llm, at),
            Phase::EvaluatePre => self.evaluate(user_id, EvalCondition::Pre, llm, at).map_err(plain),
            Phase::Hitl => self.open_hitl(user_id, llm, at).map_err(plain),
            Phase::EvaluatePost => self.evaluate(user_id, EvalCondition::Post, llm, at).map_err(plain),
        }
    }

    fn extract(&self, user_id: &str, llm: &Llm, at: DateTime<Utc>) -> Result<PhaseOutput, PipelineError> {
        let corpus = load_corpus(self.data_dir(), user_id)?;
        if corpus.is_empty() {
            return Err(PipelineError::Precondition("no journal entries ingested".into()));
        }
        let base = self.store.load_or_empty(user_id, at)?;
        let results = bounded_map(&corpus, self.max_in_flight(), |e| extract_l0(llm, e));
        let mut instances: Vec<BehavioralInstance> = Vec::new();
        let mut dropped = Vec::new();
        for (entry, r) in corpus.iter().zip(results) {
            match r {
                Ok(x) => {
                    dropped.extend(x.dropped);
                    instances.extend(x.instances);
                }
                Err(LlmError::InvalidResponse { detail, .. }) => dropped.push(format!("{}: extraction failed: {detail}", entry.id)),
                Err(e) => return Err(e.into()),
            }
        }
        let mut fresh = LayeredGraph::new(user_id, at);
        fresh.version = base.version;
        let n = instances.len() as u64;
        let graph = fresh.put_nodes(instances.into_iter().map(GraphNode::from).collect(), at)?.with_phase(PhaseState::Ingested, at);
        let counts = BTreeMap::from([("entries".into(), corpus.len() as u64), ("l0_instances".into(), n)]);
        Ok(PhaseOutput { graph, counts, dropped })
    }

    fn phase1(&self, user_id: &str, run_id: &str, llm: &Llm, at: DateTime<Utc>) -> Result<PhaseOutput, PipelineError> {
        let graph = self.store.load_latest(user_id)?;
        let instances: Vec<BehavioralInstance> = graph.instances().cloned().collect();
        if instances.is_empty() {
            return Err(PipelineError::Precondition("no L0 instances; run extract first".into()));
        }
        let cfg = &self.config.consensus;
        let assignments = cluster_all_attributes(&instances, self.embedder.as_ref(), cfg)?;
        let dates: BTreeMap<String, chrono::NaiveDate> = instances.iter().map(|i| (i.id.clone(), i.date)).collect();
        let matrix = build_consensus(&assignments, &dates, cfg)?;
        let runs = self.data_dir().runs_dir(user_id);
        std::fs::create_dir_all(&runs)?;
        let mut csv_bytes = Vec::new();
        matrix.write_csv(&mut csv_bytes).map_err(|e| PipelineError::Io(e.to_string()))?;
        crate::graph::write_atomic(&runs.join(format!("{run_id}-consensus.csv")), &csv_bytes)?;
        let set = form_clusters(&matrix, &dates, cfg.tau);
        let by_id: BTreeMap<&str, &BehavioralInstance> = instances.iter().map(|i| (i.id.as_str(), i)).collect();
        let groups: Vec<Vec<&BehavioralInstance>> =
            set.clusters.iter().map(|c| c.iter().filter_map(|id| by_id.get(id.as_str()).copied()).collect()).collect();
        let results = bounded_map(&groups, self.max_in_flight(), |g| synthesize_l1(llm, g));
        let mut drafts = Vec::new();
        let mut dropped = Vec::new();
        for (g, r) in groups.iter().zip(results) {
            match r {
                Ok(s) => {
                    dropped.extend(s.drafts.is_empty().then(|| format!("cluster {}: no valid patterns", g[0].id)));
                    dropped.extend(s.dropped);
                    drafts.extend(s.drafts);
                }
                Err(LlmError::InvalidResponse { detail, .. }) => dropped.push(format!("cluster {}: {detail}", g[0].id)),
                Err(e) => return Err(e.into()),
            }
        }
        let nodes = number_l1(drafts);
        let counts = BTreeMap::from([
            ("clusters".into(), set.clusters.len() as u64),
            ("unclustered".into(), set.unclustered.len() as u64),
            ("l0_instances".into(), instances.len() as u64),
            ("l1_nodes".into(), nodes.len() as u64),
        ]);
        let graph = graph
            .truncate_above(LayerTag::L0, at)
            .put_nodes(nodes.into_iter().map(GraphNode::from).collect(), at)?
            .with_phase(PhaseState::L1Built, at);
        Ok(PhaseOutput { graph, counts, dropped })
    }

    fn phase2(&self, user_id: &str, llm: &Llm, at: DateTime<Utc>) -> Result<PhaseOutput, (Option<LayeredGraph>, PipelineError)> {
        let graph = self.store.load_latest(user_id).map_err(|e| (None, e.into()))?;
        // a rerun restarts from the L1 state
        let graph = if graph.phase_state > PhaseState::L1Built {
            graph.truncate_above(LayerTag::L1, at).with_phase(PhaseState::L1Built, at)
        } else {
            graph
        };
        match build_higher_layers(&graph, llm, &self.config.abstraction, self.max_in_flight(), at) {
            Ok((g, rep)) => {
                let mut counts: BTreeMap<String, u64> =
                    BTreeMap::from([("sampled_l1".into(), rep.sampled as u64), ("dimensions".into(), rep.dimensions as u64)]);
                for l in &rep.layers {
                    counts.insert(format!("{}_clusters", l.layer.to_lowercase()), l.clusters as u64);
                    counts.insert(format!("{}_nodes", l.layer.to_lowercase()), l.nodes as u64);
                }
                Ok(PhaseOutput { graph: g, counts, dropped: rep.dropped })
            }
            Err(AbstractionError::EmptyLayer { layer, partial }) => Err((
                Some(*partial),
                PipelineError::Precondition(format!("layer {layer} produced no nodes; partial graph committed")),
            )),
            Err(AbstractionError::Precondition(s)) => Err((None, PipelineError::Precondition(s))),
            Err(AbstractionError::Llm(e)) => Err((None, e.into())),
            Err(AbstractionError::Graph(e)) => Err((None, e.into())),
        }
    }

    fn eval_dir(&self, user_id: &str) -> PathBuf {
        self.data_dir().eval_dir(user_id)
    }

    pub fn testset(&self, user_id: &str) -> Result<Option<Vec<QaItem>>, PipelineError> {
        read_json(&self.eval_dir(user_id).join("testset.json"))
    }

    pub fn eval_report(&self, user_id: &str, condition: EvalCondition) -> Result<Option<EvalReport>, PipelineError> {
        read_json(&self.eval_dir(user_id).join(format!("report_{condition}.json")))
    }

    pub fn session(&self, user_id: &str) -> Result<Option<HitlSession>, PipelineError> {
        Ok(hitl::load_session(self.data_dir(), user_id)?)
    }

    pub fn likert(&self, user_id: &str) -> Result<Vec<LikertRecord>, PipelineError> {
        Ok(load_likert(self.data_dir(), user_id)?)
    }

    fn evaluate(&self, user_id: &str, condition: EvalCondition, llm: &Llm, at: DateTime<Utc>) -> Result<PhaseOutput, PipelineError> {
        let latest = self.store.load_latest(user_id)?;
        let mut graph = latest.with_phase(latest.phase_state, at);
        graph.version = self.store.latest_version(user_id).unwrap_or(0) + 1;
        let journals: Vec<JournalEntry> = load_corpus(self.data_dir(), user_id)?;
        let testset = match (condition, self.testset(user_id)?) {
            (EvalCondition::Post, Some(t)) => t,
            (EvalCondition::Post, None) => return Err(PipelineError::Precondition("no testset; run evaluate_pre first".into())),
            (EvalCondition::Pre, _) => {
                let t = build_testset(llm, &journals, &self.config.eval, self.config.seed)?;
                write_json_atomic(&self.eval_dir(user_id).join("testset.json"), &t)?;
                t
            }
        };
        let baseline = match condition {
            EvalCondition::Post => self.eval_report(user_id, EvalCondition::Pre)?,
            EvalCondition::Pre => None,
        };
        let session = match condition {
            EvalCondition::Post => self.session(user_id)?,
            EvalCondition::Pre => None,
        };
        let likert = self.likert(user_id)?;
        let inputs = EvalInputs {
            llm,
            provider: self.embedder.as_ref(),
            consensus: &self.config.consensus,
            config: &self.config.eval,
            max_in_flight: self.max_in_flight(),
            graph: &graph,
            journals: &journals,
            testset: &testset,
            likert: &likert,
            baseline: baseline.as_ref(),
            session: session.as_ref(),
        };
        let report = run_evaluation(condition, &inputs)?;
        let dir = self.eval_dir(user_id);
        write_json_atomic(&dir.join(format!("report_{condition}.json")), &report)?;
        write_report_csv(&report, &dir).map_err(|e| PipelineError::Io(e.to_string()))?;
        let mut dropped: Vec<String> = report
            .items
            .iter()
            .filter_map(|r| r.error.as_ref().map(|e| format!("{}: {e}", r.item_id)))
            .collect();
        dropped.sort();
        let counts = BTreeMap::from([
            ("testset_items".into(), testset.len() as u64),
            ("evaluated".into(), report.overall.n as u64),
            ("unanswered".into(), report.unanswered as u64),
            ("unevaluated".into(), report.unevaluated as u64),
            ("tp".into(), report.overall.tp),
            ("fp".into(), report.overall.fp),
            ("fn".into(), report.overall.fn_),
        ]);
        Ok(PhaseOutput { graph, counts, dropped })
    }

    fn open_hitl(&self, user_id: &str, llm: &Llm, at: DateTime<Utc>) -> Result<PhaseOutput, PipelineError> {
        let latest = self.store.load_latest(user_id)?;
        let mut session = hitl::open_session(llm, &latest, self.config.hitl.session_size, self.config.seed, self.max_in_flight())?;
        let graph = latest.with_phase(latest.phase_state, at);
        session.graph_version_pre = self.store.latest_version(user_id).unwrap_or(0) + 1;
        hitl::save_session(self.data_dir(), &session)?;
        let by_layer: BTreeSet<LayerTag> = session.items.iter().map(|i| i.layer).collect();
        let mut counts: BTreeMap<String, u64> = BTreeMap::from([("items".into(), session.items.len() as u64)]);
        for l in by_layer {
            counts.insert(format!("items_{}", l.to_string().to_lowercase()), session.items.iter().filter(|i| i.layer == l).count() as u64);
        }
        counts.insert("fallback_questions".into(), session.items.iter().filter(|i| i.fallback_question).count() as u64);
        Ok(PhaseOutput { graph, counts, dropped: session.warnings.clone() })
    }

    /// Refines the item's node from `answer`; one snapshot per refinement.
    pub fn answer_item(&self, user_id: &str, item_id: &str, answer: &str) -> Result<AnswerResult, PipelineError> {
        self.require_user(user_id)?;
        let lock = self.lock(user_id);
        let _g = lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut session = self.session(user_id)?.ok_or_else(|| PipelineError::NotFound("hitl session".into()))?;
        let graph = self.store.load_latest(user_id)?;
        let at = self.now();
        let llm = self.llm();
        let outcome = hitl::submit_answer(&mut session, &llm, &graph, item_id, answer, at)?;
        let item = session.item(item_id).cloned().expect("item exists after submit");
        let result = match outcome {
            AnswerOutcome::Refined { graph: g, record } => {
                let committed = self.commit(g)?;
                session.graph_version_post = Some(committed.version);
                let node = committed.get(&item.node_id).and_then(|n| n.as_synthesized()).cloned().expect("revised node");
                let rev = node.revisions.last().expect("revision appended");
                self.store.append_revision(
                    user_id,
                    &RevisionLogEntry {
                        version: committed.version,
                        node_id: node.id.clone(),
                        feedback_id: record.item_id.clone(),
                        timestamp: at,
                        prior_content: rev.prior_content.clone(),
                        updated_content: rev.updated_content.clone(),
                    },
                )?;
                AnswerResult { item, feedback: record, graph_version: Some(committed.version), node: Some(node), error: None }
            }
            AnswerOutcome::Failed { record, detail } => {
                let committed = self.bump(graph, at)?;
                AnswerResult { item, feedback: record, graph_version: Some(committed.version), node: None, error: Some(detail) }
            }
        };
        hitl::save_session(self.data_dir(), &session)?;
        Ok(result)
    }

    /// Commits `graph` unchanged under the next version, so every mutating
    /// call leaves exactly one snapshot behind.
    fn bump(&self, graph: LayeredGraph, at: DateTime<Utc>) -> Result<LayeredGraph, PipelineError> {
        let phase = graph.phase_state;
        self.commit(graph.with_phase(phase, at))
    }

    pub fn skip_item(&self, user_id: &str, item_id: &str) -> Result<(hitl::FactCheckItem, u64), PipelineError> {
        self.require_user(user_id)?;
        let lock = self.lock(user_id);
        let _g = lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut session = self.session(user_id)?.ok_or_else(|| PipelineError::NotFound("hitl session".into()))?;
        session.skip(item_id)?;
        let committed = self.bump(self.store.load_latest(user_id)?, self.now())?;
        hitl::save_session(self.data_dir(), &session)?;
        Ok((session.item(item_id).cloned().expect("item exists"), committed.version))
    }

    pub fn record_likert(
        &self,
        user_id: &str,
        node_id: &str,
        phase: LikertPhase,
        rating: i64,
    ) -> Result<(LikertRecord, u64), PipelineError> {
        self.require_user(user_id)?;
        if !(1..=5).contains(&rating) {
            return Err(PipelineError::Invalid(format!("rating {rating} is outside 1..5")));
        }
        let lock = self.lock(user_id);
        let _g = lock.lock().unwrap_or_else(|e| e.into_inner());
        let graph = self.store.load_latest(user_id)?;
        let at = self.now();
        let record = record_likert(self.data_dir(), &graph, node_id, phase, rating, at)?;
        let committed = self.bump(graph, at)?;
        Ok((record, committed.version))
    }

    pub fn graph(&self, user_id: &str, version: Option<u64>) -> Result<LayeredGraph, PipelineError> {
        self.require_user(user_id)?;
        Ok(match version {
            Some(v) => self.store.load(user_id, v)?,
            None => self.store.load_latest(user_id)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerResult {
    pub item: hitl::FactCheckItem,
    pub feedback: hitl::FeedbackRecord,
    pub graph_version: Option<u64>,
    pub node: Option<crate::graph::PtmNode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<Option<T>, PipelineError> {
    match std::fs::read(path) {
        Ok(b) => serde_json::from_slice(&b).map(Some).map_err(|e| PipelineError::Io(e.to_string())),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Answers and ratings replayed into a HITL session, one per item in item
/// order (cycled if shorter).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitlScript {
    pub answers: Vec<String>,
    pub likert_pre: Vec<i64>,
    pub likert_post: Vec<i64>,
}

fn ok_run(report: RunReport) -> Result<RunReport, PipelineError> {
    match report.error {
        Some(e) => Err(PipelineError::Precondition(format!("{} failed: {e}", report.phase))),
        None => Ok(report),
    }
}

/// Ingests `journals` and runs extract through evaluate_pre. With a script,
/// also opens the session, rates, answers, rates again and runs
/// evaluate_post.
pub fn run_through(
    p: &Pipeline,
    user_id: &str,
    journals: &str,
    script: Option<&HitlScript>,
) -> Result<Vec<RunReport>, PipelineError> {
    p.ingest(user_id, journals)?;
    let mut runs = Vec::new();
    for phase in [Phase::Extract, Phase::Phase1, Phase::Phase2, Phase::EvaluatePre] {
        runs.push(ok_run(p.run_phase(user_id, phase)?)?);
    }
    let Some(s) = script else { return Ok(runs) };
    if s.answers.is_empty() || s.likert_pre.is_empty() || s.likert_post.is_empty() {
        return Err(PipelineError::Invalid("HITL script needs answers and both rating lists".into()));
    }
    runs.push(ok_run(p.run_phase(user_id, Phase::Hitl)?)?);
    let items = p.session(user_id)?.map(|s| s.items).unwrap_or_default();
    for (i, item) in items.iter().enumerate() {
        p.record_likert(user_id, &item.node_id, LikertPhase::PreHitl, s.likert_pre[i % s.likert_pre.len()])?;
    }
    for (i, item) in items.iter().enumerate() {
        p.answer_item(user_id, &item.id, &s.answers[i % s.answers.len()])?;
    }
    for (i, item) in items.iter().enumerate() {
        p.record_likert(user_id, &item.node_id, LikertPhase::PostHitl, s.likert_post[i % s.likert_post.len()])?;
    }
    runs.push(ok_run(p.run_phase(user_id, Phase::EvaluatePost)?)?);
    Ok(runs)
}

/// SHA-256 of every file under the user's directory, keyed by relative path.
pub fn digest_user_dir(dir: &DataDir, user_id: &str) -> Result<BTreeMap<String, String>, PipelineError> {
    fn walk(root: &std::path::Path, at: &std::path::Path, out: &mut BTreeMap<String, String>) -> std::io::Result<()> {
        for entry in std::fs::read_dir(at)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
                out.insert(rel, crate::prompts::sha256_hex(&std::fs::read(&path)?));
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    let root = dir.user_dir(user_id);
    walk(&root, &root, &mut out)?;
    Ok(out)
}

/// Paths whose digests differ or that exist on one side only.
pub fn diff_digests(a: &BTreeMap<String, String>, b: &BTreeMap<String, String>) -> Vec<String> {
    let keys: BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    keys.into_iter().filter(|k| a.get(*k) != b.get(*k)).cloned().collect()
}
