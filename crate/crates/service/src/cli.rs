//! Command-line verbs. Each maps onto one pipeline operation; `hitl serve`
//! starts the HTTP service.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ptm_core::clock::FixedClock;
use ptm_core::config::{LlmMode, PipelineConfig};
use ptm_core::embed::HashingEmbedder;
use ptm_core::evaluation::EvalCondition;
use ptm_core::graph::{GraphNode, LayerTag};
use ptm_core::llm::{FixtureStore, RecordingClient, ScriptedClient};
use ptm_core::pipeline::{diff_digests, digest_user_dir, fixed_instant, run_through, HitlScript, Phase, Pipeline};
use ptm_core::prompts::PromptLibrary;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::api::{router, AppState};
use crate::settings;

#[derive(Debug, Parser)]
#[command(name = "ptm", version, about = "Build, refine and evaluate layered thinking models from journals")]
pub struct Cli {
    /// TOML config file; overrides PTM_* environment variables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    /// live, replay, record or scripted.
    #[arg(long, global = true)]
    pub mode: Option<String>,
    #[arg(long, global = true)]
    pub fixture_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub max_in_flight: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Append JSONL journal entries for a user ("-" reads stdin).
    Ingest {
        #[arg(long)]
        user: String,
        file: PathBuf,
    },
    /// Run one pipeline phase.
    Build {
        #[arg(long)]
        user: String,
        /// extract, phase1, phase2, evaluate_pre, hitl or evaluate_post.
        #[arg(long)]
        phase: Phase,
    },
    #[command(subcommand)]
    Hitl(HitlCommand),
    #[command(subcommand)]
    Eval(EvalCommand),
    #[command(subcommand)]
    Export(ExportCommand),
    #[command(subcommand)]
    Fixtures(FixturesCommand),
}

#[derive(Debug, Subcommand)]
pub enum HitlCommand {
    /// Serve the HTTP API.
    Serve {
        /// Defaults to 127.0.0.1:8080.
        #[arg(long)]
        addr: Option<String>,
        /// Require `Authorization: Bearer <token>` on user routes.
        #[arg(long, env = "PTM_API_TOKEN")]
        token: Option<String>,
    },
    /// Show the next pending fact-check item.
    Next {
        #[arg(long)]
        user: String,
    },
    /// Answer or skip an item.
    Answer {
        #[arg(long)]
        user: String,
        #[arg(long)]
        item: String,
        #[arg(long, required_unless_present = "skip")]
        answer: Option<String>,
        #[arg(long, conflicts_with = "answer")]
        skip: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    Run {
        #[arg(long)]
        user: String,
        #[arg(long)]
        condition: EvalCondition,
    },
}

#[derive(Debug, Subcommand)]
pub enum ExportCommand {
    Graph {
        #[arg(long)]
        user: String,
        #[arg(long)]
        version: Option<u64>,
        #[arg(long)]
        layer: Option<LayerTag>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Report {
        #[arg(long)]
        user: String,
        #[arg(long)]
        condition: EvalCondition,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Source {
    /// The configured live endpoint.
    Live,
    /// The built-in offline responder.
    Scripted,
}

#[derive(Debug, Args)]
pub struct FixtureRun {
    #[arg(long, default_value = "u01")]
    pub user: String,
    #[arg(long)]
    pub journals: PathBuf,
    /// JSON with `answers`, `likert_pre`, `likert_post`; adds the HITL
    /// session and the post evaluation.
    #[arg(long)]
    pub hitl_script: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum FixturesCommand {
    /// Run the pipeline and save every model reply under the fixture dir.
    Record {
        #[command(flatten)]
        run: FixtureRun,
        #[arg(long, value_enum, default_value = "live")]
        source: Source,
    },
    /// Replay the pipeline twice and compare every output file.
    Verify {
        #[command(flatten)]
        run: FixtureRun,
    },
}

impl Cli {
    fn flag_overlay(&self) -> Value {
        let mut out = Map::new();
        if let Some(d) = &self.data_dir {
            out.insert("data_dir".into(), json!(d));
        }
        if let Some(s) = self.seed {
            out.insert("seed".into(), json!(s));
        }
        let mut llm = Map::new();
        if let Some(m) = &self.mode {
            llm.insert("mode".into(), json!(m.to_lowercase()));
        }
        if let Some(f) = &self.fixture_dir {
            llm.insert("fixture_dir".into(), json!(f));
        }
        if let Some(n) = self.max_in_flight {
            llm.insert("max_in_flight".into(), json!(n));
        }
        if !llm.is_empty() {
            out.insert("llm".into(), Value::Object(llm));
        }
        Value::Object(out)
    }
}

fn print<T: Serialize>(v: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn read_input(file: &Path) -> Result<String> {
    if file == Path::new("-") {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s)?;
        return Ok(s);
    }
    std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))
}

fn read_script(path: Option<&Path>) -> Result<Option<HitlScript>> {
    path.map(|p| -> Result<HitlScript> {
        let text = read_input(p)?;
        serde_json::from_str(&text).with_context(|| format!("parsing HITL script {}", p.display()))
    })
    .transpose()
}

pub fn run(cli: Cli) -> Result<()> {
    let loaded = settings::load(cli.config.as_deref(), cli.flag_overlay(), |k| std::env::var(k).ok())?;
    let cfg = loaded.pipeline;
    match cli.command {
        Command::Ingest { user, file } => {
            let p = Pipeline::from_config(cfg)?;
            print(&p.ingest(&user, &read_input(&file)?)?, None)
        }
        Command::Build { user, phase } => run_phase(&Pipeline::from_config(cfg)?, &user, phase),
        Command::Eval(EvalCommand::Run { user, condition }) => {
            let phase = match condition {
                EvalCondition::Pre => Phase::EvaluatePre,
                EvalCondition::Post => Phase::EvaluatePost,
            };
            run_phase(&Pipeline::from_config(cfg)?, &user, phase)
        }
        Command::Hitl(HitlCommand::Serve { addr, token }) => {
            let addr = addr.or(loaded.server.addr).unwrap_or_else(|| "127.0.0.1:8080".into());
            let token = token.or(loaded.server.token);
            serve(Pipeline::from_config(cfg)?, &addr, token)
        }
        Command::Hitl(HitlCommand::Next { user }) => {
            let p = Pipeline::from_config(cfg)?;
            p.require_user(&user)?;
            let s = p.session(&user)?.context("no HITL session; run `ptm build --phase hitl` first")?;
            print(&json!({"item": s.next_pending(), "complete": s.is_complete()}), None)
        }
        Command::Hitl(HitlCommand::Answer { user, item, answer, skip }) => {
            let p = Pipeline::from_config(cfg)?;
            if skip {
                let (item, v) = p.skip_item(&user, &item)?;
                return print(&json!({"item": item, "graph_version": v}), None);
            }
            print(&p.answer_item(&user, &item, answer.as_deref().unwrap_or_default())?, None)
        }
        Command::Export(ExportCommand::Graph { user, version, layer, out }) => {
            let g = Pipeline::from_config(cfg)?.graph(&user, version)?;
            match layer {
                None => print(&g, out.as_deref()),
                Some(l) => print(&g.nodes().iter().filter(|n| n.layer() == l).collect::<Vec<&GraphNode>>(), out.as_deref()),
            }
        }
        Command::Export(ExportCommand::Report { user, condition, out }) => {
            let p = Pipeline::from_config(cfg)?;
            p.require_user(&user)?;
            let r = p.eval_report(&user, condition)?.with_context(|| format!("no {condition} evaluation report for {user}"))?;
            print(&r, out.as_deref())
        }
        Command::Fixtures(FixturesCommand::Record { run, source }) => record(cfg, &run, source),
        Command::Fixtures(FixturesCommand::Verify { run }) => verify(cfg, &run),
    }
}

fn run_phase(p: &Pipeline, user: &str, phase: Phase) -> Result<()> {
    let report = p.run_phase(user, phase)?;
    print(&report, None)?;
    if let Some(e) = report.error {
        bail!("{phase} failed: {e}");
    }
    Ok(())
}

fn serve(p: Pipeline, addr: &str, token: Option<String>) -> Result<()> {
    let state = Arc::new(AppState { pipeline: Arc::new(p), token });
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        tracing::info!(%addr, "serving /api/v1");
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .context("server error")
    })
}

fn fixture_dir(cfg: &PipelineConfig) -> Result<PathBuf> {
    cfg.llm.fixture_dir.clone().context("set --fixture-dir or llm.fixture_dir")
}

/// A fresh data directory per run so recorded state never mixes with the
/// configured one.
fn scratch(cfg: &PipelineConfig) -> Result<(tempfile::TempDir, PipelineConfig)> {
    let dir = tempfile::tempdir()?;
    let mut c = cfg.clone();
    c.data_dir = dir.path().to_path_buf();
    Ok((dir, c))
}

fn record(cfg: PipelineConfig, run: &FixtureRun, source: Source) -> Result<()> {
    let fixtures = fixture_dir(&cfg)?;
    let journals = read_input(&run.journals)?;
    let script = read_script(run.hitl_script.as_deref())?;
    let (_dir, mut c) = scratch(&cfg)?;
    c.llm.mode = LlmMode::Record;
    let p = match source {
        Source::Live => Pipeline::from_config(c)?,
        Source::Scripted => Pipeline::new(
            c,
            Arc::new(RecordingClient::new(ScriptedClient, FixtureStore::new(&fixtures))),
            Arc::new(PromptLibrary::bundled()),
            Arc::new(HashingEmbedder::new(cfg.embedding.dim)),
            Arc::new(FixedClock(fixed_instant())),
        ),
    };
    let runs = run_through(&p, &run.user, &journals, script.as_ref())?;
    let calls: usize = runs.iter().map(|r| r.llm_calls).sum();
    let stored = FixtureStore::new(&fixtures).hashes().len();
    print(&json!({"fixture_dir": fixtures, "runs": runs.len(), "llm_calls": calls, "fixtures": stored}), None)
}

fn verify(cfg: PipelineConfig, run: &FixtureRun) -> Result<()> {
    fixture_dir(&cfg)?;
    let journals = read_input(&run.journals)?;
    let script = read_script(run.hitl_script.as_deref())?;
    let mut digests = Vec::new();
    for _ in 0..2 {
        let (dir, mut c) = scratch(&cfg)?;
        c.llm.mode = LlmMode::Replay;
        let p = Pipeline::from_config(c)?;
        run_through(&p, &run.user, &journals, script.as_ref()).context("replay run failed")?;
        digests.push(digest_user_dir(p.data_dir(), &run.user)?);
        drop(dir);
    }
    let diff = diff_digests(&digests[0], &digests[1]);
    print(&json!({"files": digests[0].len(), "identical": diff.is_empty(), "differing": diff}), None)?;
    if !diff.is_empty() {
        bail!("replayed runs differ in {} file(s)", diff.len());
    }
    Ok(())
}
