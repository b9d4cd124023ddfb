//! Command-line interface. Machine-readable JSON goes to stdout, tables and
//! progress to stderr.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use chrono::{DateTime, TimeZone, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::answering::{Answerer, Ask, Route};
use crate::consolidation::{consolidate, ConsolidationConfig};
use crate::embedding::HashEmbedder;
use crate::evaluation::dataset::{load_dataset, load_qa, Dataset};
use crate::evaluation::{evaluate_question, summarize, write_jsonl, Benchmark, CategoryKind};
use crate::evolution::{ConversationInput, DiagnosisMode, EvolutionState, Evolver, GuardConfig};
use crate::extraction::{
    ingest_conversation, parse_session_date, sanitize_id, ExtractionConfig, Extractor,
};
use crate::gateway::{Gateway, HttpConfig, StubScript, API_KEY_ENV};
use crate::prompts::PromptLibrary;
use crate::retrieval::{RetrievalConfig, RetrievalIndex, Retriever};
use crate::store::{load_snapshot, save_snapshot, Clock, MemoryStatus, MemoryStore, Scope};

/// Clock used with the stub backend unless `--now` is given.
pub const STUB_EPOCH: &str = "2024-01-01T00:00:00Z";

#[derive(Debug, Parser)]
#[command(
    name = "memtune",
    version,
    about = "Agent memory with a self-tuning retrieval configuration"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract memories from a dataset's conversations into a store.
    Ingest(IngestArgs),
    /// Dedup, merge, decay and prune a store.
    Consolidate(ConsolidateArgs),
    /// Rank memories for a query.
    Query(QueryArgs),
    /// Answer one question from a store.
    Answer(AnswerArgs),
    /// Answer and score a QA set against a store.
    Evaluate(EvaluateArgs),
    /// Run the tuning loop.
    Evolve(EvolveArgs),
    /// Show store statistics, units or events.
    Inspect(InspectArgs),
    /// Export the best config, trajectory or transcript of a run.
    Export(ExportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Stub,
}

#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    #[arg(long, value_enum, default_value = "http")]
    pub backend: BackendKind,
    /// Script for the stub backend.
    #[arg(long)]
    pub stub_script: Option<PathBuf>,
    /// Base URL of an OpenAI-compatible endpoint.
    #[arg(long, default_value = "https://api.openai.com/v1")]
    pub endpoint: String,
    #[arg(long, default_value = "gpt-4o")]
    pub model: String,
    /// Seed for ids and perturbations; `evolve` falls back to the guards'
    /// seed, everything else to 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fixed current time (RFC 3339 or YYYY-MM-DD). Defaults to the system
    /// clock, or 2024-01-01 with the stub backend.
    #[arg(long)]
    pub now: Option<String>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    /// `user` or `user/workspace`.
    #[arg(long)]
    pub scope: Option<String>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct ConsolidateArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub scope: Option<String>,
    #[arg(long)]
    pub now: Option<String>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scope: Option<String>,
    #[arg(long)]
    pub category: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub top_n: usize,
    #[arg(long)]
    pub now: Option<String>,
    pub query: String,
}

#[derive(Debug, Args)]
pub struct AnswerArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scope: Option<String>,
    #[arg(long)]
    pub category: Option<String>,
    #[command(flatten)]
    pub backend: BackendArgs,
    pub question: String,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Full dataset; its conversations give each question its scope.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// QA file, or a dataset whose QA is used.
    #[arg(long)]
    pub qa: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scope: Option<String>,
    /// Directory for raw_results.jsonl and round_summary.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct EvolveArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub qa: Option<PathBuf>,
    /// Initial config; defaults to the baseline.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub guards: Option<PathBuf>,
    #[arg(long)]
    pub max_rounds: Option<usize>,
    #[arg(long, value_enum)]
    pub diagnosis: Option<DiagnosisArg>,
    /// Optional persistent store; otherwise the run uses a fresh one.
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub scope: Option<String>,
    /// Run directory; defaults to `runs/run-<seed>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DiagnosisArg {
    Llm,
    Rubric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InspectWhat {
    Stats,
    Units,
    Events,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, value_enum, default_value = "stats")]
    pub what: InspectWhat,
    #[arg(long)]
    pub scope: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportWhat {
    BestConfig,
    Trajectory,
    Transcript,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Run directory written by `evolve`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, value_enum)]
    pub what: ExportWhat,
    /// Destination; defaults to a file next to the run.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Written to the run directory before round 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub dataset: Option<String>,
    pub qa: Option<String>,
    pub initial_config: Option<String>,
    pub guards: GuardConfig,
    pub backend: BackendKind,
    pub model: String,
    pub seed: u64,
    pub engine_version: String,
    pub created_at: DateTime<Utc>,
}

fn parse_now(raw: &str) -> Result<DateTime<Utc>> {
    parse_session_date(raw).ok_or_else(|| anyhow!("cannot parse time `{raw}`"))
}

fn resolve_now(now: Option<&str>, backend: Option<BackendKind>) -> Result<Option<DateTime<Utc>>> {
    match (now, backend) {
        (Some(raw), _) => parse_now(raw).map(Some),
        (None, Some(BackendKind::Stub)) => parse_now(STUB_EPOCH).map(Some),
        _ => Ok(None),
    }
}

fn build_gateway(args: &BackendArgs) -> Result<Gateway> {
    match args.backend {
        BackendKind::Stub => {
            let script = match &args.stub_script {
                Some(path) => {
                    let raw = std::fs::read_to_string(path)
                        .with_context(|| format!("reading stub script {}", path.display()))?;
                    StubScript::from_json(&raw)
                        .with_context(|| format!("parsing stub script {}", path.display()))?
                }
                None => StubScript::default(),
            };
            Ok(Gateway::stub(script))
        }
        BackendKind::Http => {
            let cfg = HttpConfig::new(&args.endpoint, &args.model);
            if cfg.api_key.is_none() {
                log::warn!("{API_KEY_ENV} is not set; requests go out unauthenticated");
            }
            Ok(Gateway::http(cfg)?)
        }
    }
}

/// Parses `user` or `user/workspace`.
pub fn parse_scope(raw: Option<&str>) -> Result<(String, Option<String>)> {
    let Some(raw) = raw else {
        return Ok(("user".into(), None));
    };
    let mut parts = raw.splitn(2, '/');
    let user = parts.next().unwrap_or_default().trim();
    if user.is_empty() {
        bail!("scope `{raw}` has no user");
    }
    let ws = parts
        .next()
        .map(|w| w.trim().to_string())
        .filter(|w| !w.is_empty());
    Ok((user.to_string(), ws))
}

/// The scope a conversation's memories live in: the workspace is the
/// given one, suffixed with the sample id when the dataset holds several
/// conversations, or the sample id alone when none is given.
pub fn conversation_scope(
    scope: &(String, Option<String>),
    sample_id: &str,
    conversations: usize,
) -> Result<Scope> {
    let sample = sanitize_id(sample_id);
    let ws = match &scope.1 {
        Some(ws) if conversations > 1 => format!("{ws}_{sample}"),
        Some(ws) => ws.clone(),
        None => sample,
    };
    Ok(Scope::new(&scope.0, &ws)?)
}

fn fixed_scope(scope: &(String, Option<String>)) -> Result<Scope> {
    Ok(Scope::new(
        &scope.0,
        scope.1.as_deref().unwrap_or("default"),
    )?)
}

fn open_store(path: &Path) -> Result<MemoryStore> {
    if !path.exists() {
        bail!("store {} does not exist", path.display());
    }
    load_snapshot(path).with_context(|| format!("loading store {}", path.display()))
}

/// Seeds the id generator from the seed and the store's history so that
/// repeated commands on one store never reuse ids.
fn prepare_store(store: &mut MemoryStore, seed: u64, now: Option<DateTime<Utc>>) {
    store.reseed_ids(seed.wrapping_add(store.events().len() as u64));
    if let Some(t) = now {
        store.set_clock(Clock::Fixed(t));
    }
}

fn load_config(path: Option<&Path>) -> Result<RetrievalConfig> {
    match path {
        None => Ok(RetrievalConfig::default()),
        Some(p) => {
            let cfg = RetrievalConfig::load(p)
                .with_context(|| format!("loading config {}", p.display()))?;
            for e in cfg.validate() {
                log::warn!("config {}: {e}; clamped", p.display());
            }
            Ok(cfg.clamped())
        }
    }
}

fn print_json(v: &impl Serialize) {
    use std::io::Write;
    let line = serde_json::to_string(v).expect("output serializes");
    // A closed pipe (`| head`) is not an error for a reporting command.
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn index_for(store: &MemoryStore, scope: Option<&str>) -> Result<RetrievalIndex> {
    Ok(match scope {
        Some(raw) => {
            let s = parse_scope(Some(raw))?;
            match s.1 {
                Some(_) => RetrievalIndex::build(store, &fixed_scope(&s)?),
                None => RetrievalIndex::from_units(
                    store.units().filter(|u| u.scope.user == s.0).cloned(),
                ),
            }
        }
        None => RetrievalIndex::from_units(store.units().cloned()),
    })
}

/// Conversations to evaluate or evolve on.
fn load_inputs(
    dataset: Option<&Path>,
    qa: Option<&Path>,
    scope_arg: Option<&str>,
) -> Result<(Benchmark, Vec<ConversationInput>)> {
    let scope = parse_scope(scope_arg)?;
    let data: Option<Dataset> = dataset
        .map(|p| load_dataset(p).with_context(|| format!("loading dataset {}", p.display())))
        .transpose()?;
    let override_qa = qa
        .map(|p| load_qa(p).with_context(|| format!("loading QA {}", p.display())))
        .transpose()?;
    match (data, override_qa) {
        (Some(d), None) => {
            let n = d.conversations.len();
            let inputs = d
                .conversations
                .into_iter()
                .map(|c| {
                    Ok(ConversationInput {
                        scope: conversation_scope(&scope, &c.sample_id, n)?,
                        sessions: c.sessions,
                        qa: c.qa,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((d.benchmark, inputs))
        }
        (Some(d), Some((bench, items))) => {
            if d.conversations.len() != 1 {
                bail!("--qa needs a dataset with exactly one conversation");
            }
            let c = d
                .conversations
                .into_iter()
                .next()
                .expect("one conversation");
            Ok((
                bench,
                vec![ConversationInput {
                    scope: conversation_scope(&scope, &c.sample_id, 1)?,
                    sessions: c.sessions,
                    qa: items,
                }],
            ))
        }
        (None, Some((bench, items))) => Ok((
            bench,
            vec![ConversationInput {
                scope: fixed_scope(&scope)?,
                sessions: Vec::new(),
                qa: items,
            }],
        )),
        (None, None) => bail!("give --dataset, --qa or both"),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Consolidate(a) => cmd_consolidate(a),
        Command::Query(a) => cmd_query(a),
        Command::Answer(a) => cmd_answer(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Evolve(a) => cmd_evolve(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Export(a) => cmd_export(a),
    }
}

/// Entry point of the binary; returns the process exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn cmd_ingest(a: IngestArgs) -> Result<()> {
    let data = load_dataset(&a.dataset)
        .with_context(|| format!("loading dataset {}", a.dataset.display()))?;
    let now = resolve_now(a.backend.now.as_deref(), Some(a.backend.backend))?;
    let mut store = if a.store.exists() {
        open_store(&a.store)?
    } else {
        MemoryStore::new()
    };
    prepare_store(&mut store, a.backend.seed.unwrap_or(0), now);
    let gateway = build_gateway(&a.backend)?;
    let prompts = PromptLibrary::builtin();
    let embedder = HashEmbedder::default();
    let extractor = Extractor::new(&gateway, &prompts, ExtractionConfig::default());
    let scope = parse_scope(a.scope.as_deref())?;
    let n = data.conversations.len();
    let mut reports = Vec::new();
    for c in &data.conversations {
        let s = conversation_scope(&scope, &c.sample_id, n)?;
        let report = ingest_conversation(&c.sessions, &s, &extractor, &embedder, &mut store)?;
        reports.push(json!({
            "sample_id": c.sample_id,
            "scope": s.to_string(),
            "summary": report.summary,
        }));
    }
    save_snapshot(&store, &a.store).with_context(|| format!("saving {}", a.store.display()))?;
    print_json(&json!({
        "conversations": reports,
        "active_memories": store.active_count(),
        "total_memories": store.len(),
    }));
    Ok(())
}

fn cmd_consolidate(a: ConsolidateArgs) -> Result<()> {
    let mut store = open_store(&a.store)?;
    let now = match a.now.as_deref() {
        Some(raw) => parse_now(raw)?,
        None => store.clock().now(),
    };
    store.set_clock(Clock::Fixed(now));
    let scope = a
        .scope
        .as_deref()
        .map(|raw| parse_scope(Some(raw)).and_then(|s| fixed_scope(&s)))
        .transpose()?;
    let report = consolidate(
        &mut store,
        scope.as_ref(),
        now,
        &ConsolidationConfig::default(),
    )?;
    save_snapshot(&store, &a.store)?;
    print_json(&report);
    Ok(())
}

fn cmd_query(a: QueryArgs) -> Result<()> {
    let store = open_store(&a.store)?;
    let cfg = load_config(a.config.as_deref())?;
    let now = match a.now.as_deref() {
        Some(raw) => parse_now(raw)?,
        None => Utc
            .with_ymd_and_hms(2024, 1, 1, 0, 0, 0)
            .single()
            .expect("valid date"),
    };
    let index = index_for(&store, a.scope.as_deref())?;
    let prompts = PromptLibrary::builtin();
    let embedder = HashEmbedder::default();
    let retriever = Retriever::new(&index, &embedder, &prompts, now);
    let retrieval = retriever.retrieve(&a.query, a.category.as_deref(), &cfg)?;
    for (rank, c) in retrieval.candidates.iter().take(a.top_n).enumerate() {
        let mut v = serde_json::to_value(c).expect("candidates serialize");
        v["rank"] = json!(rank + 1);
        v["content"] = json!(index.unit(&c.memory_id).map(|u| u.content.clone()));
        print_json(&v);
    }
    Ok(())
}

fn cmd_answer(a: AnswerArgs) -> Result<()> {
    let store = open_store(&a.store)?;
    let cfg = load_config(a.config.as_deref())?;
    let now =
        resolve_now(a.backend.now.as_deref(), Some(a.backend.backend))?.unwrap_or_else(Utc::now);
    let gateway = build_gateway(&a.backend)?;
    let prompts = PromptLibrary::builtin();
    let embedder = HashEmbedder::default();
    let index = index_for(&store, a.scope.as_deref())?;
    let retriever = Retriever::new(&index, &embedder, &prompts, now).with_gateway(&gateway);
    let answerer = Answerer::new(&gateway, &prompts);
    let route = a
        .category
        .as_deref()
        .map(|c| CategoryKind::infer(c).route())
        .unwrap_or(Route::Default);
    let ask = Ask {
        question: &a.question,
        category: a.category.as_deref(),
        route,
        options: None,
    };
    let (result, retrieval) = answerer.answer_question(&ask, &retriever, &cfg)?;
    print_json(&json!({
        "answer": result,
        "sources": retrieval.candidates,
        "sub_queries": retrieval.sub_queries,
    }));
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let store = open_store(&a.store)?;
    let cfg = load_config(a.config.as_deref())?;
    let (benchmark, inputs) =
        load_inputs(a.dataset.as_deref(), a.qa.as_deref(), a.scope.as_deref())?;
    if inputs.iter().all(|i| i.qa.is_empty()) {
        bail!("the QA set is empty");
    }
    let now =
        resolve_now(a.backend.now.as_deref(), Some(a.backend.backend))?.unwrap_or_else(Utc::now);
    let gateway = build_gateway(&a.backend)?;
    let prompts = PromptLibrary::builtin();
    let embedder = HashEmbedder::default();
    let answerer = Answerer::new(&gateway, &prompts);
    let mut records = Vec::new();
    for input in &inputs {
        let index = RetrievalIndex::build(&store, &input.scope);
        let retriever = Retriever::new(&index, &embedder, &prompts, now).with_gateway(&gateway);
        for item in &input.qa {
            records.push(evaluate_question(
                item, benchmark, &answerer, &retriever, &cfg,
            ));
        }
    }
    let summary = summarize(0, benchmark, &records, &cfg);
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        write_jsonl(&out.join("raw_results.jsonl"), &records)?;
        std::fs::write(
            out.join("round_summary.json"),
            serde_json::to_string_pretty(&summary)? + "\n",
        )?;
    }
    eprintln!("{:<16} {:>6} {:>8}", "category", "n", "score");
    for (cat, score) in &summary.per_category {
        eprintln!(
            "{:<16} {:>6} {:>8.4}",
            cat, summary.category_counts[cat], score
        );
    }
    eprintln!(
        "{:<16} {:>6} {:>8.4}",
        "overall", summary.total_questions, summary.overall
    );
    print_json(&summary);
    Ok(())
}

fn cmd_evolve(a: EvolveArgs) -> Result<()> {
    let mut guards = match &a.guards {
        Some(p) => GuardConfig::load(p).map_err(|e| anyhow!(e))?,
        None => GuardConfig::default(),
    };
    if let Some(n) = a.max_rounds {
        guards.max_rounds = n;
    }
    if let Some(d) = a.diagnosis {
        guards.diagnosis_mode = match d {
            DiagnosisArg::Llm => DiagnosisMode::Llm,
            DiagnosisArg::Rubric => DiagnosisMode::Rubric,
        };
    }
    if let Some(seed) = a.backend.seed {
        guards.seed = seed;
    }
    let seed = guards.seed;
    guards
        .validate()
        .map_err(|e| anyhow!("invalid guards: {e}"))?;
    let theta0 = load_config(a.config.as_deref())?;
    let (benchmark, inputs) =
        load_inputs(a.dataset.as_deref(), a.qa.as_deref(), a.scope.as_deref())?;
    let now = resolve_now(a.backend.now.as_deref(), Some(a.backend.backend))?;
    let run_id = format!("run-{seed}");
    let run_dir = a
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(&run_id));
    std::fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    let manifest = RunManifest {
        run_id,
        dataset: a.dataset.as_ref().map(|p| p.display().to_string()),
        qa: a.qa.as_ref().map(|p| p.display().to_string()),
        initial_config: a.config.as_ref().map(|p| p.display().to_string()),
        guards: guards.clone(),
        backend: a.backend.backend,
        model: a.backend.model.clone(),
        seed,
        engine_version: env!("CARGO_PKG_VERSION").to_string(),
        created_at: now.unwrap_or_else(Utc::now),
    };
    std::fs::write(
        run_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    let transcript = run_dir.join("transcript.jsonl");
    if transcript.exists() {
        std::fs::remove_file(&transcript)?;
    }
    let gateway = build_gateway(&a.backend)?.with_transcript_file(&transcript)?;
    let mut store = match &a.store {
        Some(p) if p.exists() => open_store(p)?,
        _ => MemoryStore::new(),
    };
    prepare_store(&mut store, seed, now);
    let prompts = PromptLibrary::builtin();
    let embedder = HashEmbedder::default();
    let evolver = Evolver::new(&gateway, &prompts, &embedder, guards)
        .with_run_dir(&run_dir)
        .with_benchmark(benchmark, benchmark.as_str());
    let outcome = evolver.run(&inputs, &theta0, &mut store)?;
    drop(evolver);
    drop(gateway);
    if let Some(p) = &a.store {
        save_snapshot(&store, p)?;
    }
    eprintln!("{:<6} {:<8} {:>8}", "round", "stage", "score");
    for r in &outcome.rounds {
        let stage = r.branch.map_or("stop", |b| b.as_str());
        let mark = if r.degraded { " (degraded)" } else { "" };
        eprintln!("R{:<5} {:<8} {:>8.4}{mark}", r.round, stage, r.score);
    }
    let best_path = run_dir.join("best_config.json");
    eprintln!("best config: {}", best_path.display());
    print_json(&json!({
        "best_config": best_path.display().to_string(),
        "best_score": outcome.state.best_score,
        "best_round": outcome.state.best_round,
        "reason": outcome.state.reason,
        "rounds": outcome.rounds.iter().map(|r| json!({
            "round": r.round,
            "branch": r.branch.map_or("stop", |b| b.as_str()),
            "score": r.score,
            "degraded": r.degraded,
        })).collect::<Vec<_>>(),
        "discovered_dimensions": outcome.discovered.len(),
    }));
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let store = open_store(&a.store)?;
    let scope = a
        .scope
        .as_deref()
        .map(|s| parse_scope(Some(s)))
        .transpose()?;
    let in_scope = |u: &crate::store::MemoryUnit| match &scope {
        None => true,
        Some((user, None)) => &u.scope.user == user,
        Some((user, Some(ws))) => &u.scope.user == user && &u.scope.workspace == ws,
    };
    match a.what {
        InspectWhat::Stats => {
            let mut by_type: BTreeMap<String, usize> = BTreeMap::new();
            let mut by_status: BTreeMap<String, usize> = BTreeMap::new();
            let mut by_scope: BTreeMap<String, usize> = BTreeMap::new();
            for u in store.units().filter(|u| in_scope(u)) {
                *by_type
                    .entry(u.memory_type.as_str().to_string())
                    .or_default() += 1;
                *by_status
                    .entry(
                        serde_json::to_value(u.status)?
                            .as_str()
                            .unwrap_or("?")
                            .to_string(),
                    )
                    .or_default() += 1;
                if u.status == MemoryStatus::Active {
                    *by_scope.entry(u.scope.base().to_string()).or_default() += 1;
                }
            }
            print_json(&json!({
                "total": by_status.values().sum::<usize>(),
                "by_type": by_type,
                "by_status": by_status,
                "active_by_scope": by_scope,
                "events": store.events().len(),
                "links": store.links().len(),
            }));
        }
        InspectWhat::Units => {
            for u in store.units().filter(|u| in_scope(u)) {
                print_json(u);
            }
        }
        InspectWhat::Events => {
            for e in store.events() {
                print_json(e);
            }
        }
    }
    Ok(())
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    if !a.run.is_dir() {
        bail!("run directory {} does not exist", a.run.display());
    }
    let default_name = match a.what {
        ExportWhat::BestConfig => "best_config.export.json",
        ExportWhat::Trajectory => "trajectory.csv",
        ExportWhat::Transcript => "transcript.export.jsonl",
    };
    let out = a.out.clone().unwrap_or_else(|| a.run.join(default_name));
    match a.what {
        ExportWhat::BestConfig => {
            let src = a.run.join("best_config.json");
            let cfg = RetrievalConfig::load(&src)
                .with_context(|| format!("reading {}", src.display()))?;
            std::fs::write(&out, cfg.clamped().to_json_pretty() + "\n")?;
        }
        ExportWhat::Trajectory => {
            let src = a.run.join("state.json");
            let raw = std::fs::read_to_string(&src)
                .with_context(|| format!("reading {}", src.display()))?;
            let state: EvolutionState = serde_json::from_str(&raw)?;
            let mut w = csv::Writer::from_path(&out)?;
            w.write_record(["round", "branch", "score", "degraded", "best"])?;
            for h in &state.history {
                w.write_record([
                    h.round.to_string(),
                    h.branch.map_or("stop".to_string(), |b| b.to_string()),
                    format!("{:.6}", h.score),
                    h.degraded.to_string(),
                    (state.best_round == Some(h.round)).to_string(),
                ])?;
            }
            w.flush()?;
        }
        ExportWhat::Transcript => {
            let src = a.run.join("transcript.jsonl");
            std::fs::copy(&src, &out).with_context(|| format!("reading {}", src.display()))?;
        }
    }
    print_json(&json!({ "path": out.display().to_string() }));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scopes() {
        let ws = |s: Scope| (s.user, s.workspace);
        let s = parse_scope(Some("alice/work")).unwrap();
        assert_eq!(
            ws(conversation_scope(&s, "conv-1", 1).unwrap()),
            ("alice".into(), "work".into())
        );
        assert_eq!(
            ws(conversation_scope(&s, "conv-1", 2).unwrap()),
            ("alice".into(), "work_conv-1".into())
        );
        let s = parse_scope(None).unwrap();
        assert_eq!(
            ws(conversation_scope(&s, "Conv 1", 3).unwrap()),
            ("user".into(), "conv_1".into())
        );
        assert!(parse_scope(Some("/x")).is_err());
    }

    #[test]
    fn cli_parses_every_subcommand() {
        for args in [
            vec![
                "memtune",
                "ingest",
                "--dataset",
                "d.json",
                "--store",
                "s.db",
                "--backend",
                "stub",
            ],
            vec!["memtune", "consolidate", "--store", "s.db"],
            vec![
                "memtune", "query", "--store", "s.db", "--top-n", "3", "camping",
            ],
            vec!["memtune", "answer", "--store", "s.db", "What?"],
            vec!["memtune", "evaluate", "--store", "s.db", "--qa", "q.json"],
            vec![
                "memtune",
                "evolve",
                "--dataset",
                "d.json",
                "--max-rounds",
                "2",
                "--seed",
                "7",
            ],
            vec!["memtune", "inspect", "--store", "s.db", "--what", "units"],
            vec!["memtune", "export", "--run", "r", "--what", "best-config"],
        ] {
            Cli::try_parse_from(&args).unwrap_or_else(|e| panic!("{args:?}: {e}"));
        }
    }
}
