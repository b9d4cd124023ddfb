//! The closed tuning loop: evaluate, diagnose, guarded update, optional
//! targeted re-extraction, repeat until convergence or the round cap.
//!
//! With a run directory, each round leaves
//! `round_<r>/{config.json, raw_results.jsonl, round_summary.json,
//! diagnosis.json, branch.txt}` and the run ends with `best_config.json`,
//! `state.json` and `discovered_dimensions.json`. Creating a file named
//! `STOP` in the run directory ends the loop after the current round.

pub mod diagnose;
pub mod meta;
pub mod perturb;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::answering::Answerer;
use crate::embedding::Embedder;
use crate::evaluation::{
    evaluate_question, summarize, write_jsonl, Benchmark, EvalError, QaItem, RawResultRecord,
    RoundSummary,
};
use crate::extraction::{
    ingest_conversation, reextract_topics, ExtractionConfig, ExtractionError, Extractor,
    IngestSummary, Session,
};
use crate::gateway::Gateway;
use crate::prompts::PromptLibrary;
use crate::retrieval::{LexicalIndexConfig, RetrievalConfig, RetrievalIndex, Retriever};
use crate::store::{MemoryStatus, MemoryStore, Scope};

pub use diagnose::{
    diagnose, rubric_diagnose, DiagnosisInput, DiagnosisMode, DiagnosisProposal,
    DiscoveredDimension, ProposalSource, RubricThresholds,
};
pub use meta::{
    apply_delta, clamp_config, meta_update, Branch, EvolutionState, GuardConfig, RoundEntry,
    TerminationReason, Update,
};
pub use perturb::perturb_config;

/// One conversation and the questions asked about it.
#[derive(Debug, Clone, PartialEq)]
pub struct ConversationInput {
    pub scope: Scope,
    pub sessions: Vec<Session>,
    pub qa: Vec<QaItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveredRecord {
    pub round: usize,
    #[serde(flatten)]
    pub dimension: DiscoveredDimension,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub score: f64,
    pub branch: Option<Branch>,
    pub degraded: bool,
    pub summary: RoundSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionOutcome {
    pub best_config: RetrievalConfig,
    pub state: EvolutionState,
    pub rounds: Vec<RoundReport>,
    pub discovered: Vec<DiscoveredRecord>,
    pub ingest: Vec<IngestSummary>,
    pub reextracted_units: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum EvolutionError {
    #[error("invalid guards: {0}")]
    Guards(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn write_file(path: &Path, body: &str) -> Result<(), EvolutionError> {
    std::fs::write(path, body).map_err(|source| EvolutionError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), EvolutionError> {
    let mut body = serde_json::to_string_pretty(value).expect("artifacts serialize");
    body.push('\n');
    write_file(path, &body)
}

pub struct Evolver<'a> {
    pub gateway: &'a Gateway,
    pub prompts: &'a PromptLibrary,
    pub embedder: &'a dyn Embedder,
    pub extraction: ExtractionConfig,
    pub guards: GuardConfig,
    pub thresholds: RubricThresholds,
    pub lexical: LexicalIndexConfig,
    pub benchmark: Benchmark,
    /// Name shown to the diagnoser.
    pub benchmark_name: String,
    pub run_dir: Option<PathBuf>,
}

impl<'a> Evolver<'a> {
    pub fn new(
        gateway: &'a Gateway,
        prompts: &'a PromptLibrary,
        embedder: &'a dyn Embedder,
        guards: GuardConfig,
    ) -> Self {
        Evolver {
            gateway,
            prompts,
            embedder,
            extraction: ExtractionConfig::default(),
            guards,
            thresholds: RubricThresholds::default(),
            lexical: LexicalIndexConfig::default(),
            benchmark: Benchmark::FreeText,
            benchmark_name: "custom".into(),
            run_dir: None,
        }
    }

    pub fn with_run_dir(mut self, dir: &Path) -> Self {
        self.run_dir = Some(dir.to_path_buf());
        self
    }

    pub fn with_benchmark(mut self, benchmark: Benchmark, name: &str) -> Self {
        self.benchmark = benchmark;
        self.benchmark_name = name.to_string();
        self
    }

    fn round_dir(&self, round: usize) -> Result<Option<PathBuf>, EvolutionError> {
        let Some(root) = &self.run_dir else {
            return Ok(None);
        };
        let dir = root.join(format!("round_{round}"));
        std::fs::create_dir_all(&dir).map_err(|source| EvolutionError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        Ok(Some(dir))
    }

    fn stop_requested(&self) -> bool {
        self.run_dir
            .as_ref()
            .is_some_and(|d| d.join("STOP").exists())
    }

    /// Answers every question of every conversation under `cfg`.
    fn evaluate(
        &self,
        inputs: &[ConversationInput],
        cfg: &RetrievalConfig,
        store: &MemoryStore,
    ) -> Vec<RawResultRecord> {
        let now = store.clock().now();
        let answerer = Answerer::new(self.gateway, self.prompts);
        let mut records = Vec::new();
        for input in inputs {
            let index = RetrievalIndex::build(store, &input.scope);
            let mut retriever =
                Retriever::new(&index, self.embedder, self.prompts, now).with_gateway(self.gateway);
            retriever.lexical = self.lexical;
            for item in &input.qa {
                records.push(evaluate_question(
                    item,
                    self.benchmark,
                    &answerer,
                    &retriever,
                    cfg,
                ));
            }
        }
        records
    }

    /// Extracts any conversation whose scope holds no memories yet, then
    /// runs rounds until the guards stop the loop. Returns the best config
    /// seen and the full state.
    pub fn run(
        &self,
        inputs: &[ConversationInput],
        theta0: &RetrievalConfig,
        store: &mut MemoryStore,
    ) -> Result<EvolutionOutcome, EvolutionError> {
        self.guards.validate().map_err(EvolutionError::Guards)?;
        if inputs.iter().all(|i| i.qa.is_empty()) {
            return Err(EvalError::EmptyQa.into());
        }
        for e in theta0.validate() {
            log::warn!("initial config clamped: {e}");
        }
        if let Some(dir) = &self.run_dir {
            std::fs::create_dir_all(dir).map_err(|source| EvolutionError::Io {
                path: dir.display().to_string(),
                source,
            })?;
        }
        let extractor = Extractor::new(self.gateway, self.prompts, self.extraction);
        let mut ingest = Vec::new();
        for input in inputs {
            let existing = store.query_scope(&input.scope.base(), true, Some(MemoryStatus::Active));
            if existing.is_empty() && !input.sessions.is_empty() {
                let report = ingest_conversation(
                    &input.sessions,
                    &input.scope,
                    &extractor,
                    self.embedder,
                    store,
                )?;
                ingest.push(report.summary);
            }
        }

        let mut theta = theta0.clamped();
        let mut state = EvolutionState::new(&theta);
        let mut rounds: Vec<RoundReport> = Vec::new();
        let mut discovered: Vec<DiscoveredRecord> = Vec::new();
        let mut reextracted_units = 0;
        loop {
            let r = state.history.len();
            let records = self.evaluate(inputs, &theta, store);
            let summary = summarize(r, self.benchmark, &records, &theta);
            let degraded = records.iter().all(|x| x.error.is_some());
            let score = if degraded {
                log::warn!("round {r}: every question failed; carrying the previous score");
                state.history.last().map_or(0.0, |h| h.score)
            } else {
                summary.overall
            };
            state.record(score, &theta, degraded);
            let dir = self.round_dir(r)?;
            if let Some(d) = &dir {
                write_json(&d.join("config.json"), &theta)?;
                write_jsonl(&d.join("raw_results.jsonl"), &records)?;
                write_json(&d.join("round_summary.json"), &summary)?;
            }

            let stop = state
                .termination(&self.guards)
                .or_else(|| self.stop_requested().then_some(TerminationReason::Manual));
            if let Some(reason) = stop {
                state.terminate(reason);
                if let Some(d) = &dir {
                    write_file(&d.join("diagnosis.json"), "null\n")?;
                    write_file(&d.join("branch.txt"), "stop\n")?;
                }
                rounds.push(RoundReport {
                    round: r,
                    score,
                    branch: None,
                    degraded,
                    summary,
                });
                break;
            }

            let input = DiagnosisInput {
                benchmark: &self.benchmark_name,
                summary: &summary,
                records: &records,
                config: &theta,
                total_memories: store.active_count(),
            };
            let proposal = diagnose(
                input,
                self.guards.diagnosis_mode,
                self.gateway,
                self.prompts,
                &self.thresholds,
            );
            discovered.extend(
                proposal
                    .discovered_dimensions
                    .iter()
                    .map(|d| DiscoveredRecord {
                        round: r,
                        dimension: d.clone(),
                    }),
            );
            let update = meta_update(&mut state, &theta, &proposal, &self.guards);
            for e in &update.errors {
                log::warn!("round {r}: suggestion skipped: {e}");
            }
            if !proposal.missing_topics.is_empty() {
                for input in inputs {
                    reextracted_units += reextract_topics(
                        &input.sessions,
                        &proposal.missing_topics,
                        &input.scope,
                        &extractor,
                        self.embedder,
                        store,
                    )?;
                }
            }
            if let Some(d) = &dir {
                write_json(&d.join("diagnosis.json"), &proposal)?;
                write_file(&d.join("branch.txt"), &format!("{}\n", update.branch))?;
            }
            rounds.push(RoundReport {
                round: r,
                score,
                branch: Some(update.branch),
                degraded,
                summary,
            });
            theta = update.next;
        }

        if let Some(dir) = &self.run_dir {
            write_json(&dir.join("best_config.json"), &state.best_config)?;
            write_json(&dir.join("state.json"), &state)?;
            write_json(&dir.join("discovered_dimensions.json"), &discovered)?;
        }
        Ok(EvolutionOutcome {
            best_config: state.best_config.clone(),
            state,
            rounds,
            discovered,
            ingest,
            reextracted_units,
        })
    }
}
