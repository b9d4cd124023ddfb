//! Per-round question answering, scoring and logging.

pub mod dataset;
pub mod metrics;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::answering::{is_unknown, Answerer, Ask};
use crate::retrieval::{RetrievalConfig, Retriever};

pub use dataset::{Benchmark, CategoryKind, QaItem};
pub use metrics::{bleu1, exact_match, exact_match_mcq, normalize_answer, token_f1};

/// Formula note recorded with every summary.
pub const BLEU1_FORMULA: &str =
    "clipped unigram precision x exp(1 - |ref|/|pred|) when |pred| < |ref|; no smoothing";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub memory_id: Uuid,
    pub provenance: Vec<String>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawResultRecord {
    pub question_id: String,
    pub question: String,
    pub prediction: String,
    pub reference: String,
    pub category: String,
    pub kind: CategoryKind,
    /// `f1`, `bleu1` and `exact_match`, each in [0, 1].
    pub metrics: BTreeMap<String, f64>,
    /// The benchmark's primary metric; what the round mean averages.
    pub score: f64,
    pub confidence: f64,
    pub verified: bool,
    pub sources: Vec<SourceRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RawResultRecord {
    pub fn is_abstention(&self) -> bool {
        is_unknown(&self.prediction)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round_index: usize,
    pub benchmark: Benchmark,
    pub primary_metric: String,
    /// Mean of the per-question primary metric.
    pub overall: f64,
    pub per_category: BTreeMap<String, f64>,
    pub category_counts: BTreeMap<String, usize>,
    pub category_kinds: BTreeMap<String, CategoryKind>,
    pub mean_f1: f64,
    pub mean_bleu1: f64,
    pub total_questions: usize,
    pub zero_score_count: usize,
    pub unknown_count: usize,
    pub failed_questions: usize,
    pub bleu1_formula: String,
    pub config_snapshot: RetrievalConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("the QA set is empty")]
    EmptyQa,
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs
        .into_iter()
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Scores one prediction. A malformed multiple-choice reference is an
/// error; the caller records it with a zero score.
pub fn score_prediction(
    benchmark: Benchmark,
    prediction: &str,
    reference: &str,
) -> Result<(BTreeMap<String, f64>, f64), String> {
    let f1 = token_f1(prediction, reference);
    let mut metrics = BTreeMap::from([
        ("f1".to_string(), f1),
        ("bleu1".to_string(), bleu1(prediction, reference)),
    ]);
    let (em, primary) = match benchmark {
        Benchmark::FreeText => {
            let em = exact_match(prediction, reference);
            (em, f1)
        }
        Benchmark::Mcq => {
            let em = exact_match_mcq(prediction, reference).map_err(|e| e.to_string())?;
            (em, em)
        }
    };
    metrics.insert("exact_match".to_string(), em);
    Ok((metrics, primary))
}

fn zero_metrics() -> BTreeMap<String, f64> {
    ["f1", "bleu1", "exact_match"]
        .into_iter()
        .map(|k| (k.to_string(), 0.0))
        .collect()
}

/// Aggregates records into a round summary.
pub fn summarize(
    round_index: usize,
    benchmark: Benchmark,
    records: &[RawResultRecord],
    cfg: &RetrievalConfig,
) -> RoundSummary {
    let mut by_cat: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut kinds = BTreeMap::new();
    for r in records {
        by_cat.entry(r.category.clone()).or_default().push(r.score);
        kinds.insert(r.category.clone(), r.kind);
    }
    RoundSummary {
        round_index,
        benchmark,
        primary_metric: match benchmark {
            Benchmark::FreeText => "token_f1",
            Benchmark::Mcq => "exact_match_mcq",
        }
        .to_string(),
        overall: mean(records.iter().map(|r| r.score)),
        per_category: by_cat
            .iter()
            .map(|(c, xs)| (c.clone(), mean(xs.iter().copied())))
            .collect(),
        category_counts: by_cat.iter().map(|(c, xs)| (c.clone(), xs.len())).collect(),
        category_kinds: kinds,
        mean_f1: mean(
            records
                .iter()
                .map(|r| r.metrics.get("f1").copied().unwrap_or(0.0)),
        ),
        mean_bleu1: mean(
            records
                .iter()
                .map(|r| r.metrics.get("bleu1").copied().unwrap_or(0.0)),
        ),
        total_questions: records.len(),
        zero_score_count: records.iter().filter(|r| r.score == 0.0).count(),
        unknown_count: records.iter().filter(|r| r.is_abstention()).count(),
        failed_questions: records.iter().filter(|r| r.error.is_some()).count(),
        bleu1_formula: BLEU1_FORMULA.to_string(),
        config_snapshot: cfg.clone(),
    }
}

/// Answers and scores a single question; failures become zero-score
/// records carrying the error.
pub fn evaluate_question(
    item: &QaItem,
    benchmark: Benchmark,
    answerer: &Answerer<'_>,
    retriever: &Retriever<'_>,
    cfg: &RetrievalConfig,
) -> RawResultRecord {
    let ask = Ask {
        question: &item.question,
        category: Some(&item.category),
        route: item.route,
        options: item.options.as_deref(),
    };
    let mut record = RawResultRecord {
        question_id: item.question_id.clone(),
        question: item.question.clone(),
        prediction: String::new(),
        reference: item.answer.clone(),
        category: item.category.clone(),
        kind: item.kind,
        metrics: zero_metrics(),
        score: 0.0,
        confidence: 0.0,
        verified: false,
        sources: Vec::new(),
        error: None,
    };
    match answerer.answer_question(&ask, retriever, cfg) {
        Ok((result, retrieval)) => {
            record.sources = retrieval
                .candidates
                .iter()
                .map(|c| SourceRecord {
                    memory_id: c.memory_id,
                    provenance: c
                        .provenance
                        .iter()
                        .map(|p| p.as_str().to_string())
                        .collect(),
                    score: c.merged_score.unwrap_or(c.s),
                })
                .collect();
            record.confidence = result.confidence;
            record.verified = result.verified;
            record.prediction = result.answer;
            match score_prediction(benchmark, &record.prediction, &item.answer) {
                Ok((metrics, score)) => {
                    record.metrics = metrics;
                    record.score = score;
                }
                Err(e) => record.error = Some(e),
            }
        }
        Err(e) => record.error = Some(e.to_string()),
    }
    record
}

/// Evaluates every question in order and, when `log_path` is given,
/// writes one JSON line per record there.
pub fn evaluate_round(
    round_index: usize,
    qa: &[QaItem],
    benchmark: Benchmark,
    answerer: &Answerer<'_>,
    retriever: &Retriever<'_>,
    cfg: &RetrievalConfig,
    log_path: Option<&Path>,
) -> Result<(RoundSummary, Vec<RawResultRecord>), EvalError> {
    if qa.is_empty() {
        return Err(EvalError::EmptyQa);
    }
    let records: Vec<RawResultRecord> = qa
        .iter()
        .map(|item| evaluate_question(item, benchmark, answerer, retriever, cfg))
        .collect();
    if let Some(path) = log_path {
        write_jsonl(path, &records)?;
    }
    Ok((summarize(round_index, benchmark, &records, cfg), records))
}

pub fn write_jsonl(path: &Path, records: &[RawResultRecord]) -> Result<(), EvalError> {
    let io = |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(io)
}

pub fn read_jsonl(path: &Path) -> std::io::Result<Vec<RawResultRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
        .collect()
}
