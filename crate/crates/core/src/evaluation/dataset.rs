//! Dataset loaders.
//!
//! Two JSON shapes are accepted.
//!
//! LoCoMo-shaped: an array of samples (or one sample object), each with a
//! `conversation` object holding `session_<n>` turn lists and
//! `session_<n>_date_time` strings, and a `qa` list whose `category` is an
//! integer id:
//!
//! ```json
//! [{"sample_id": "conv-1",
//!   "conversation": {"speaker_a": "Caroline", "speaker_b": "Melanie",
//!     "session_1_date_time": "1:56 pm on 8 May, 2023",
//!     "session_1": [{"speaker": "Caroline", "dia_id": "D1:1", "text": "Hi!"}]},
//!   "qa": [{"question": "When did Caroline ...?", "answer": "7 May 2023",
//!           "category": 2, "evidence": ["D1:3"]}]}]
//! ```
//!
//! Generic: an object with an optional `benchmark` (`free_text` or `mcq`)
//! and a `conversations` list of `{sample_id, sessions, qa}`. Multiple
//! choice items carry four `options` and a letter `answer`:
//!
//! ```json
//! {"benchmark": "mcq",
//!  "conversations": [{"sample_id": "m1",
//!    "sessions": [{"session_id": "s1", "date": "2024-03-01",
//!                  "turns": [{"speaker": "A", "text": "I adopted a cat."}]}],
//!    "qa": [{"question_id": "q1", "question": "What pet?", "answer": "B",
//!            "category": "preference",
//!            "options": ["dog", "cat", "fish", "bird"]}]}]}
//! ```
//!
//! A QA-only file is either a bare list of QA items or `{"qa": [...]}`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::answering::Route;
use crate::extraction::{Session, Turn};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    #[default]
    FreeText,
    Mcq,
}

impl Benchmark {
    pub fn as_str(self) -> &'static str {
        match self {
            Benchmark::FreeText => "free_text",
            Benchmark::Mcq => "mcq",
        }
    }
}

/// What a question category tests, used by the rubric diagnoser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategoryKind {
    MultiHop,
    Temporal,
    Inferential,
    OpenDomain,
    Adversarial,
    Other,
}

impl CategoryKind {
    /// LoCoMo integer ids 1 to 5.
    pub fn from_locomo(id: &str) -> CategoryKind {
        match id {
            "1" => CategoryKind::MultiHop,
            "2" => CategoryKind::Temporal,
            "3" => CategoryKind::Inferential,
            "4" => CategoryKind::OpenDomain,
            "5" => CategoryKind::Adversarial,
            _ => CategoryKind::Other,
        }
    }

    /// Recognizes descriptive category names as well as LoCoMo ids.
    pub fn infer(category: &str) -> CategoryKind {
        let c = category.trim().to_lowercase().replace(['-', ' '], "_");
        match c.as_str() {
            "multi_hop" | "multihop" => CategoryKind::MultiHop,
            "temporal" => CategoryKind::Temporal,
            "inferential" | "inference" => CategoryKind::Inferential,
            "open_domain" | "single_hop" => CategoryKind::OpenDomain,
            "adversarial" => CategoryKind::Adversarial,
            other => CategoryKind::from_locomo(other),
        }
    }

    pub fn route(self) -> Route {
        match self {
            CategoryKind::Inferential => Route::Inferential,
            CategoryKind::Adversarial => Route::Adversarial,
            _ => Route::Default,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    pub question_id: String,
    pub question: String,
    pub answer: String,
    pub category: String,
    pub kind: CategoryKind,
    pub route: Route,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub sample_id: String,
    pub sessions: Vec<Session>,
    pub qa: Vec<QaItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub benchmark: Benchmark,
    pub conversations: Vec<Conversation>,
}

impl Dataset {
    pub fn all_qa(&self) -> Vec<QaItem> {
        self.conversations
            .iter()
            .flat_map(|c| c.qa.clone())
            .collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: invalid JSON at line {line}, column {column}: {message}")]
    Json {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{at}: {message}")]
    Schema { at: String, message: String },
}

fn schema(at: impl Into<String>, message: impl Into<String>) -> DatasetError {
    DatasetError::Schema {
        at: at.into(),
        message: message.into(),
    }
}

fn read_json(path: &Path) -> Result<Value, DatasetError> {
    let p = path.display().to_string();
    let raw = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: p.clone(),
        source,
    })?;
    serde_json::from_str(&raw).map_err(|e| DatasetError::Json {
        path: p,
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    parse_dataset(&read_json(path)?)
}

/// Loads a QA-only file, or the QA of a full dataset file.
pub fn load_qa(path: &Path) -> Result<(Benchmark, Vec<QaItem>), DatasetError> {
    let v = read_json(path)?;
    let is_dataset = v.get("conversations").is_some()
        || v.get("conversation").is_some()
        || v.as_array()
            .and_then(|a| a.first())
            .is_some_and(|s| s.get("conversation").is_some());
    if is_dataset {
        let d = parse_dataset(&v)?;
        return Ok((d.benchmark, d.all_qa()));
    }
    let items = match &v {
        Value::Array(a) => a,
        Value::Object(o) => o
            .get("qa")
            .and_then(Value::as_array)
            .ok_or_else(|| schema("$", "expected a list of QA items or {\"qa\": [...]}"))?,
        _ => return Err(schema("$", "expected an array or object")),
    };
    let qa = parse_qa_list(items, "$.qa", "qa", false)?;
    let benchmark = benchmark_of(&v, &qa)?;
    Ok((benchmark, qa))
}

pub fn parse_dataset(v: &Value) -> Result<Dataset, DatasetError> {
    if let Some(list) = v.get("conversations") {
        let list = list
            .as_array()
            .ok_or_else(|| schema("$.conversations", "expected an array"))?;
        let conversations = list
            .iter()
            .enumerate()
            .map(|(i, c)| parse_generic_conversation(c, &format!("$.conversations[{i}]")))
            .collect::<Result<Vec<_>, _>>()?;
        let qa: Vec<QaItem> = conversations.iter().flat_map(|c| c.qa.clone()).collect();
        let benchmark = benchmark_of(v, &qa)?;
        return Ok(Dataset {
            benchmark,
            conversations,
        });
    }
    let samples: Vec<&Value> = match v {
        Value::Array(a) => a.iter().collect(),
        Value::Object(_) if v.get("conversation").is_some() => vec![v],
        _ => {
            return Err(schema(
                "$",
                "expected a LoCoMo sample list or an object with `conversations`",
            ))
        }
    };
    let conversations = samples
        .into_iter()
        .enumerate()
        .map(|(i, s)| parse_locomo_sample(s, i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        benchmark: Benchmark::FreeText,
        conversations,
    })
}

fn benchmark_of(v: &Value, qa: &[QaItem]) -> Result<Benchmark, DatasetError> {
    match v.get("benchmark") {
        Some(b) => serde_json::from_value(b.clone())
            .map_err(|_| schema("$.benchmark", format!("expected free_text or mcq, got {b}"))),
        None if !qa.is_empty() && qa.iter().all(|q| q.options.is_some()) => Ok(Benchmark::Mcq),
        None => Ok(Benchmark::FreeText),
    }
}

fn text_of(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn parse_generic_conversation(v: &Value, at: &str) -> Result<Conversation, DatasetError> {
    let sample_id = v
        .get("sample_id")
        .and_then(text_of)
        .ok_or_else(|| schema(format!("{at}.sample_id"), "missing"))?;
    let sessions: Vec<Session> = match v.get("sessions") {
        Some(s) => serde_json::from_value(s.clone())
            .map_err(|e| schema(format!("{at}.sessions"), e.to_string()))?,
        None => Vec::new(),
    };
    let qa = match v.get("qa") {
        Some(Value::Array(items)) => parse_qa_list(items, &format!("{at}.qa"), &sample_id, false)?,
        Some(_) => return Err(schema(format!("{at}.qa"), "expected an array")),
        None => Vec::new(),
    };
    Ok(Conversation {
        sample_id,
        sessions,
        qa,
    })
}

fn parse_locomo_sample(v: &Value, index: usize) -> Result<Conversation, DatasetError> {
    let at = format!("$[{index}]");
    let sample_id = v
        .get("sample_id")
        .and_then(text_of)
        .unwrap_or_else(|| format!("sample-{index}"));
    let conv = v
        .get("conversation")
        .and_then(Value::as_object)
        .ok_or_else(|| schema(format!("{at}.conversation"), "missing or not an object"))?;
    let mut numbered: Vec<(u32, &str)> = conv
        .keys()
        .filter_map(|k| {
            let n = k.strip_prefix("session_")?;
            n.parse::<u32>().ok().map(|n| (n, k.as_str()))
        })
        .collect();
    numbered.sort();
    let mut sessions = Vec::new();
    for (n, key) in numbered {
        let turns_at = format!("{at}.conversation.{key}");
        let turns: Vec<Turn> = match &conv[key] {
            Value::Array(items) => items
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    let field = |name: &str| {
                        t.get(name)
                            .and_then(text_of)
                            .ok_or_else(|| schema(format!("{turns_at}[{j}].{name}"), "missing"))
                    };
                    Ok(Turn {
                        speaker: field("speaker")?,
                        text: field("text")?,
                        dia_id: t.get("dia_id").and_then(text_of),
                    })
                })
                .collect::<Result<_, DatasetError>>()?,
            _ => return Err(schema(turns_at, "expected a list of turns")),
        };
        sessions.push(Session {
            session_id: format!("session_{n}"),
            date: conv
                .get(&format!("session_{n}_date_time"))
                .and_then(text_of),
            turns,
        });
    }
    let qa = match v.get("qa") {
        Some(Value::Array(items)) => parse_qa_list(items, &format!("{at}.qa"), &sample_id, true)?,
        Some(_) => return Err(schema(format!("{at}.qa"), "expected an array")),
        None => Vec::new(),
    };
    Ok(Conversation {
        sample_id,
        sessions,
        qa,
    })
}

fn parse_qa_list(
    items: &[Value],
    at: &str,
    prefix: &str,
    locomo: bool,
) -> Result<Vec<QaItem>, DatasetError> {
    items
        .iter()
        .enumerate()
        .map(|(i, q)| parse_qa(q, &format!("{at}[{i}]"), &format!("{prefix}-q{i}"), locomo))
        .collect()
}

fn parse_qa(v: &Value, at: &str, default_id: &str, locomo: bool) -> Result<QaItem, DatasetError> {
    let question = v
        .get("question")
        .and_then(text_of)
        .ok_or_else(|| schema(format!("{at}.question"), "missing"))?;
    let answer = v
        .get("answer")
        .and_then(text_of)
        .or_else(|| v.get("adversarial_answer").and_then(text_of))
        .ok_or_else(|| schema(format!("{at}.answer"), "missing"))?;
    let category = v
        .get("category")
        .and_then(text_of)
        .unwrap_or_else(|| "uncategorized".into());
    let kind = if locomo {
        CategoryKind::from_locomo(&category)
    } else {
        CategoryKind::infer(&category)
    };
    let options = match v.get("options") {
        None | Some(Value::Null) => None,
        Some(Value::Array(opts)) => {
            let opts: Vec<String> = opts.iter().filter_map(text_of).collect();
            if opts.len() != 4 {
                return Err(schema(
                    format!("{at}.options"),
                    "expected exactly four options",
                ));
            }
            Some(opts)
        }
        Some(_) => return Err(schema(format!("{at}.options"), "expected an array")),
    };
    let route = match v.get("route") {
        Some(r) => serde_json::from_value(r.clone())
            .map_err(|_| schema(format!("{at}.route"), format!("unknown route {r}")))?,
        None if options.is_some() => Route::Mcq,
        None => kind.route(),
    };
    Ok(QaItem {
        question_id: v
            .get("question_id")
            .and_then(text_of)
            .unwrap_or_else(|| default_id.to_string()),
        question,
        answer,
        category,
        kind,
        route,
        options,
    })
}
