//! Sliding-window extraction of memory units from dialogue, with retry,
//! chunk-split fallback on context overflow and keyword-coverage checks.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use chrono::{DateTime, NaiveDate, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::embedding::{embed_batch, Embedder};
use crate::gateway::{parse_json_payload, ChatRequest, Gateway, GatewayError, RetryPolicy};
use crate::prompts::{render, PromptError, PromptLibrary};
use crate::store::{MemoryStatus, MemoryStore, MemoryType, MemoryUnit, Scope, StoreError};
use crate::text::{is_stop_word, normalize_content, tokenize};

/// Entries from the previous window shown to the extractor for dedup.
const PREV_TAIL: usize = 10;

const REPAIR_PROMPT: &str =
    "That reply was not a valid JSON array. Reply again with ONLY the JSON array requested above.";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractionConfig {
    pub window_size: usize,
    pub window_overlap: usize,
    pub max_retries: u32,
    #[serde(with = "millis")]
    pub retry_base_wait: Duration,
    pub chunk_size: usize,
    pub min_entries_per_window: usize,
    pub min_restatement_words: usize,
    /// Re-extract windows whose coverage check finds missing keywords.
    pub targeted_reextraction: bool,
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            window_size: 40,
            window_overlap: 5,
            max_retries: 3,
            retry_base_wait: Duration::from_secs(1),
            chunk_size: 15,
            min_entries_per_window: 15,
            min_restatement_words: 4,
            targeted_reextraction: true,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<(), ExtractionError> {
        let bad = |m: String| Err(ExtractionError::Config(m));
        if self.window_size == 0 || self.chunk_size == 0 || self.min_restatement_words == 0 {
            return bad(
                "window_size, chunk_size and min_restatement_words must be positive".into(),
            );
        }
        if self.window_overlap == 0 || self.window_overlap >= self.window_size {
            return bad(format!(
                "window_overlap must be in 1..{}, got {}",
                self.window_size, self.window_overlap
            ));
        }
        if self.chunk_size >= self.window_size {
            return bad(format!(
                "chunk_size {} must be below window_size {}",
                self.chunk_size, self.window_size
            ));
        }
        Ok(())
    }

    fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            base_wait: self.retry_base_wait,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExtractionError {
    #[error("invalid extraction config: {0}")]
    Config(String),
    #[error("targeted re-extraction needs at least one missing keyword")]
    NothingMissing,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dia_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    /// The date as written in the source, shown to the extractor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<String>,
    pub turns: Vec<Turn>,
}

impl Session {
    pub fn timestamp(&self) -> Option<DateTime<Utc>> {
        self.date.as_deref().and_then(parse_session_date)
    }
}

/// Parses `1:56 pm on 8 May, 2023`, RFC 3339 or `YYYY-MM-DD`.
pub fn parse_session_date(raw: &str) -> Option<DateTime<Utc>> {
    let raw = raw.trim();
    if let Ok(dt) = NaiveDateTime::parse_from_str(raw, "%I:%M %p on %d %B, %Y") {
        return Some(dt.and_utc());
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some(dt.with_timezone(&Utc));
    }
    NaiveDate::parse_from_str(raw, "%Y-%m-%d")
        .ok()
        .map(|d| d.and_hms_opt(0, 0, 0).expect("midnight").and_utc())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedEntry {
    pub lossless_restatement: String,
    #[serde(default)]
    pub keywords: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<String>,
    #[serde(default)]
    pub persons: Vec<String>,
    #[serde(default)]
    pub entities: Vec<String>,
    #[serde(default)]
    pub topic: String,
    /// Session the entry came from; filled in by the pipeline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
}

fn string_list(v: Option<&Value>) -> Vec<String> {
    v.and_then(Value::as_array)
        .map(|items| {
            items
                .iter()
                .filter_map(Value::as_str)
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect()
        })
        .unwrap_or_default()
}

fn optional_text(v: Option<&Value>) -> Option<String> {
    v.and_then(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty() && !s.eq_ignore_ascii_case("null"))
        .map(str::to_string)
}

impl ExtractedEntry {
    /// Reads one element of the extractor's output. Missing optional
    /// fields are tolerated; anything without a restatement is not.
    pub fn from_value(v: &Value) -> Option<ExtractedEntry> {
        let obj = v.as_object()?;
        let restatement = optional_text(obj.get("lossless_restatement"))?;
        let timestamp = optional_text(obj.get("timestamp"))
            .and_then(|t| NaiveDate::parse_from_str(t.get(..10).unwrap_or(&t), "%Y-%m-%d").ok());
        Some(ExtractedEntry {
            lossless_restatement: restatement,
            keywords: string_list(obj.get("keywords")),
            timestamp,
            location: optional_text(obj.get("location")),
            persons: string_list(obj.get("persons")),
            entities: string_list(obj.get("entities")),
            topic: optional_text(obj.get("topic")).unwrap_or_default(),
            session_id: None,
        })
    }

    pub fn is_valid(&self, cfg: &ExtractionConfig) -> bool {
        self.lossless_restatement.split_whitespace().count() >= cfg.min_restatement_words
            && !self.keywords.is_empty()
    }

    /// The unit this entry becomes: episodic when dated, else semantic.
    pub fn to_unit(
        &self,
        id: uuid::Uuid,
        scope: Scope,
        session_time: Option<DateTime<Utc>>,
        now: DateTime<Utc>,
    ) -> MemoryUnit {
        let created_at = self
            .timestamp
            .map(|d| d.and_hms_opt(0, 0, 0).expect("midnight").and_utc())
            .or(session_time)
            .unwrap_or(now);
        let kind = if self.timestamp.is_some() {
            MemoryType::Episodic
        } else {
            MemoryType::Semantic
        };
        let mut unit = MemoryUnit::new(id, scope, kind, &self.lossless_restatement, created_at);
        unit.keywords = self.keywords.iter().cloned().collect();
        unit.persons = self.persons.iter().cloned().collect();
        unit.entities = self.entities.iter().cloned().collect();
        unit.locations = self.location.iter().cloned().collect();
        if !self.topic.is_empty() {
            unit.topics.insert(self.topic.clone());
        }
        unit.tags.insert("extracted".into());
        unit
    }

    /// Lowercased text fields checked by the coverage verifier.
    fn coverage_fields(&self) -> Vec<Vec<String>> {
        std::iter::once(&self.lossless_restatement)
            .chain(&self.keywords)
            .chain(&self.entities)
            .map(|s| tokenize(s))
            .collect()
    }
}

/// Turn index range `[start, end)` within one session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

/// Overlapping windows of `window_size` turns advancing by
/// `window_size - window_overlap`; the last one may be short.
pub fn partition_windows(n_turns: usize, cfg: &ExtractionConfig) -> Vec<Window> {
    let stride = cfg.window_size.saturating_sub(cfg.window_overlap).max(1);
    let mut out = Vec::new();
    let mut start = 0;
    while start < n_turns {
        let end = (start + cfg.window_size).min(n_turns);
        out.push(Window { start, end });
        if end == n_turns {
            break;
        }
        start += stride;
    }
    out
}

pub fn dialogue_text(turns: &[Turn]) -> String {
    turns
        .iter()
        .map(|t| format!("{}: {}", t.speaker, t.text))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub window_index: usize,
    pub reference_keywords: BTreeSet<String>,
    pub covered: BTreeSet<String>,
    pub missing: BTreeSet<String>,
}

/// Salient keywords of some dialogue: capitalized words of two or more
/// characters, quoted titles and numerals, minus stop-words. Lowercased.
pub fn reference_keywords(turns: &[Turn]) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for turn in turns {
        let text = &turn.text;
        for word in text.split_whitespace() {
            let word = word.trim_matches(|c: char| !c.is_alphanumeric());
            let Some(first) = word.chars().next() else {
                continue;
            };
            let lower = word.to_lowercase();
            let numeral = word.chars().any(|c| c.is_ascii_digit());
            let capital = first.is_uppercase() && word.chars().count() >= 2;
            if (numeral || capital) && !is_stop_word(&lower) {
                let key = tokenize(&lower).join(" ");
                if !key.is_empty() {
                    out.insert(key);
                }
            }
        }
        for title in quoted(text) {
            let key = tokenize(&title).join(" ");
            if !key.is_empty() && !is_stop_word(&key) {
                out.insert(key);
            }
        }
    }
    out
}

fn quoted(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for (open, close) in [('"', '"'), ('\u{201c}', '\u{201d}')] {
        let mut rest = text;
        while let Some(i) = rest.find(open) {
            let after = &rest[i + open.len_utf8()..];
            let Some(j) = after.find(close) else {
                break;
            };
            out.push(after[..j].to_string());
            rest = &after[j + close.len_utf8()..];
        }
    }
    out
}

fn contains_phrase(haystack: &[String], phrase: &[String]) -> bool {
    !phrase.is_empty() && haystack.windows(phrase.len()).any(|w| w == phrase)
}

fn covers(entry: &ExtractedEntry, keyword: &str) -> bool {
    let phrase = tokenize(keyword);
    entry
        .coverage_fields()
        .iter()
        .any(|field| contains_phrase(field, &phrase))
}

/// Splits the window's reference keywords into covered and missing.
pub fn verify_coverage(
    window_index: usize,
    turns: &[Turn],
    extracted: &[ExtractedEntry],
) -> CoverageReport {
    let reference = reference_keywords(turns);
    let (covered, missing) = reference
        .iter()
        .cloned()
        .partition(|k| extracted.iter().any(|e| covers(e, k)));
    CoverageReport {
        window_index,
        reference_keywords: reference,
        covered,
        missing,
    }
}

/// Result of extracting one window.
#[derive(Debug, Clone, Default)]
pub struct WindowOutcome {
    pub entries: Vec<ExtractedEntry>,
    /// Set when nothing could be extracted from at least one part.
    pub error: Option<String>,
    pub split: bool,
}

impl WindowOutcome {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

pub struct Extractor<'a> {
    pub gateway: &'a Gateway,
    pub prompts: &'a PromptLibrary,
    pub cfg: ExtractionConfig,
}

enum CallError {
    Overflow,
    Failed(String),
}

impl<'a> Extractor<'a> {
    pub fn new(gateway: &'a Gateway, prompts: &'a PromptLibrary, cfg: ExtractionConfig) -> Self {
        Extractor {
            gateway,
            prompts,
            cfg,
        }
    }

    fn call(
        &self,
        context: &str,
        date: &str,
        turns: &[Turn],
    ) -> Result<Vec<ExtractedEntry>, CallError> {
        let prompt = render(
            &self.prompts.extract,
            &[
                ("context", context.into()),
                ("date", date.into()),
                ("dialogue_text", dialogue_text(turns).into()),
            ],
        )
        .map_err(|e| CallError::Failed(e.to_string()))?;
        let request = ChatRequest::new(None, prompt);
        let policy = self.cfg.retry_policy();
        let send = |req: &ChatRequest| match self.gateway.chat_with_retry(req, policy) {
            Ok(r) => Ok(r.text),
            Err(GatewayError::ContextOverflow(_)) => Err(CallError::Overflow),
            Err(e) => Err(CallError::Failed(e.to_string())),
        };
        let first = send(&request)?;
        if let Some(entries) = parse_entries(&first) {
            return Ok(entries);
        }
        let second = send(&request.followed_by(&first, REPAIR_PROMPT))?;
        parse_entries(&second)
            .ok_or_else(|| CallError::Failed("unparseable extraction output".into()))
    }

    /// Extracts one window. On context overflow the window is split into
    /// `chunk_size`-turn pieces; entries from pieces that succeed are kept.
    pub fn extract_window(
        &self,
        turns: &[Turn],
        date: &str,
        prev_tail: &[ExtractedEntry],
    ) -> WindowOutcome {
        self.extract_with_context(turns, date, &tail_context(prev_tail))
    }

    fn extract_with_context(&self, turns: &[Turn], date: &str, context: &str) -> WindowOutcome {
        match self.call(context, date, turns) {
            Ok(entries) => WindowOutcome {
                entries,
                error: None,
                split: false,
            },
            Err(CallError::Failed(e)) => WindowOutcome {
                entries: Vec::new(),
                error: Some(e),
                split: false,
            },
            Err(CallError::Overflow) => {
                let mut out = WindowOutcome {
                    split: true,
                    ..Default::default()
                };
                for chunk in turns.chunks(self.cfg.chunk_size) {
                    match self.call(context, date, chunk) {
                        Ok(entries) => out.entries.extend(entries),
                        Err(CallError::Overflow) => {
                            out.error = Some("context overflow on a sub-window".into())
                        }
                        Err(CallError::Failed(e)) => out.error = Some(e),
                    }
                }
                out
            }
        }
    }

    /// Re-runs extraction with the missing keywords in the context slot and
    /// keeps only entries that cover one of them.
    pub fn targeted_reextract(
        &self,
        turns: &[Turn],
        date: &str,
        report: &CoverageReport,
    ) -> Result<WindowOutcome, ExtractionError> {
        if report.missing.is_empty() {
            return Err(ExtractionError::NothingMissing);
        }
        let context = format!(
            "[Missing keywords]\nThese details were not captured yet; extract entries that cover them: {}",
            report.missing.iter().cloned().collect::<Vec<_>>().join(", ")
        );
        let mut outcome = self.extract_with_context(turns, date, &context);
        outcome
            .entries
            .retain(|e| report.missing.iter().any(|k| covers(e, k)));
        Ok(outcome)
    }
}

fn tail_context(prev_tail: &[ExtractedEntry]) -> String {
    if prev_tail.is_empty() {
        return String::new();
    }
    let start = prev_tail.len().saturating_sub(PREV_TAIL);
    let lines: Vec<String> = prev_tail[start..]
        .iter()
        .map(|e| format!("- {}", e.lossless_restatement))
        .collect();
    format!(
        "[Previous entries]\nAlready extracted; do not repeat them:\n{}",
        lines.join("\n")
    )
}

fn parse_entries(raw: &str) -> Option<Vec<ExtractedEntry>> {
    match parse_json_payload(raw).ok()? {
        Value::Array(items) => Some(
            items
                .iter()
                .filter_map(ExtractedEntry::from_value)
                .collect(),
        ),
        _ => None,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub windows: usize,
    pub units_extracted: usize,
    pub units_stored: usize,
    pub failed_windows: usize,
    pub coverage_gaps: usize,
    pub duplicates_skipped: usize,
    pub reextracted_units: usize,
    pub invalid_entries: usize,
}

#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub summary: IngestSummary,
    pub coverage: Vec<CoverageReport>,
    /// Valid entries in window order, tagged with their session.
    pub entries: Vec<ExtractedEntry>,
}

/// Extracted entries of one sample, reusable across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionCache {
    pub sample_id: String,
    pub scope: Scope,
    pub entries: Vec<ExtractedEntry>,
}

impl ExtractionCache {
    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &std::path::Path) -> std::io::Result<ExtractionCache> {
        let raw = std::fs::read_to_string(path)?;
        serde_json::from_str(&raw)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

/// Validates, dedups, embeds and stores `entries` under `scope`. Returns
/// (stored, duplicates skipped, invalid).
pub fn store_entries(
    entries: &[ExtractedEntry],
    sessions: &[Session],
    scope: &Scope,
    cfg: &ExtractionConfig,
    embedder: &dyn Embedder,
    store: &mut MemoryStore,
) -> Result<(usize, usize, usize), ExtractionError> {
    let now = store.clock().now();
    let session_times: BTreeMap<&str, Option<DateTime<Utc>>> = sessions
        .iter()
        .map(|s| (s.session_id.as_str(), s.timestamp()))
        .collect();
    let mut seen: BTreeSet<(MemoryType, String)> = store
        .query_scope(&scope.base(), true, Some(MemoryStatus::Active))
        .iter()
        .map(|u| (u.memory_type, normalize_content(&u.content)))
        .collect();
    let mut fresh = Vec::new();
    let (mut duplicates, mut invalid) = (0, 0);
    for entry in entries {
        if !entry.is_valid(cfg) {
            invalid += 1;
            continue;
        }
        let unit_scope = match &entry.session_id {
            Some(s) => scope.with_session(&sanitize_id(s))?,
            None => scope.clone(),
        };
        let session_time = entry
            .session_id
            .as_deref()
            .and_then(|s| session_times.get(s).copied().flatten());
        let id = store.next_id();
        let unit = entry.to_unit(id, unit_scope, session_time, now);
        if !seen.insert((unit.memory_type, normalize_content(&unit.content))) {
            duplicates += 1;
            continue;
        }
        if unit.validate().is_err() {
            invalid += 1;
            continue;
        }
        fresh.push(unit);
    }
    let texts: Vec<String> = fresh.iter().map(|u| u.content.clone()).collect();
    match embed_batch(&texts, embedder, cfg.max_retries) {
        Ok(vectors) => {
            for (unit, v) in fresh.iter_mut().zip(vectors) {
                if v.iter().any(|x| *x != 0.0) {
                    unit.embedding = Some(v);
                }
            }
        }
        Err(e) => log::warn!("storing units without embeddings: {e}"),
    }
    let stored = fresh.len();
    for unit in fresh {
        store.put_memory(unit)?;
    }
    Ok((stored, duplicates, invalid))
}

/// Lowercase identifier safe for scope components.
pub fn sanitize_id(raw: &str) -> String {
    let s: String = raw
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect();
    if s.is_empty() {
        "_".into()
    } else {
        s
    }
}

/// Extracts every session of a conversation into `store` under `scope`.
/// Window failures are counted, never fatal.
pub fn ingest_conversation(
    sessions: &[Session],
    scope: &Scope,
    extractor: &Extractor<'_>,
    embedder: &dyn Embedder,
    store: &mut MemoryStore,
) -> Result<IngestReport, ExtractionError> {
    extractor.cfg.validate()?;
    let mut report = IngestReport::default();
    let mut window_index = 0;
    for session in sessions {
        let date = session
            .date
            .clone()
            .unwrap_or_else(|| "unknown date".into());
        let mut prev: Vec<ExtractedEntry> = Vec::new();
        for w in partition_windows(session.turns.len(), &extractor.cfg) {
            let turns = &session.turns[w.start..w.end];
            let outcome = extractor.extract_window(turns, &date, &prev);
            report.summary.windows += 1;
            if outcome.failed() {
                report.summary.failed_windows += 1;
            }
            let mut entries = outcome.entries;
            let mut coverage = verify_coverage(window_index, turns, &entries);
            if extractor.cfg.targeted_reextraction && !coverage.missing.is_empty() {
                let extra = extractor.targeted_reextract(turns, &date, &coverage)?;
                report.summary.reextracted_units += extra.entries.len();
                entries.extend(extra.entries);
                coverage = verify_coverage(window_index, turns, &entries);
            }
            if !coverage.missing.is_empty() {
                report.summary.coverage_gaps += 1;
            }
            report.summary.units_extracted += entries.len();
            for e in &mut entries {
                e.session_id = Some(session.session_id.clone());
            }
            report.coverage.push(coverage);
            report.entries.extend(entries.iter().cloned());
            prev = entries;
            window_index += 1;
        }
    }
    let (stored, duplicates, invalid) = store_entries(
        &report.entries,
        sessions,
        scope,
        &extractor.cfg,
        embedder,
        store,
    )?;
    report.entries.retain(|e| e.is_valid(&extractor.cfg));
    report.summary.units_stored = stored;
    report.summary.duplicates_skipped = duplicates;
    report.summary.invalid_entries = invalid;
    Ok(report)
}

/// Targeted re-extraction of the windows that mention any of `topics`.
/// Returns the number of units stored.
pub fn reextract_topics(
    sessions: &[Session],
    topics: &[String],
    scope: &Scope,
    extractor: &Extractor<'_>,
    embedder: &dyn Embedder,
    store: &mut MemoryStore,
) -> Result<usize, ExtractionError> {
    let wanted: Vec<(String, Vec<String>)> = topics
        .iter()
        .map(|t| (t.to_lowercase(), tokenize(t)))
        .filter(|(_, toks)| !toks.is_empty())
        .collect();
    let mut entries = Vec::new();
    for session in sessions {
        let date = session
            .date
            .clone()
            .unwrap_or_else(|| "unknown date".into());
        for (i, w) in partition_windows(session.turns.len(), &extractor.cfg)
            .into_iter()
            .enumerate()
        {
            let turns = &session.turns[w.start..w.end];
            let tokens = tokenize(&dialogue_text(turns));
            let missing: BTreeSet<String> = wanted
                .iter()
                .filter(|(_, toks)| contains_phrase(&tokens, toks))
                .map(|(t, _)| t.clone())
                .collect();
            if missing.is_empty() {
                continue;
            }
            let report = CoverageReport {
                window_index: i,
                reference_keywords: missing.clone(),
                covered: BTreeSet::new(),
                missing,
            };
            let outcome = extractor.targeted_reextract(turns, &date, &report)?;
            for mut e in outcome.entries {
                e.session_id = Some(session.session_id.clone());
                entries.push(e);
            }
        }
    }
    let (stored, _, _) = store_entries(&entries, sessions, scope, &extractor.cfg, embedder, store)?;
    Ok(stored)
}
