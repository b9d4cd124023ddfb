//! Failure diagnosis: turns a round's raw log into a configuration
//! proposal, either by asking the model or by a fixed rubric.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::answering::REPAIR_PROMPT;
use crate::evaluation::{CategoryKind, RawResultRecord, RoundSummary};
use crate::gateway::{parse_json_payload, ChatRequest, Gateway};
use crate::prompts::{render, PromptLibrary, Var};
use crate::retrieval::field_kind;
use crate::retrieval::RetrievalConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosisMode {
    #[default]
    Llm,
    Rubric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalSource {
    Llm,
    #[default]
    Rubric,
    /// The model's reply could not be used; the rubric answered instead.
    RubricFallback,
}

/// A suggested field that is not part of the configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveredDimension {
    pub field: String,
    pub value: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnosisProposal {
    pub root_causes: BTreeMap<String, Value>,
    pub missing_topics: Vec<String>,
    /// Field name to new absolute value.
    pub parameter_suggestions: BTreeMap<String, Value>,
    pub extraction_suggestions: BTreeMap<String, Value>,
    pub per_category_proposals: BTreeMap<String, Map<String, Value>>,
    pub priority_actions: Vec<String>,
    pub discovered_dimensions: Vec<DiscoveredDimension>,
    pub source: ProposalSource,
}

impl DiagnosisProposal {
    pub fn is_empty(&self) -> bool {
        self.parameter_suggestions.is_empty() && self.per_category_proposals.is_empty()
    }

    /// Reads a model reply. Suggested keys that are not config fields move
    /// to `discovered_dimensions`.
    pub fn from_value(v: &Value) -> Result<DiagnosisProposal, String> {
        let obj = v.as_object().ok_or("proposal is not a JSON object")?;
        let object_at = |key: &str| -> Result<Map<String, Value>, String> {
            match obj.get(key) {
                None | Some(Value::Null) => Ok(Map::new()),
                Some(Value::Object(m)) => Ok(m.clone()),
                Some(other) => Err(format!("`{key}` must be an object, got {other}")),
            }
        };
        let strings_at = |key: &str| -> Vec<String> {
            obj.get(key)
                .and_then(Value::as_array)
                .map(|a| {
                    a.iter()
                        .filter_map(|x| x.as_str().map(str::to_string))
                        .collect()
                })
                .unwrap_or_default()
        };
        let mut p = DiagnosisProposal {
            root_causes: object_at("root_causes")?.into_iter().collect(),
            missing_topics: strings_at("missing_topics"),
            extraction_suggestions: object_at("extraction_suggestions")?.into_iter().collect(),
            priority_actions: strings_at("priority_actions"),
            source: ProposalSource::Llm,
            ..Default::default()
        };
        let mut categories: Vec<(String, Value)> =
            object_at("per_category_proposals")?.into_iter().collect();
        for (field, value) in object_at("parameter_suggestions")? {
            if field == "per_category_overrides" {
                if let Value::Object(m) = value {
                    categories.extend(m);
                }
                continue;
            }
            if field_kind(&field).is_some() {
                p.parameter_suggestions.insert(field, value);
            } else {
                p.discovered_dimensions.push(DiscoveredDimension {
                    field,
                    value,
                    category: None,
                });
            }
        }
        for (category, fields) in categories {
            let Value::Object(fields) = fields else {
                return Err(format!(
                    "per-category proposal for `{category}` is not an object"
                ));
            };
            for (field, value) in fields {
                if field_kind(&field).is_some() {
                    p.per_category_proposals
                        .entry(category.clone())
                        .or_default()
                        .insert(field, value);
                } else {
                    p.discovered_dimensions.push(DiscoveredDimension {
                        field,
                        value,
                        category: Some(category.clone()),
                    });
                }
            }
        }
        Ok(p)
    }
}

/// Everything the diagnoser reads about a round.
#[derive(Debug, Clone, Copy)]
pub struct DiagnosisInput<'a> {
    pub benchmark: &'a str,
    pub summary: &'a RoundSummary,
    pub records: &'a [RawResultRecord],
    pub config: &'a RetrievalConfig,
    pub total_memories: usize,
}

/// Rubric trigger levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RubricThresholds {
    /// Share of abstentions that counts as "many".
    pub abstention_rate: f64,
    /// Share of wrong, non-abstaining answers that counts as "many".
    pub wrong_rate: f64,
    /// A category this far below the overall score is weak.
    pub weak_margin: f64,
    /// Mean sources per question, as a share of `max_context`, that counts
    /// as high retrieval.
    pub heavy_retrieval: f64,
}

impl Default for RubricThresholds {
    fn default() -> Self {
        RubricThresholds {
            abstention_rate: 0.25,
            wrong_rate: 0.25,
            weak_margin: 0.05,
            heavy_retrieval: 0.75,
        }
    }
}

/// Half-life proposed when time decay is first switched on.
pub const DEFAULT_HALF_LIFE_DAYS: f64 = 30.0;

#[derive(Debug, Clone)]
struct Suggestion {
    rule: u8,
    category: Option<String>,
    field: &'static str,
    value: Value,
    /// Tuning of a small integer, deferred while anything can be enabled.
    int_tuning: bool,
    note: String,
}

struct Facts<'a> {
    input: DiagnosisInput<'a>,
    abstentions: usize,
    wrong: usize,
    extraction_gaps: usize,
    mean_sources: f64,
    weak: Vec<(String, CategoryKind)>,
}

impl<'a> Facts<'a> {
    fn gather(input: DiagnosisInput<'a>, t: &RubricThresholds) -> Facts<'a> {
        let records = input.records;
        let s = input.summary;
        let abstentions = records.iter().filter(|r| r.is_abstention()).count();
        let wrong = records
            .iter()
            .filter(|r| r.score == 0.0 && r.error.is_none() && !r.is_abstention())
            .count();
        let extraction_gaps = records
            .iter()
            .filter(|r| r.score == 0.0 && r.sources.is_empty())
            .count();
        let mean_sources = if records.is_empty() {
            0.0
        } else {
            records.iter().map(|r| r.sources.len()).sum::<usize>() as f64 / records.len() as f64
        };
        let lowest = if s.per_category.len() >= 2 {
            s.per_category
                .iter()
                .min_by(|a, b| a.1.total_cmp(b.1).then_with(|| a.0.cmp(b.0)))
                .map(|(c, _)| c.clone())
        } else {
            None
        };
        let weak = s
            .per_category
            .iter()
            .filter(|(c, score)| {
                **score < s.overall - t.weak_margin
                    || (lowest.as_ref() == Some(*c) && **score < s.overall)
            })
            .map(|(c, _)| {
                let kind = s
                    .category_kinds
                    .get(c)
                    .copied()
                    .unwrap_or_else(|| CategoryKind::infer(c));
                (c.clone(), kind)
            })
            .collect();
        Facts {
            input,
            abstentions,
            wrong,
            extraction_gaps,
            mean_sources,
            weak,
        }
    }

    fn share(&self, n: usize) -> f64 {
        let total = self.input.records.len().max(1);
        n as f64 / total as f64
    }
}

fn style_for(kind: CategoryKind) -> &'static str {
    match kind {
        CategoryKind::Inferential => "inferential",
        CategoryKind::OpenDomain => "list",
        CategoryKind::Temporal => "strict",
        CategoryKind::Adversarial => "verifying",
        CategoryKind::MultiHop | CategoryKind::Other => "explanatory",
    }
}

fn rubric_suggestions(f: &Facts<'_>, t: &RubricThresholds) -> Vec<Suggestion> {
    let cfg = f.input.config;
    let mut out: Vec<Suggestion> = Vec::new();
    let mut push = |rule, category: Option<&str>, field, value: Value, int_tuning, note: &str| {
        out.push(Suggestion {
            rule,
            category: category.map(str::to_string),
            field,
            value,
            int_tuning,
            note: note.to_string(),
        })
    };

    // 1: many abstentions
    if f.share(f.abstentions) >= t.abstention_rate {
        if cfg.semantic_top_k == 0 {
            push(
                1,
                None,
                "semantic_top_k",
                json!(10),
                false,
                "enable the semantic view",
            );
        }
        if cfg.keyword_top_k > 0 {
            push(
                1,
                None,
                "keyword_top_k",
                json!(cfg.keyword_top_k + 5),
                true,
                "raise keyword_top_k",
            );
        }
        push(
            1,
            None,
            "max_context",
            json!(cfg.max_context + 4),
            true,
            "widen max_context",
        );
        let views_after = [
            cfg.semantic_top_k.max(10),
            cfg.keyword_top_k,
            cfg.structured_top_k,
        ]
        .iter()
        .filter(|k| **k > 0)
        .count();
        if cfg.fusion_mode != crate::retrieval::FusionMode::Rrf && views_after >= 2 {
            push(
                1,
                None,
                "fusion_mode",
                json!("rrf"),
                false,
                "fuse views by reciprocal rank",
            );
        }
    }

    // 2: many wrong answers despite plentiful context
    if f.share(f.wrong) >= t.wrong_rate
        && f.mean_sources >= t.heavy_retrieval * cfg.max_context as f64
    {
        push(
            2,
            None,
            "max_context",
            json!(cfg.max_context.saturating_sub(2)),
            true,
            "narrow max_context",
        );
        let mut tally: BTreeMap<&str, usize> = BTreeMap::new();
        for r in f.input.records.iter().filter(|r| r.score > 0.0) {
            for s in &r.sources {
                for p in &s.provenance {
                    *tally.entry(p.as_str()).or_default() += 1;
                }
            }
        }
        let strongest = tally
            .iter()
            .filter(|(p, _)| matches!(**p, "kw" | "sem" | "str"))
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)));
        if let Some((view, _)) = strongest {
            let field = match *view {
                "kw" => "w_kw",
                "sem" => "w_sem",
                _ => "w_str",
            };
            let current = cfg.get_field(field).and_then(|v| v.as_f64()).unwrap_or(1.0);
            push(
                2,
                None,
                field,
                json!(current + 0.25),
                false,
                "weight the strongest view up",
            );
        }
    }

    let mut lever_for: BTreeSet<String> = BTreeSet::new();
    for (cat, kind) in &f.weak {
        let eff = cfg.effective(Some(cat));
        match kind {
            // 3: temporal weakness
            CategoryKind::Temporal if eff.time_decay_half_life_days.is_none() => {
                push(
                    3,
                    None,
                    "time_decay_half_life_days",
                    json!(DEFAULT_HALF_LIFE_DAYS),
                    false,
                    "enable time decay",
                );
                lever_for.insert(cat.clone());
            }
            // 4: adversarial weakness
            CategoryKind::Adversarial if !eff.enable_entity_swap => {
                push(
                    4,
                    Some(cat),
                    "enable_entity_swap",
                    json!(true),
                    false,
                    "enable entity swap",
                );
                lever_for.insert(cat.clone());
            }
            // 5: multi-hop weakness
            CategoryKind::MultiHop if eff.reflection_rounds == 0 => {
                push(
                    5,
                    Some(cat),
                    "reflection_rounds",
                    json!(1),
                    false,
                    "enable a reflection round",
                );
                lever_for.insert(cat.clone());
            }
            _ => {}
        }
    }

    // 6: exactly one category lags
    if let [(cat, kind)] = f.weak.as_slice() {
        if !lever_for.contains(cat) {
            let eff = cfg.effective(Some(cat));
            let style = style_for(*kind);
            if eff.answer_style.as_str() != style {
                push(
                    6,
                    Some(cat),
                    "answer_style",
                    json!(style),
                    false,
                    "per-category answer style",
                );
            } else {
                push(
                    6,
                    Some(cat),
                    "max_context",
                    json!(eff.max_context + 4),
                    true,
                    "per-category context budget",
                );
            }
        }
    }

    // 8: residual abstentions
    if f.abstentions > 0 && !cfg.enable_answer_verification {
        push(
            8,
            None,
            "enable_answer_verification",
            json!(true),
            false,
            "enable answer verification",
        );
    }

    // 7: enabling beats tuning a small int
    if out.iter().any(|s| !s.int_tuning) {
        out.retain(|s| !s.int_tuning);
    }
    // 9: prompt-surface changes first
    out.sort_by_key(|s| match s.field {
        "enable_answer_verification" => 0,
        "answer_style" => 1,
        _ => 2,
    });
    out
}

/// The fixed decision rubric.
pub fn rubric_diagnose(
    input: DiagnosisInput<'_>,
    thresholds: &RubricThresholds,
) -> DiagnosisProposal {
    let facts = Facts::gather(input, thresholds);
    let mut p = DiagnosisProposal {
        source: ProposalSource::Rubric,
        ..Default::default()
    };
    p.root_causes.insert(
        "extraction_gap".into(),
        json!({"count": facts.extraction_gaps}),
    );
    p.root_causes
        .insert("retrieval_miss".into(), json!({"count": facts.abstentions}));
    p.root_causes
        .insert("answer_error".into(), json!({"count": facts.wrong}));
    for s in rubric_suggestions(&facts, thresholds) {
        match &s.category {
            None => {
                p.parameter_suggestions
                    .entry(s.field.to_string())
                    .or_insert(s.value);
            }
            Some(cat) => {
                p.per_category_proposals
                    .entry(cat.clone())
                    .or_default()
                    .entry(s.field.to_string())
                    .or_insert(s.value);
            }
        }
        let target = s
            .category
            .map(|c| format!(" for category {c}"))
            .unwrap_or_default();
        p.priority_actions
            .push(format!("rule {}: {}{}", s.rule, s.note, target));
    }
    p
}

fn failure_summary(f: &Facts<'_>) -> String {
    let n = f.input.records.len();
    let errors = f.input.records.iter().filter(|r| r.error.is_some()).count();
    format!(
        "- Abstentions ('Unknown' or empty): {}/{n}\n- Wrong answers (score 0, not abstaining): {}/{n}\n- Zero-score questions with no retrieved sources: {}/{n}\n- Questions that errored: {errors}/{n}\n- Mean retrieved sources per question: {:.2}",
        f.abstentions, f.wrong, f.extraction_gaps, f.mean_sources
    )
}

fn category_breakdown(s: &RoundSummary) -> String {
    s.per_category
        .iter()
        .map(|(c, score)| {
            let kind = s
                .category_kinds
                .get(c)
                .map(|k| format!("{k:?}"))
                .unwrap_or_default();
            format!(
                "- {c} ({kind}): {score:.4} over {} questions",
                s.category_counts.get(c).unwrap_or(&0)
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// How many of the worst records are shown to the model.
pub const SAMPLE_FAILURES: usize = 10;

fn sample_failures(records: &[RawResultRecord]) -> String {
    let mut worst: Vec<&RawResultRecord> = records.iter().filter(|r| r.score < 1.0).collect();
    worst.sort_by(|a, b| a.score.total_cmp(&b.score));
    if worst.is_empty() {
        return "(none)".into();
    }
    worst
        .into_iter()
        .take(SAMPLE_FAILURES)
        .map(|r| {
            format!(
                "- [{}] category {} | Q: {} | predicted: {} | reference: {} | score {:.3} | sources {}",
                r.question_id,
                r.category,
                r.question,
                r.prediction,
                r.reference,
                r.score,
                r.sources.len()
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn todo_checklist(f: &Facts<'_>, t: &RubricThresholds) -> String {
    let items: Vec<String> = rubric_suggestions(f, t)
        .into_iter()
        .filter(|s| !s.int_tuning)
        .map(|s| {
            let target = s
                .category
                .map(|c| format!(" (category {c})"))
                .unwrap_or_default();
            format!("- [ ] {} = {}{}: {}", s.field, s.value, target, s.note)
        })
        .collect();
    if items.is_empty() {
        "(none)".into()
    } else {
        items.join("\n")
    }
}

/// The rendered diagnosis prompt.
pub fn diagnosis_prompt(
    input: DiagnosisInput<'_>,
    prompts: &PromptLibrary,
    thresholds: &RubricThresholds,
) -> Result<String, crate::prompts::PromptError> {
    let f = Facts::gather(input, thresholds);
    let config = serde_json::to_string(input.config).expect("configs serialize");
    render(
        &prompts.diagnose,
        &[
            ("benchmark", Var::from(input.benchmark)),
            ("total_memories", Var::from(input.total_memories)),
            ("total_questions", Var::from(input.records.len())),
            ("overall_f1", Var::from(input.summary.overall)),
            ("zero_count", Var::from(input.summary.zero_score_count)),
            ("current_config", Var::from(config)),
            ("failure_summary", Var::from(failure_summary(&f))),
            (
                "category_breakdown",
                Var::from(category_breakdown(input.summary)),
            ),
            ("sample_failures", Var::from(sample_failures(input.records))),
            ("todo_checklist", Var::from(todo_checklist(&f, thresholds))),
        ],
    )
}

/// Diagnoses a round. In LLM mode an unusable reply gets one repair
/// reprompt; a second failure, or any gateway error, falls back to the
/// rubric.
pub fn diagnose(
    input: DiagnosisInput<'_>,
    mode: DiagnosisMode,
    gateway: &Gateway,
    prompts: &PromptLibrary,
    thresholds: &RubricThresholds,
) -> DiagnosisProposal {
    if mode == DiagnosisMode::Rubric {
        return rubric_diagnose(input, thresholds);
    }
    let fallback = |why: String| {
        log::warn!("diagnosis falls back to the rubric: {why}");
        let mut p = rubric_diagnose(input, thresholds);
        p.source = ProposalSource::RubricFallback;
        p
    };
    let prompt = match diagnosis_prompt(input, prompts, thresholds) {
        Ok(p) => p,
        Err(e) => return fallback(e.to_string()),
    };
    let request = ChatRequest::new(None, prompt);
    let parse = |text: &str| {
        parse_json_payload(text)
            .map_err(|e| e.to_string())
            .and_then(|v| DiagnosisProposal::from_value(&v))
    };
    let first = match gateway.chat(&request) {
        Ok(r) => r.text,
        Err(e) => return fallback(e.to_string()),
    };
    if let Ok(p) = parse(&first) {
        return p;
    }
    let repair = request.followed_by(&first, REPAIR_PROMPT);
    match gateway.chat(&repair) {
        Ok(r) => parse(&r.text).unwrap_or_else(fallback),
        Err(e) => fallback(e.to_string()),
    }
}
