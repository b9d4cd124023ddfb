//! Context-grounded answer generation, optional reflection passes and a
//! best-effort verification pass.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::gateway::{parse_json_payload, ChatRequest, Gateway, GatewayError};
use crate::prompts::{render, PromptError, PromptLibrary, Var};
use crate::retrieval::{
    AnswerStyle, Retrieval, RetrievalConfig, RetrievalError, Retriever, ScoredCandidate,
};
use crate::store::MemoryUnit;

pub const DEFAULT_CONFIDENCE: f64 = 0.5;
pub const UNKNOWN: &str = "unknown";

pub(crate) const REPAIR_PROMPT: &str =
    "That reply was not valid JSON. Reply again with ONLY the JSON object requested above.";

/// Prompt routing chosen by the dataset loader for a question.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    #[default]
    Default,
    Adversarial,
    Inferential,
    Nuanced,
    Mcq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerResult {
    pub reasoning: String,
    pub answer: String,
    pub confidence: f64,
    pub verified: bool,
    pub raw_response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub follow_up_query: Option<String>,
}

impl AnswerResult {
    fn unknown(raw_response: String) -> Self {
        AnswerResult {
            reasoning: String::new(),
            answer: UNKNOWN.to_string(),
            confidence: 0.0,
            verified: false,
            raw_response,
            follow_up_query: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AnswerError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// A question as the answering pipeline sees it.
#[derive(Debug, Clone, Copy)]
pub struct Ask<'a> {
    pub question: &'a str,
    pub category: Option<&'a str>,
    pub route: Route,
    /// The four options of a multiple-choice question, A to D.
    pub options: Option<&'a [String]>,
}

impl<'a> Ask<'a> {
    pub fn new(question: &'a str) -> Self {
        Ask {
            question,
            category: None,
            route: Route::Default,
            options: None,
        }
    }
}

/// Whether `answer` is an abstention.
pub fn is_unknown(answer: &str) -> bool {
    let a = answer.trim().trim_end_matches('.').trim().to_lowercase();
    matches!(
        a.as_str(),
        "" | "unknown" | "not specified" | "not mentioned"
    )
}

/// The first standalone letter A to D in `text`, uppercased.
pub fn extract_choice(text: &str) -> Option<char> {
    text.split(|c: char| !c.is_alphanumeric())
        .find_map(|w| match w {
            "a" | "b" | "c" | "d" | "A" | "B" | "C" | "D" => w.chars().next(),
            _ => None,
        })
        .map(|c| c.to_ascii_uppercase())
}

/// Numbered context lines: `[i] (type, YYYY-MM-DD) content`.
pub fn render_context(units: &[MemoryUnit]) -> String {
    units
        .iter()
        .enumerate()
        .map(|(i, u)| {
            format!(
                "[{}] ({}, {}) {}",
                i + 1,
                u.memory_type.as_str(),
                u.created_at.format("%Y-%m-%d"),
                u.content
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn value_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.trim().to_string()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

/// Reads `{reasoning, answer, confidence?, follow_up_query?}`. MCQ answers
/// must contain a choice letter, which replaces the answer.
fn parse_answer(raw: &str, mcq: bool) -> Option<AnswerResult> {
    let value = parse_json_payload(raw).ok()?;
    let obj = value.as_object()?;
    let mut answer = obj.get("answer").and_then(value_text)?;
    if mcq {
        answer = extract_choice(&answer)?.to_string();
    }
    let confidence = obj
        .get("confidence")
        .and_then(Value::as_f64)
        .filter(|c| c.is_finite())
        .map_or(DEFAULT_CONFIDENCE, |c| c.clamp(0.0, 1.0));
    Some(AnswerResult {
        reasoning: obj
            .get("reasoning")
            .and_then(value_text)
            .unwrap_or_default(),
        answer,
        confidence,
        verified: false,
        raw_response: raw.to_string(),
        follow_up_query: obj
            .get("follow_up_query")
            .and_then(Value::as_str)
            .map(str::trim)
            .filter(|q| !q.is_empty())
            .map(str::to_string),
    })
}

pub struct Answerer<'a> {
    pub gateway: &'a Gateway,
    pub prompts: &'a PromptLibrary,
}

impl<'a> Answerer<'a> {
    pub fn new(gateway: &'a Gateway, prompts: &'a PromptLibrary) -> Self {
        Answerer { gateway, prompts }
    }

    /// The system and user prompt for `ask`. An answer style set by the
    /// category override wins over the loader's route, which wins over the
    /// global style. Multiple-choice questions always use the MCQ template.
    pub fn build_request(
        &self,
        ask: &Ask<'_>,
        context: &str,
        cfg: &RetrievalConfig,
    ) -> Result<ChatRequest, PromptError> {
        let p = self.prompts;
        let base: Vec<(&str, Var)> = vec![
            ("question", ask.question.into()),
            ("context", context.into()),
        ];
        if ask.route == Route::Mcq || ask.options.is_some() {
            let opts = ask.options.unwrap_or(&[]);
            let opt = |i: usize| Var::from(opts.get(i).cloned().unwrap_or_default());
            let mut vars = base;
            vars.extend([
                ("opt_a", opt(0)),
                ("opt_b", opt(1)),
                ("opt_c", opt(2)),
                ("opt_d", opt(3)),
            ]);
            return Ok(ChatRequest::new(
                Some(&p.system_mcq),
                render(&p.mcq, &vars)?,
            ));
        }
        let explicit = cfg.override_answer_style(ask.category);
        let user = match (explicit, ask.route) {
            (Some(style), _) => render(p.answer_template(style), &base)?,
            (None, Route::Adversarial) => render(&p.route_adversarial, &base)?,
            (None, Route::Inferential) => {
                render(p.answer_template(AnswerStyle::Inferential), &base)?
            }
            (None, Route::Nuanced) => {
                let specific = p
                    .nuanced_subtype(ask.question)
                    .map(|s| s.specific.clone())
                    .unwrap_or_default();
                let mut vars = base;
                vars.push(("specific", specific.into()));
                render(&p.route_nuanced, &vars)?
            }
            (None, _) => render(
                p.answer_template(cfg.effective(ask.category).answer_style),
                &base,
            )?,
        };
        Ok(ChatRequest::new(Some(&p.system_answer), user))
    }

    /// One generation with a single repair reprompt on malformed output.
    /// Gateway failures are returned; two malformed replies give the
    /// `unknown` sentinel with confidence 0.
    pub fn generate_answer(
        &self,
        ask: &Ask<'_>,
        context: &[MemoryUnit],
        cfg: &RetrievalConfig,
    ) -> Result<AnswerResult, AnswerError> {
        let mcq = ask.route == Route::Mcq || ask.options.is_some();
        let request = self.build_request(ask, &render_context(context), cfg)?;
        let first = self.gateway.chat(&request)?.text;
        if let Some(result) = parse_answer(&first, mcq) {
            return Ok(result);
        }
        let repair = request.followed_by(&first, REPAIR_PROMPT);
        let second = self.gateway.chat(&repair)?.text;
        Ok(parse_answer(&second, mcq).unwrap_or_else(|| AnswerResult::unknown(second)))
    }

    /// Whether verification runs for `candidate`.
    pub fn needs_verification(candidate: &AnswerResult, threshold: f64) -> bool {
        candidate.confidence < threshold || is_unknown(&candidate.answer)
    }

    /// Second pass over a low-confidence or abstaining answer. Any failure
    /// returns the candidate unchanged.
    pub fn verify_answer(
        &self,
        ask: &Ask<'_>,
        context: &[MemoryUnit],
        candidate: AnswerResult,
        cfg: &RetrievalConfig,
    ) -> AnswerResult {
        if !Self::needs_verification(&candidate, cfg.verification_threshold) {
            return candidate;
        }
        let mcq = ask.route == Route::Mcq || ask.options.is_some();
        let prompt = match render(
            self.prompts.verify_template(cfg.verification_style),
            &[
                ("question", ask.question.into()),
                ("context", render_context(context).into()),
                ("candidate", candidate.answer.as_str().into()),
            ],
        ) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("verification prompt failed to render: {e}");
                return candidate;
            }
        };
        let request = ChatRequest::new(Some(&self.prompts.system_verifier), prompt);
        let raw = match self.gateway.chat(&request) {
            Ok(r) => r.text,
            Err(e) => {
                log::warn!("verification skipped: {e}");
                return candidate;
            }
        };
        match parse_answer(&raw, mcq) {
            Some(mut v) => {
                v.verified = true;
                if v.reasoning.is_empty() {
                    v.reasoning = candidate.reasoning;
                }
                v
            }
            None => candidate,
        }
    }

    /// Retrieve, generate, follow up to `reflection_rounds` follow-up
    /// queries, then verify when enabled.
    pub fn answer_question(
        &self,
        ask: &Ask<'_>,
        retriever: &Retriever<'_>,
        cfg: &RetrievalConfig,
    ) -> Result<(AnswerResult, Retrieval), AnswerError> {
        let eff = cfg.effective(ask.category);
        let mut retrieval = retriever.retrieve(ask.question, ask.category, cfg)?;
        let mut result = self.generate_answer(ask, &retrieval.units, cfg)?;
        for _ in 0..eff.reflection_rounds {
            let Some(follow_up) = result.follow_up_query.clone() else {
                break;
            };
            let extra = retriever.retrieve(&follow_up, ask.category, cfg)?;
            merge_retrieval(&mut retrieval, extra);
            result = self.generate_answer(ask, &retrieval.units, cfg)?;
        }
        if eff.enable_answer_verification {
            result = self.verify_answer(ask, &retrieval.units, result, &eff);
        }
        Ok((result, retrieval))
    }
}

/// Appends the units and candidates of `extra` not already present.
fn merge_retrieval(into: &mut Retrieval, extra: Retrieval) {
    let seen: BTreeSet<_> = into.candidates.iter().map(|c| c.memory_id).collect();
    let fresh: Vec<ScoredCandidate> = extra
        .candidates
        .into_iter()
        .filter(|c| !seen.contains(&c.memory_id))
        .collect();
    for c in &fresh {
        if let Some(u) = extra.units.iter().find(|u| u.memory_id == c.memory_id) {
            into.units.push(u.clone());
        }
    }
    into.candidates.extend(fresh);
    into.sub_queries.extend(extra.sub_queries);
}
