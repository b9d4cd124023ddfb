//! Prompt templates and their renderer.
//!
//! Placeholders are `{name}` or `{name:.Nf}` (a float with N decimals),
//! where `name` is a lowercase identifier. `{{` and `}}` render as literal
//! braces. Any other brace is copied as-is, so JSON examples inside a
//! template need no escaping.

use std::collections::BTreeMap;
use std::path::Path;

use regex::Regex;
use serde::Deserialize;

use crate::retrieval::AnswerStyle;
use crate::retrieval::VerificationStyle;

#[derive(Debug, Clone, PartialEq)]
pub enum Var {
    Text(String),
    Float(f64),
}

impl From<&str> for Var {
    fn from(s: &str) -> Self {
        Var::Text(s.to_string())
    }
}

impl From<String> for Var {
    fn from(s: String) -> Self {
        Var::Text(s)
    }
}

impl From<f64> for Var {
    fn from(x: f64) -> Self {
        Var::Float(x)
    }
}

impl From<usize> for Var {
    fn from(x: usize) -> Self {
        Var::Text(x.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PromptError {
    #[error("template variable `{0}` was not supplied")]
    MissingVar(String),
    #[error("prompt file {path}: {message}")]
    File { path: String, message: String },
    #[error("answer styles `{0}` and `{1}` share the same template text")]
    DuplicateStyle(String, String),
    #[error("invalid subtype pattern for `{name}`: {message}")]
    Pattern { name: String, message: String },
}

pub type Vars<'a> = &'a [(&'a str, Var)];

fn is_ident_start(c: char) -> bool {
    c.is_ascii_lowercase() || c == '_'
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_'
}

/// Parses a placeholder body at the start of `s` (just after `{`).
/// Returns (name, precision, bytes consumed including the closing brace).
fn placeholder(s: &str) -> Option<(&str, Option<usize>, usize)> {
    let mut chars = s.char_indices();
    match chars.next() {
        Some((_, c)) if is_ident_start(c) => {}
        _ => return None,
    }
    let end = s
        .char_indices()
        .find(|(_, c)| !is_ident_char(*c))
        .map(|(i, _)| i)?;
    let name = &s[..end];
    let rest = &s[end..];
    if rest.starts_with('}') {
        return Some((name, None, end + 1));
    }
    let spec = rest.strip_prefix(":.")?;
    let digits_len = spec.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits_len == 0 || !spec[digits_len..].starts_with("f}") {
        return None;
    }
    let precision = spec[..digits_len].parse().ok()?;
    Some((name, Some(precision), end + 2 + digits_len + 2))
}

pub fn render(template: &str, vars: Vars<'_>) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len() + 256);
    let mut i = 0;
    while i < template.len() {
        let rest = &template[i..];
        if rest.starts_with("{{") || rest.starts_with("}}") {
            out.push_str(&rest[..1]);
            i += 2;
            continue;
        }
        if let Some(inner) = rest.strip_prefix('{') {
            if let Some((name, precision, used)) = placeholder(inner) {
                let value = vars
                    .iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, v)| v)
                    .ok_or_else(|| PromptError::MissingVar(name.to_string()))?;
                match (value, precision) {
                    (Var::Float(x), Some(p)) => out.push_str(&format!("{x:.p$}")),
                    (Var::Float(x), None) => out.push_str(&x.to_string()),
                    (Var::Text(t), _) => out.push_str(t),
                }
                i += 1 + used;
                continue;
            }
        }
        let c = rest.chars().next().expect("non-empty remainder");
        out.push(c);
        i += c.len_utf8();
    }
    Ok(out)
}

/// Names of the placeholders a template uses, in order of first use.
pub fn placeholders(template: &str) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    let mut i = 0;
    while i < template.len() {
        let rest = &template[i..];
        if rest.starts_with("{{") || rest.starts_with("}}") {
            i += 2;
            continue;
        }
        if let Some(inner) = rest.strip_prefix('{') {
            if let Some((name, _, used)) = placeholder(inner) {
                if !names.iter().any(|n| n == name) {
                    names.push(name.to_string());
                }
                i += 1 + used;
                continue;
            }
        }
        i += rest.chars().next().map_or(1, char::len_utf8);
    }
    names
}

#[derive(Debug, Clone, Deserialize)]
struct SubtypeSpec {
    name: String,
    pattern: String,
    specific: String,
}

/// One routing rule for open-ended inferential questions. An empty
/// pattern matches everything and serves as the fallback.
#[derive(Debug, Clone)]
pub struct NuancedSubtype {
    pub name: String,
    pub pattern: Option<Regex>,
    pub specific: String,
}

#[derive(Debug, Clone)]
pub struct PromptLibrary {
    pub extract: String,
    pub decompose: String,
    pub diagnose: String,
    pub mcq: String,
    pub system_answer: String,
    pub system_mcq: String,
    pub system_verifier: String,
    pub route_adversarial: String,
    pub route_nuanced: String,
    pub answer: BTreeMap<AnswerStyle, String>,
    pub verify_strict: String,
    pub verify_multi_candidate: String,
    pub nuanced_subtypes: Vec<NuancedSubtype>,
}

const FILES: &[&str] = &[
    "extract.txt",
    "decompose.txt",
    "diagnose.txt",
    "mcq.txt",
    "system/answer.txt",
    "system/mcq.txt",
    "system/verifier.txt",
    "route/adversarial.txt",
    "route/nuanced.txt",
    "route/nuanced_subtypes.json",
    "answer/concise.txt",
    "answer/explanatory.txt",
    "answer/verifying.txt",
    "answer/inferential.txt",
    "answer/strict.txt",
    "answer/list.txt",
    "verify/strict.txt",
    "verify/multi_candidate.txt",
];

const BUILTIN: &[(&str, &str)] = &[
    ("extract.txt", include_str!("../prompts/extract.txt")),
    ("decompose.txt", include_str!("../prompts/decompose.txt")),
    ("diagnose.txt", include_str!("../prompts/diagnose.txt")),
    ("mcq.txt", include_str!("../prompts/mcq.txt")),
    (
        "system/answer.txt",
        include_str!("../prompts/system/answer.txt"),
    ),
    ("system/mcq.txt", include_str!("../prompts/system/mcq.txt")),
    (
        "system/verifier.txt",
        include_str!("../prompts/system/verifier.txt"),
    ),
    (
        "route/adversarial.txt",
        include_str!("../prompts/route/adversarial.txt"),
    ),
    (
        "route/nuanced.txt",
        include_str!("../prompts/route/nuanced.txt"),
    ),
    (
        "route/nuanced_subtypes.json",
        include_str!("../prompts/route/nuanced_subtypes.json"),
    ),
    (
        "answer/concise.txt",
        include_str!("../prompts/answer/concise.txt"),
    ),
    (
        "answer/explanatory.txt",
        include_str!("../prompts/answer/explanatory.txt"),
    ),
    (
        "answer/verifying.txt",
        include_str!("../prompts/answer/verifying.txt"),
    ),
    (
        "answer/inferential.txt",
        include_str!("../prompts/answer/inferential.txt"),
    ),
    (
        "answer/strict.txt",
        include_str!("../prompts/answer/strict.txt"),
    ),
    (
        "answer/list.txt",
        include_str!("../prompts/answer/list.txt"),
    ),
    (
        "verify/strict.txt",
        include_str!("../prompts/verify/strict.txt"),
    ),
    (
        "verify/multi_candidate.txt",
        include_str!("../prompts/verify/multi_candidate.txt"),
    ),
];

impl PromptLibrary {
    /// The templates compiled into the binary.
    pub fn builtin() -> PromptLibrary {
        let files: BTreeMap<&str, String> =
            BUILTIN.iter().map(|(k, v)| (*k, v.to_string())).collect();
        PromptLibrary::from_files(&files).expect("builtin prompts are valid")
    }

    /// Loads every template from `dir`, which must mirror the layout of the
    /// crate's `prompts/` directory.
    pub fn load(dir: &Path) -> Result<PromptLibrary, PromptError> {
        let mut files = BTreeMap::new();
        for name in FILES {
            let path = dir.join(name);
            let text = std::fs::read_to_string(&path).map_err(|e| PromptError::File {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            files.insert(*name, text);
        }
        PromptLibrary::from_files(&files)
    }

    fn from_files(files: &BTreeMap<&str, String>) -> Result<PromptLibrary, PromptError> {
        let get = |name: &str| files[name].trim_end_matches('\n').to_string();
        let mut answer = BTreeMap::new();
        for style in AnswerStyle::ALL {
            answer.insert(style, get(&format!("answer/{}.txt", style.as_str())));
        }
        for (i, a) in AnswerStyle::ALL.iter().enumerate() {
            for b in &AnswerStyle::ALL[i + 1..] {
                if answer[a] == answer[b] {
                    return Err(PromptError::DuplicateStyle(a.to_string(), b.to_string()));
                }
            }
        }
        let specs: Vec<SubtypeSpec> = serde_json::from_str(&files["route/nuanced_subtypes.json"])
            .map_err(|e| PromptError::File {
            path: "route/nuanced_subtypes.json".into(),
            message: e.to_string(),
        })?;
        let nuanced_subtypes = specs
            .into_iter()
            .map(|s| {
                let pattern = if s.pattern.is_empty() {
                    None
                } else {
                    Some(Regex::new(&s.pattern).map_err(|e| PromptError::Pattern {
                        name: s.name.clone(),
                        message: e.to_string(),
                    })?)
                };
                Ok(NuancedSubtype {
                    name: s.name,
                    pattern,
                    specific: s.specific,
                })
            })
            .collect::<Result<_, PromptError>>()?;
        Ok(PromptLibrary {
            extract: get("extract.txt"),
            decompose: get("decompose.txt"),
            diagnose: get("diagnose.txt"),
            mcq: get("mcq.txt"),
            system_answer: get("system/answer.txt"),
            system_mcq: get("system/mcq.txt"),
            system_verifier: get("system/verifier.txt"),
            route_adversarial: get("route/adversarial.txt"),
            route_nuanced: get("route/nuanced.txt"),
            answer,
            verify_strict: get("verify/strict.txt"),
            verify_multi_candidate: get("verify/multi_candidate.txt"),
            nuanced_subtypes,
        })
    }

    pub fn answer_template(&self, style: AnswerStyle) -> &str {
        &self.answer[&style]
    }

    pub fn verify_template(&self, style: VerificationStyle) -> &str {
        match style {
            VerificationStyle::Strict => &self.verify_strict,
            VerificationStyle::MultiCandidate => &self.verify_multi_candidate,
        }
    }

    /// The first subtype whose pattern matches `question`.
    pub fn nuanced_subtype(&self, question: &str) -> Option<&NuancedSubtype> {
        self.nuanced_subtypes
            .iter()
            .find(|s| s.pattern.as_ref().is_none_or(|p| p.is_match(question)))
    }
}
