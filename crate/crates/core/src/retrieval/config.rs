//! The retrieval configuration: every knob the evolution loop may turn.
//!
//! Configs are read from JSON whose keys are exactly the field names below;
//! unknown keys are rejected. Missing keys take the baseline defaults
//! (lexical view only, `keyword_top_k = 5`, `max_context = 8`).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Sum,
    Rrf,
    WeightedSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerStyle {
    Concise,
    Explanatory,
    Verifying,
    Inferential,
    Strict,
    List,
}

impl AnswerStyle {
    pub const ALL: [AnswerStyle; 6] = [
        AnswerStyle::Concise,
        AnswerStyle::Explanatory,
        AnswerStyle::Verifying,
        AnswerStyle::Inferential,
        AnswerStyle::Strict,
        AnswerStyle::List,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AnswerStyle::Concise => "concise",
            AnswerStyle::Explanatory => "explanatory",
            AnswerStyle::Verifying => "verifying",
            AnswerStyle::Inferential => "inferential",
            AnswerStyle::Strict => "strict",
            AnswerStyle::List => "list",
        }
    }
}

impl fmt::Display for AnswerStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AnswerStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AnswerStyle::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown answer style `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerificationStyle {
    Strict,
    MultiCandidate,
}

impl VerificationStyle {
    pub fn as_str(self) -> &'static str {
        match self {
            VerificationStyle::Strict => "strict",
            VerificationStyle::MultiCandidate => "multi_candidate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub semantic_top_k: u32,
    pub keyword_top_k: u32,
    pub structured_top_k: u32,
    pub max_context: u32,
    pub fusion_mode: FusionMode,
    pub w_sem: f64,
    pub w_kw: f64,
    pub w_str: f64,
    pub rrf_k: u32,
    pub importance_weight: f64,
    pub recency_weight: f64,
    pub enable_entity_swap: bool,
    pub swap_topic_top_k: u32,
    pub swap_merge_top_k: u32,
    pub enable_query_decomposition: bool,
    pub decomposition_max_subqs: u32,
    pub decomposition_merge_top_k: u32,
    pub reflection_rounds: u32,
    pub enable_answer_verification: bool,
    pub verification_style: VerificationStyle,
    pub verification_threshold: f64,
    pub answer_style: AnswerStyle,
    pub time_decay_half_life_days: Option<f64>,
    pub reference_date: Option<NaiveDate>,
    pub per_category_overrides: BTreeMap<String, ConfigOverride>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            semantic_top_k: 0,
            keyword_top_k: 5,
            structured_top_k: 0,
            max_context: 8,
            fusion_mode: FusionMode::Sum,
            w_sem: 1.0,
            w_kw: 1.0,
            w_str: 1.0,
            rrf_k: 60,
            importance_weight: 0.2,
            recency_weight: 0.1,
            enable_entity_swap: false,
            swap_topic_top_k: 5,
            swap_merge_top_k: 5,
            enable_query_decomposition: false,
            decomposition_max_subqs: 3,
            decomposition_merge_top_k: 10,
            reflection_rounds: 0,
            enable_answer_verification: false,
            verification_style: VerificationStyle::Strict,
            verification_threshold: 0.6,
            answer_style: AnswerStyle::Concise,
            time_decay_half_life_days: None,
            reference_date: None,
            per_category_overrides: BTreeMap::new(),
        }
    }
}

/// Category-specific partial config. Only the fields it sets are applied.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic_top_k: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keyword_top_k: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structured_top_k: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_context: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion_mode: Option<FusionMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_sem: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_kw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_str: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rrf_k: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub importance_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recency_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enable_entity_swap: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub swap_topic_top_k: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub swap_merge_top_k: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enable_query_decomposition: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decomposition_max_subqs: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decomposition_merge_top_k: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflection_rounds: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enable_answer_verification: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verification_style: Option<VerificationStyle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verification_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_style: Option<AnswerStyle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_decay_half_life_days: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_date: Option<NaiveDate>,
}

impl ConfigOverride {
    pub fn is_empty(&self) -> bool {
        self == &ConfigOverride::default()
    }
}

/// Value domain of one config field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FieldKind {
    /// A view's candidate count: 0 disables the view, otherwise `[3, 30]`.
    TopK,
    Int {
        lo: u32,
        hi: u32,
    },
    Float {
        lo: f64,
        hi: f64,
    },
    /// `null` or a float in range.
    OptFloat {
        lo: f64,
        hi: f64,
    },
    Bool,
    Enum(&'static [&'static str]),
    /// `null` or a `YYYY-MM-DD` date.
    OptDate,
}

pub const TOP_K_RANGE: (u32, u32) = (3, 30);

pub const FIELDS: &[(&str, FieldKind)] = &[
    ("semantic_top_k", FieldKind::TopK),
    ("keyword_top_k", FieldKind::TopK),
    ("structured_top_k", FieldKind::TopK),
    ("max_context", FieldKind::Int { lo: 6, hi: 30 }),
    (
        "fusion_mode",
        FieldKind::Enum(&["sum", "rrf", "weighted_sum"]),
    ),
    ("w_sem", FieldKind::Float { lo: 0.1, hi: 2.5 }),
    ("w_kw", FieldKind::Float { lo: 0.1, hi: 2.5 }),
    ("w_str", FieldKind::Float { lo: 0.1, hi: 2.5 }),
    ("rrf_k", FieldKind::Int { lo: 1, hi: 200 }),
    ("importance_weight", FieldKind::Float { lo: 0.0, hi: 2.0 }),
    ("recency_weight", FieldKind::Float { lo: 0.0, hi: 2.0 }),
    ("enable_entity_swap", FieldKind::Bool),
    ("swap_topic_top_k", FieldKind::Int { lo: 1, hi: 30 }),
    ("swap_merge_top_k", FieldKind::Int { lo: 1, hi: 30 }),
    ("enable_query_decomposition", FieldKind::Bool),
    ("decomposition_max_subqs", FieldKind::Int { lo: 1, hi: 5 }),
    (
        "decomposition_merge_top_k",
        FieldKind::Int { lo: 1, hi: 30 },
    ),
    ("reflection_rounds", FieldKind::Int { lo: 0, hi: 3 }),
    ("enable_answer_verification", FieldKind::Bool),
    (
        "verification_style",
        FieldKind::Enum(&["strict", "multi_candidate"]),
    ),
    (
        "verification_threshold",
        FieldKind::Float { lo: 0.0, hi: 1.0 },
    ),
    (
        "answer_style",
        FieldKind::Enum(&[
            "concise",
            "explanatory",
            "verifying",
            "inferential",
            "strict",
            "list",
        ]),
    ),
    (
        "time_decay_half_life_days",
        FieldKind::OptFloat {
            lo: 0.5,
            hi: 3650.0,
        },
    ),
    ("reference_date", FieldKind::OptDate),
];

pub fn field_kind(name: &str) -> Option<FieldKind> {
    FIELDS.iter().find(|(n, _)| *n == name).map(|(_, k)| *k)
}

pub fn clamp_top_k(k: u32) -> u32 {
    if k == 0 {
        0
    } else {
        k.clamp(TOP_K_RANGE.0, TOP_K_RANGE.1)
    }
}

/// Checks `value` against `kind` and projects numbers into range.
/// Integral fields accept any number and round it.
pub fn coerce_field(kind: FieldKind, value: &Value) -> Result<Value, String> {
    let number = |v: &Value| {
        v.as_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| format!("expected a number, got {v}"))
    };
    match kind {
        FieldKind::TopK => {
            let x = number(value)?.round().max(0.0);
            Ok(Value::from(clamp_top_k(x.min(u32::MAX as f64) as u32)))
        }
        FieldKind::Int { lo, hi } => {
            let x = number(value)?.round().clamp(lo as f64, hi as f64);
            Ok(Value::from(x as u32))
        }
        FieldKind::Float { lo, hi } => Ok(Value::from(number(value)?.clamp(lo, hi))),
        FieldKind::OptFloat { lo, hi } => match value {
            Value::Null => Ok(Value::Null),
            v => Ok(Value::from(number(v)?.clamp(lo, hi))),
        },
        FieldKind::Bool => value
            .as_bool()
            .map(Value::from)
            .ok_or_else(|| format!("expected true or false, got {value}")),
        FieldKind::Enum(options) => match value.as_str() {
            Some(s) if options.contains(&s) => Ok(value.clone()),
            _ => Err(format!("expected one of {options:?}, got {value}")),
        },
        FieldKind::OptDate => match value {
            Value::Null => Ok(Value::Null),
            Value::String(s) if NaiveDate::parse_from_str(s, "%Y-%m-%d").is_ok() => {
                Ok(value.clone())
            }
            _ => Err(format!("expected null or YYYY-MM-DD, got {value}")),
        },
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("field `{field}`: {message}")]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl RetrievalConfig {
    pub fn from_json(raw: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(raw)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs always serialize")
    }

    fn to_map(&self) -> Map<String, Value> {
        match serde_json::to_value(self).expect("configs always serialize") {
            Value::Object(map) => map,
            _ => unreachable!("config serializes to an object"),
        }
    }

    fn from_map(map: Map<String, Value>) -> Result<Self, serde_json::Error> {
        serde_json::from_value(Value::Object(map))
    }

    /// Value of a top-level field by name.
    pub fn get_field(&self, name: &str) -> Option<Value> {
        self.to_map().remove(name)
    }

    /// Sets fields from `(name, value)` pairs. Invalid entries are skipped
    /// and reported; the valid ones are applied and the result clamped.
    pub fn with_fields<'a>(
        &self,
        fields: impl IntoIterator<Item = (&'a str, &'a Value)>,
    ) -> (RetrievalConfig, Vec<FieldError>) {
        let mut map = self.to_map();
        let mut errors = Vec::new();
        for (name, value) in fields {
            let result = field_kind(name)
                .ok_or_else(|| "not a config field".to_string())
                .and_then(|kind| coerce_field(kind, value));
            match result {
                Ok(v) => {
                    map.insert(name.to_string(), v);
                }
                Err(message) => errors.push(FieldError {
                    field: name.to_string(),
                    message,
                }),
            }
        }
        let config = Self::from_map(map).expect("coerced fields always deserialize");
        (config.clamped(), errors)
    }

    /// Projects every field onto its allowed range, overrides included.
    pub fn clamped(&self) -> RetrievalConfig {
        let mut c = self.clone();
        c.semantic_top_k = clamp_top_k(c.semantic_top_k);
        c.keyword_top_k = clamp_top_k(c.keyword_top_k);
        c.structured_top_k = clamp_top_k(c.structured_top_k);
        c.max_context = c.max_context.clamp(6, 30);
        for w in [&mut c.w_sem, &mut c.w_kw, &mut c.w_str] {
            *w = clamp_float(*w, 0.1, 2.5);
        }
        c.rrf_k = c.rrf_k.clamp(1, 200);
        c.importance_weight = clamp_float(c.importance_weight, 0.0, 2.0);
        c.recency_weight = clamp_float(c.recency_weight, 0.0, 2.0);
        c.swap_topic_top_k = c.swap_topic_top_k.clamp(1, 30);
        c.swap_merge_top_k = c.swap_merge_top_k.clamp(1, 30);
        c.decomposition_max_subqs = c.decomposition_max_subqs.clamp(1, 5);
        c.decomposition_merge_top_k = c.decomposition_merge_top_k.clamp(1, 30);
        c.reflection_rounds = c.reflection_rounds.min(3);
        c.verification_threshold = clamp_float(c.verification_threshold, 0.0, 1.0);
        c.time_decay_half_life_days = c
            .time_decay_half_life_days
            .filter(|h| !h.is_nan())
            .map(|h| h.clamp(0.5, 3650.0));
        c.per_category_overrides = c
            .per_category_overrides
            .into_iter()
            .map(|(cat, o)| (cat, o.clamped()))
            .filter(|(_, o)| !o.is_empty())
            .collect();
        c
    }

    /// Every range violation, by field name. Empty means the config is
    /// already a fixed point of [`clamped`](Self::clamped).
    pub fn validate(&self) -> Vec<FieldError> {
        let clamped = self.clamped();
        if &clamped == self {
            return Vec::new();
        }
        let (a, b) = (self.to_map(), clamped.to_map());
        a.iter()
            .filter(|(k, v)| b.get(*k) != Some(*v))
            .map(|(k, v)| FieldError {
                field: k.clone(),
                message: format!("{v} is out of range"),
            })
            .collect()
    }

    /// The config seen by questions of `category`: global fields overlaid
    /// with that category's override, clamped, without overrides.
    pub fn effective(&self, category: Option<&str>) -> RetrievalConfig {
        let mut base = self.clone();
        let overlay = category
            .and_then(|c| base.per_category_overrides.get(c))
            .cloned();
        base.per_category_overrides.clear();
        match overlay {
            None => base.clamped(),
            Some(o) => {
                let mut map = base.to_map();
                if let Value::Object(fields) = serde_json::to_value(&o).expect("serializes") {
                    map.extend(fields);
                }
                Self::from_map(map)
                    .expect("override fields are config fields")
                    .clamped()
            }
        }
    }

    /// The answer style a category override sets explicitly, if any.
    pub fn override_answer_style(&self, category: Option<&str>) -> Option<AnswerStyle> {
        category
            .and_then(|c| self.per_category_overrides.get(c))
            .and_then(|o| o.answer_style)
    }

    /// Overlays `fields` onto the override for `category`.
    pub fn with_override_fields(
        &self,
        category: &str,
        fields: &Map<String, Value>,
    ) -> (RetrievalConfig, Vec<FieldError>) {
        let mut out = self.clone();
        let mut errors = Vec::new();
        let current = out
            .per_category_overrides
            .get(category)
            .cloned()
            .unwrap_or_default();
        let mut map = match serde_json::to_value(&current).expect("serializes") {
            Value::Object(m) => m,
            _ => unreachable!(),
        };
        for (name, value) in fields {
            let result = field_kind(name)
                .ok_or_else(|| "not a config field".to_string())
                .and_then(|kind| coerce_field(kind, value));
            match result {
                Ok(Value::Null) => {
                    map.remove(name);
                }
                Ok(v) => {
                    map.insert(name.clone(), v);
                }
                Err(message) => errors.push(FieldError {
                    field: format!("per_category_overrides.{category}.{name}"),
                    message,
                }),
            }
        }
        let updated: ConfigOverride =
            serde_json::from_value(Value::Object(map)).expect("coerced fields deserialize");
        out.per_category_overrides
            .insert(category.to_string(), updated);
        (out.clamped(), errors)
    }
}

fn clamp_float(x: f64, lo: f64, hi: f64) -> f64 {
    if x.is_nan() {
        lo
    } else {
        x.clamp(lo, hi)
    }
}

impl ConfigOverride {
    pub fn clamped(&self) -> ConfigOverride {
        let mut o = self.clone();
        o.semantic_top_k = o.semantic_top_k.map(clamp_top_k);
        o.keyword_top_k = o.keyword_top_k.map(clamp_top_k);
        o.structured_top_k = o.structured_top_k.map(clamp_top_k);
        o.max_context = o.max_context.map(|v| v.clamp(6, 30));
        for w in [&mut o.w_sem, &mut o.w_kw, &mut o.w_str] {
            *w = w.map(|x| clamp_float(x, 0.1, 2.5));
        }
        o.rrf_k = o.rrf_k.map(|v| v.clamp(1, 200));
        o.importance_weight = o.importance_weight.map(|x| clamp_float(x, 0.0, 2.0));
        o.recency_weight = o.recency_weight.map(|x| clamp_float(x, 0.0, 2.0));
        o.swap_topic_top_k = o.swap_topic_top_k.map(|v| v.clamp(1, 30));
        o.swap_merge_top_k = o.swap_merge_top_k.map(|v| v.clamp(1, 30));
        o.decomposition_max_subqs = o.decomposition_max_subqs.map(|v| v.clamp(1, 5));
        o.decomposition_merge_top_k = o.decomposition_merge_top_k.map(|v| v.clamp(1, 30));
        o.reflection_rounds = o.reflection_rounds.map(|v| v.min(3));
        o.verification_threshold = o.verification_threshold.map(|x| clamp_float(x, 0.0, 1.0));
        o.time_decay_half_life_days = o
            .time_decay_half_life_days
            .filter(|h| !h.is_nan())
            .map(|h| h.clamp(0.5, 3650.0));
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_are_the_lexical_baseline() {
        let c = RetrievalConfig::default();
        assert_eq!(
            (c.semantic_top_k, c.keyword_top_k, c.structured_top_k),
            (0, 5, 0)
        );
        assert_eq!(c.max_context, 8);
        assert_eq!(c.fusion_mode, FusionMode::Sum);
        assert!(!c.enable_entity_swap && !c.enable_query_decomposition);
        assert!(c.validate().is_empty());
        assert_eq!(RetrievalConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn unknown_fields_are_named() {
        let err = RetrievalConfig::from_json(r#"{"semantic_topk": 4}"#).unwrap_err();
        assert!(err.to_string().contains("semantic_topk"), "{err}");
        let err = RetrievalConfig::from_json(r#"{"per_category_overrides":{"5":{"bogus":true}}}"#)
            .unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn clamp_examples() {
        let (c, errs) = RetrievalConfig::default()
            .with_fields([("semantic_top_k", &json!(50)), ("w_sem", &json!(0.0))]);
        assert!(errs.is_empty());
        assert_eq!(c.semantic_top_k, 30);
        assert_eq!(c.w_sem, 0.1);
        let c = RetrievalConfig {
            semantic_top_k: 1,
            max_context: 100,
            ..Default::default()
        };
        let v = c.validate();
        assert_eq!(v.len(), 2);
        assert_eq!(c.clamped().semantic_top_k, 3);
    }

    #[test]
    fn type_errors_are_per_field() {
        let (c, errs) = RetrievalConfig::default().with_fields([
            ("semantic_top_k", &json!("high")),
            ("fusion_mode", &json!("rrf")),
            ("fusion_mode_x", &json!("rrf")),
        ]);
        assert_eq!(errs.len(), 2);
        assert_eq!(errs[0].field, "semantic_top_k");
        assert_eq!(c.fusion_mode, FusionMode::Rrf);
        assert_eq!(c.semantic_top_k, 0);
    }

    #[test]
    fn effective_config_overlays_category() {
        let mut c = RetrievalConfig::default();
        c.per_category_overrides.insert(
            "5".into(),
            ConfigOverride {
                enable_entity_swap: Some(true),
                max_context: Some(12),
                ..Default::default()
            },
        );
        let e5 = c.effective(Some("5"));
        assert!(e5.enable_entity_swap);
        assert_eq!(e5.max_context, 12);
        assert!(e5.per_category_overrides.is_empty());
        let e1 = c.effective(Some("1"));
        assert!(!e1.enable_entity_swap);
        assert_eq!(e1.max_context, 8);
    }

    #[test]
    fn override_fields_merge_and_round_trip() {
        let fields = json!({"enable_entity_swap": true, "keyword_top_k": 99});
        let (c, errs) =
            RetrievalConfig::default().with_override_fields("5", fields.as_object().unwrap());
        assert!(errs.is_empty());
        let o = &c.per_category_overrides["5"];
        assert_eq!(o.keyword_top_k, Some(30));
        let text = c.to_json_pretty();
        assert_eq!(RetrievalConfig::from_json(&text).unwrap(), c);
        assert!(!text.contains("\"w_sem\": null"));
    }
}
