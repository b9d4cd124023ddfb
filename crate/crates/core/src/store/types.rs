use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, SubsecRound, Utc};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use super::StoreError;

/// Importance never drops below this floor.
pub const IMPORTANCE_FLOOR: f64 = 0.15;
/// Entity reinforcement is capped here.
pub const REINFORCEMENT_CAP: f64 = 0.30;
/// Units with shorter content are rejected.
pub const MIN_CONTENT_CHARS: usize = 3;

const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryType {
    Episodic,
    Semantic,
    Preference,
    ProjectState,
    WorkingSummary,
    Procedural,
}

impl MemoryType {
    pub const ALL: [MemoryType; 6] = [
        MemoryType::Episodic,
        MemoryType::Semantic,
        MemoryType::Preference,
        MemoryType::ProjectState,
        MemoryType::WorkingSummary,
        MemoryType::Procedural,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MemoryType::Episodic => "episodic",
            MemoryType::Semantic => "semantic",
            MemoryType::Preference => "preference",
            MemoryType::ProjectState => "project_state",
            MemoryType::WorkingSummary => "working_summary",
            MemoryType::Procedural => "procedural",
        }
    }
}

impl FromStr for MemoryType {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MemoryType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| StoreError::Corrupt(format!("unknown memory type `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryStatus {
    Active,
    Superseded,
    Expired,
}

impl MemoryStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            MemoryStatus::Active => "active",
            MemoryStatus::Superseded => "superseded",
            MemoryStatus::Expired => "expired",
        }
    }
}

impl FromStr for MemoryStatus {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "active" => Ok(MemoryStatus::Active),
            "superseded" => Ok(MemoryStatus::Superseded),
            "expired" => Ok(MemoryStatus::Expired),
            other => Err(StoreError::Corrupt(format!("unknown status `{other}`"))),
        }
    }
}

/// Hierarchical owner of a memory: `user:<u>|workspace:<w>[|session:<s>]`.
///
/// The base scope drops the session so that memories from every session of
/// the same user and workspace can be retrieved together.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Scope {
    pub user: String,
    pub workspace: String,
    pub session: Option<String>,
}

impl Scope {
    pub fn new(user: &str, workspace: &str) -> Result<Self, StoreError> {
        let scope = Scope {
            user: user.to_string(),
            workspace: workspace.to_string(),
            session: None,
        };
        scope.validate()?;
        Ok(scope)
    }

    pub fn with_session(&self, session: &str) -> Result<Self, StoreError> {
        let scope = Scope {
            session: Some(session.to_string()),
            ..self.clone()
        };
        scope.validate()?;
        Ok(scope)
    }

    pub fn base(&self) -> Scope {
        Scope {
            session: None,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        let parts = [
            Some(&self.user),
            Some(&self.workspace),
            self.session.as_ref(),
        ];
        for part in parts.into_iter().flatten() {
            if part.is_empty() || part.contains('|') || part.contains(':') {
                return Err(StoreError::Validation(format!(
                    "malformed scope component `{part}`"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "user:{}|workspace:{}", self.user, self.workspace)?;
        if let Some(session) = &self.session {
            write!(f, "|session:{session}")?;
        }
        Ok(())
    }
}

impl FromStr for Scope {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || StoreError::Validation(format!("malformed scope `{s}`"));
        let mut parts = s.split('|');
        let mut field = |name: &str| -> Result<Option<String>, StoreError> {
            match parts.next() {
                None => Ok(None),
                Some(p) => {
                    let (key, value) = p.split_once(':').ok_or_else(bad)?;
                    if key != name {
                        return Err(bad());
                    }
                    Ok(Some(value.to_string()))
                }
            }
        };
        let user = field("user")?.ok_or_else(bad)?;
        let workspace = field("workspace")?.ok_or_else(bad)?;
        let session = field("session")?;
        if parts.next().is_some() {
            return Err(bad());
        }
        let scope = Scope {
            user,
            workspace,
            session,
        };
        scope.validate()?;
        Ok(scope)
    }
}

impl Serialize for Scope {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Scope {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// A single typed memory record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryUnit {
    pub memory_id: Uuid,
    pub scope: Scope,
    pub memory_type: MemoryType,
    pub content: String,
    #[serde(default)]
    pub summary: Option<String>,
    #[serde(default)]
    pub embedding: Option<Vec<f64>>,
    /// Current importance after decay.
    pub importance: f64,
    /// Importance at creation; decay is recomputed from this value.
    pub base_importance: f64,
    pub confidence: f64,
    pub reinforcement: f64,
    #[serde(default)]
    pub entities: BTreeSet<String>,
    #[serde(default)]
    pub persons: BTreeSet<String>,
    #[serde(default)]
    pub locations: BTreeSet<String>,
    #[serde(default)]
    pub topics: BTreeSet<String>,
    #[serde(default)]
    pub tags: BTreeSet<String>,
    #[serde(default)]
    pub keywords: BTreeSet<String>,
    #[serde(default)]
    pub access_count: u64,
    pub status: MemoryStatus,
    #[serde(default)]
    pub supersedes: BTreeSet<Uuid>,
    #[serde(default)]
    pub superseded_by: Option<Uuid>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    #[serde(default)]
    pub expires_at: Option<DateTime<Utc>>,
}

impl MemoryUnit {
    /// An active unit with importance 0.5, confidence 0.8 and no metadata.
    pub fn new(
        memory_id: Uuid,
        scope: Scope,
        memory_type: MemoryType,
        content: impl Into<String>,
        created_at: DateTime<Utc>,
    ) -> Self {
        let created_at = created_at.trunc_subsecs(0);
        MemoryUnit {
            memory_id,
            scope,
            memory_type,
            content: content.into(),
            summary: None,
            embedding: None,
            importance: 0.5,
            base_importance: 0.5,
            confidence: 0.8,
            reinforcement: 0.0,
            entities: BTreeSet::new(),
            persons: BTreeSet::new(),
            locations: BTreeSet::new(),
            topics: BTreeSet::new(),
            tags: BTreeSet::new(),
            keywords: BTreeSet::new(),
            access_count: 0,
            status: MemoryStatus::Active,
            supersedes: BTreeSet::new(),
            superseded_by: None,
            created_at,
            updated_at: created_at,
            expires_at: None,
        }
    }

    pub fn with_importance(mut self, importance: f64) -> Self {
        self.importance = importance;
        self.base_importance = importance;
        self
    }

    pub fn is_active(&self) -> bool {
        self.status == MemoryStatus::Active
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        let fail = |msg: String| Err(StoreError::Validation(msg));
        self.scope.validate()?;
        if self.content.trim().chars().count() < MIN_CONTENT_CHARS {
            return fail(format!("content < {MIN_CONTENT_CHARS} chars"));
        }
        if !(IMPORTANCE_FLOOR..=1.0).contains(&self.importance)
            || !(IMPORTANCE_FLOOR..=1.0).contains(&self.base_importance)
        {
            return fail(format!(
                "importance {} outside [{IMPORTANCE_FLOOR}, 1]",
                self.importance
            ));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return fail(format!("confidence {} outside [0, 1]", self.confidence));
        }
        if !(0.0..=REINFORCEMENT_CAP).contains(&self.reinforcement) {
            return fail(format!(
                "reinforcement {} outside [0, {REINFORCEMENT_CAP}]",
                self.reinforcement
            ));
        }
        if (self.status == MemoryStatus::Superseded) != self.superseded_by.is_some() {
            return fail("superseded_by must be set iff status is superseded".into());
        }
        if let Some(e) = &self.embedding {
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return fail(format!("embedding norm {norm} is not 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Created,
    Merged,
    Decayed,
    Reinforced,
    Superseded,
    Expired,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Created => "created",
            EventKind::Merged => "merged",
            EventKind::Decayed => "decayed",
            EventKind::Reinforced => "reinforced",
            EventKind::Superseded => "superseded",
            EventKind::Expired => "expired",
        }
    }
}

impl FromStr for EventKind {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| StoreError::Corrupt(format!("unknown event kind `{s}`")))
    }
}

/// One entry of the append-only audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEvent {
    pub event_id: u64,
    pub memory_id: Uuid,
    pub kind: EventKind,
    #[serde(default)]
    pub payload: BTreeMap<String, serde_json::Value>,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    Related,
    DependsOn,
    Elaborates,
    Contradicts,
}

impl LinkKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LinkKind::Related => "related",
            LinkKind::DependsOn => "depends_on",
            LinkKind::Elaborates => "elaborates",
            LinkKind::Contradicts => "contradicts",
        }
    }
}

impl FromStr for LinkKind {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| StoreError::Corrupt(format!("unknown link kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MemoryLink {
    pub src: Uuid,
    pub dst: Uuid,
    pub kind: LinkKind,
}
