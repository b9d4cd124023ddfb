//! Typed, scoped memory storage with an append-only audit log and a link
//! graph.
//!
//! [`MemoryStore`] is the working set. It is persisted either as a JSON
//! export or as a single-file SQLite database (see [`persist`]). Writers need
//! `&mut MemoryStore`, so sharing across threads goes through a lock held by
//! the caller; every read accessor returns owned copies.

mod persist;
mod types;

use std::collections::{BTreeMap, HashMap};

use chrono::{DateTime, SubsecRound, Utc};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use uuid::Uuid;

pub use persist::{fulltext_search, load_snapshot, save_snapshot, Snapshot, SCHEMA_VERSION};
pub use types::{
    EventKind, LinkKind, MemoryEvent, MemoryLink, MemoryStatus, MemoryType, MemoryUnit, Scope,
    IMPORTANCE_FLOOR, MIN_CONTENT_CHARS, REINFORCEMENT_CAP,
};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("duplicate memory id {0}")]
    DuplicateId(Uuid),
    #[error("unknown id {0}")]
    UnknownId(Uuid),
    #[error("memory {0} already superseded")]
    AlreadySuperseded(Uuid),
    #[error("invalid link: {0}")]
    InvalidLink(String),
    #[error("schema version mismatch: file has version {found}, engine expects {expected}")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("corrupt snapshot: {0}")]
    Corrupt(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("sqlite error: {0}")]
    Sqlite(#[from] rusqlite::Error),
}

/// Source of timestamps for events and updates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Clock {
    System,
    Fixed(DateTime<Utc>),
}

impl Clock {
    pub fn now(&self) -> DateTime<Utc> {
        match self {
            Clock::System => Utc::now().trunc_subsecs(0),
            Clock::Fixed(t) => *t,
        }
    }
}

pub struct MemoryStore {
    units: BTreeMap<Uuid, MemoryUnit>,
    events: Vec<MemoryEvent>,
    links: Vec<MemoryLink>,
    next_event_id: u64,
    ids: ChaCha8Rng,
    clock: Clock,
}

impl Default for MemoryStore {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for MemoryStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MemoryStore")
            .field("units", &self.units.len())
            .field("events", &self.events.len())
            .field("links", &self.links.len())
            .finish()
    }
}

impl MemoryStore {
    /// Empty store with random ids and the system clock.
    pub fn new() -> Self {
        Self::with_seed(rand::random())
    }

    /// Empty store whose id sequence is fixed by `seed`.
    pub fn with_seed(seed: u64) -> Self {
        MemoryStore {
            units: BTreeMap::new(),
            events: Vec::new(),
            links: Vec::new(),
            next_event_id: 1,
            ids: ChaCha8Rng::seed_from_u64(seed),
            clock: Clock::System,
        }
    }

    pub fn set_clock(&mut self, clock: Clock) {
        self.clock = clock;
    }

    pub fn clock(&self) -> Clock {
        self.clock
    }

    pub fn reseed_ids(&mut self, seed: u64) {
        self.ids = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Fresh v4 UUID drawn from the store's id generator.
    pub fn next_id(&mut self) -> Uuid {
        let mut bytes = [0u8; 16];
        self.ids.fill_bytes(&mut bytes);
        uuid::Builder::from_random_bytes(bytes).into_uuid()
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.units.values().filter(|u| u.is_active()).count()
    }

    pub fn get(&self, id: &Uuid) -> Option<&MemoryUnit> {
        self.units.get(id)
    }

    /// All units ordered by memory id.
    pub fn units(&self) -> impl Iterator<Item = &MemoryUnit> {
        self.units.values()
    }

    pub fn events(&self) -> &[MemoryEvent] {
        &self.events
    }

    pub fn links(&self) -> &[MemoryLink] {
        &self.links
    }

    pub fn put_memory(&mut self, mut unit: MemoryUnit) -> Result<Uuid, StoreError> {
        unit.created_at = unit.created_at.trunc_subsecs(0);
        unit.updated_at = unit.updated_at.trunc_subsecs(0);
        unit.expires_at = unit.expires_at.map(|t| t.trunc_subsecs(0));
        unit.validate()?;
        if self.units.contains_key(&unit.memory_id) {
            return Err(StoreError::DuplicateId(unit.memory_id));
        }
        let id = unit.memory_id;
        let payload = BTreeMap::from([
            ("memory_type".to_string(), json!(unit.memory_type.as_str())),
            ("scope".to_string(), json!(unit.scope.to_string())),
            ("status".to_string(), json!(unit.status.as_str())),
        ]);
        self.units.insert(id, unit);
        self.append_event(id, EventKind::Created, payload);
        Ok(id)
    }

    /// Units in `scope`, newest first.
    ///
    /// With `include_sessions` every unit sharing the base scope matches;
    /// otherwise the scope must match exactly.
    pub fn query_scope(
        &self,
        scope: &Scope,
        include_sessions: bool,
        status_filter: Option<MemoryStatus>,
    ) -> Vec<MemoryUnit> {
        let base = scope.base();
        let mut out: Vec<MemoryUnit> = self
            .units
            .values()
            .filter(|u| {
                if include_sessions {
                    u.scope.base() == base
                } else {
                    &u.scope == scope
                }
            })
            .filter(|u| status_filter.is_none_or(|s| u.status == s))
            .cloned()
            .collect();
        out.sort_by(|a, b| {
            b.created_at
                .cmp(&a.created_at)
                .then_with(|| a.memory_id.cmp(&b.memory_id))
        });
        out
    }

    pub fn supersede(&mut self, old_id: Uuid, new_id: Uuid) -> Result<(), StoreError> {
        self.retire(old_id, new_id, EventKind::Superseded, BTreeMap::new())
    }

    /// Marks `victim` superseded by `survivor` and records a `merged` event.
    pub(crate) fn merge_into(
        &mut self,
        victim: Uuid,
        survivor: Uuid,
        detail: BTreeMap<String, serde_json::Value>,
    ) -> Result<(), StoreError> {
        self.retire(victim, survivor, EventKind::Merged, detail)
    }

    fn retire(
        &mut self,
        old_id: Uuid,
        new_id: Uuid,
        kind: EventKind,
        mut payload: BTreeMap<String, serde_json::Value>,
    ) -> Result<(), StoreError> {
        if old_id == new_id {
            return Err(StoreError::Validation(
                "a memory cannot supersede itself".into(),
            ));
        }
        let old = self
            .units
            .get(&old_id)
            .ok_or(StoreError::UnknownId(old_id))?;
        if !self.units.contains_key(&new_id) {
            return Err(StoreError::UnknownId(new_id));
        }
        if old.status == MemoryStatus::Superseded {
            return Err(StoreError::AlreadySuperseded(old_id));
        }
        if !old.is_active() {
            return Err(StoreError::Validation(format!(
                "memory {old_id} is not active"
            )));
        }
        let now = self.clock.now();
        let old = self.units.get_mut(&old_id).expect("checked above");
        old.status = MemoryStatus::Superseded;
        old.superseded_by = Some(new_id);
        old.updated_at = now;
        let new = self.units.get_mut(&new_id).expect("checked above");
        new.supersedes.insert(old_id);
        new.updated_at = now;
        payload.insert("superseded_by".into(), json!(new_id.to_string()));
        self.append_event(old_id, kind, payload);
        Ok(())
    }

    /// Expires an active unit. Nothing calls this automatically.
    pub fn expire(&mut self, id: Uuid) -> Result<(), StoreError> {
        let now = self.clock.now();
        let unit = self.units.get_mut(&id).ok_or(StoreError::UnknownId(id))?;
        if !unit.is_active() {
            return Err(StoreError::Validation(format!("memory {id} is not active")));
        }
        unit.status = MemoryStatus::Expired;
        unit.updated_at = now;
        self.append_event(id, EventKind::Expired, BTreeMap::new());
        Ok(())
    }

    pub fn add_link(&mut self, src: Uuid, dst: Uuid, kind: LinkKind) -> Result<(), StoreError> {
        if src == dst {
            return Err(StoreError::InvalidLink("src == dst".into()));
        }
        for id in [src, dst] {
            if !self.units.contains_key(&id) {
                return Err(StoreError::UnknownId(id));
            }
        }
        let link = MemoryLink { src, dst, kind };
        if self.links.contains(&link) {
            return Err(StoreError::InvalidLink(format!(
                "duplicate link {src} -[{}]-> {dst}",
                kind.as_str()
            )));
        }
        self.links.push(link);
        Ok(())
    }

    pub(crate) fn set_importance(&mut self, id: Uuid, value: f64) -> Result<bool, StoreError> {
        let now = self.clock.now();
        let unit = self.units.get_mut(&id).ok_or(StoreError::UnknownId(id))?;
        let value = value.clamp(IMPORTANCE_FLOOR, 1.0);
        if unit.importance == value {
            return Ok(false);
        }
        let from = unit.importance;
        unit.importance = value;
        unit.updated_at = now;
        let payload = BTreeMap::from([
            ("from".to_string(), json!(from)),
            ("to".to_string(), json!(value)),
        ]);
        self.append_event(id, EventKind::Decayed, payload);
        Ok(true)
    }

    /// Adds `step` to the unit's reinforcement, capped at `cap`.
    pub(crate) fn reinforce(&mut self, id: Uuid, step: f64, cap: f64) -> Result<bool, StoreError> {
        let now = self.clock.now();
        let unit = self.units.get_mut(&id).ok_or(StoreError::UnknownId(id))?;
        let cap = cap.min(REINFORCEMENT_CAP);
        let value = (unit.reinforcement + step).min(cap);
        if value == unit.reinforcement {
            return Ok(false);
        }
        let from = unit.reinforcement;
        unit.reinforcement = value;
        unit.updated_at = now;
        let payload = BTreeMap::from([
            ("from".to_string(), json!(from)),
            ("to".to_string(), json!(value)),
        ]);
        self.append_event(id, EventKind::Reinforced, payload);
        Ok(true)
    }

    pub(crate) fn unit_mut(&mut self, id: &Uuid) -> Option<&mut MemoryUnit> {
        self.units.get_mut(id)
    }

    fn append_event(
        &mut self,
        memory_id: Uuid,
        kind: EventKind,
        payload: BTreeMap<String, serde_json::Value>,
    ) {
        let event = MemoryEvent {
            event_id: self.next_event_id,
            memory_id,
            kind,
            payload,
            at: self.clock.now(),
        };
        self.next_event_id += 1;
        self.events.push(event);
    }

    pub(crate) fn from_parts(
        units: Vec<MemoryUnit>,
        events: Vec<MemoryEvent>,
        links: Vec<MemoryLink>,
    ) -> Result<Self, StoreError> {
        let mut store = MemoryStore::new();
        for unit in units {
            unit.validate()?;
            if store.units.insert(unit.memory_id, unit.clone()).is_some() {
                return Err(StoreError::DuplicateId(unit.memory_id));
            }
        }
        let mut last = 0;
        for event in &events {
            if event.event_id <= last {
                return Err(StoreError::Corrupt(format!(
                    "event ids not strictly increasing at {}",
                    event.event_id
                )));
            }
            last = event.event_id;
        }
        store.next_event_id = last + 1;
        store.events = events;
        store.links = links;
        Ok(store)
    }

    /// Same units, events and links (id generator and clock are ignored).
    pub fn same_contents(&self, other: &MemoryStore) -> bool {
        self.units == other.units && self.events == other.events && self.links == other.links
    }
}

/// Rebuilds each memory's status by replaying an event log from empty.
pub fn replay_statuses(events: &[MemoryEvent]) -> HashMap<Uuid, MemoryStatus> {
    let mut statuses = HashMap::new();
    for event in events {
        match event.kind {
            EventKind::Created => {
                let status = event
                    .payload
                    .get("status")
                    .and_then(|v| v.as_str())
                    .and_then(|s| s.parse().ok())
                    .unwrap_or(MemoryStatus::Active);
                statuses.insert(event.memory_id, status);
            }
            EventKind::Merged | EventKind::Superseded => {
                statuses.insert(event.memory_id, MemoryStatus::Superseded);
            }
            EventKind::Expired => {
                statuses.insert(event.memory_id, MemoryStatus::Expired);
            }
            EventKind::Decayed | EventKind::Reinforced => {}
        }
    }
    statuses
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
    }

    fn scope(session: &str) -> Scope {
        Scope::new("u", "w").unwrap().with_session(session).unwrap()
    }

    fn unit(store: &mut MemoryStore, content: &str, session: &str) -> MemoryUnit {
        let id = store.next_id();
        MemoryUnit::new(id, scope(session), MemoryType::Episodic, content, t0())
    }

    #[test]
    fn put_accepts_minimal_unit_and_logs_created() {
        let mut store = MemoryStore::with_seed(1);
        let u = unit(&mut store, "apple", "s1");
        let id = store.put_memory(u).unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(store.events().len(), 1);
        assert_eq!(store.events()[0].kind, EventKind::Created);
        assert_eq!(store.events()[0].memory_id, id);
    }

    #[test]
    fn put_rejects_short_content() {
        let mut store = MemoryStore::with_seed(1);
        let u = unit(&mut store, "ab", "s1");
        let err = store.put_memory(u).unwrap_err();
        assert!(err.to_string().contains("content < 3 chars"), "{err}");
        assert!(store.is_empty());
    }

    #[test]
    fn put_rejects_duplicate_id_and_bad_norm() {
        let mut store = MemoryStore::with_seed(1);
        let u = unit(&mut store, "apple", "s1");
        store.put_memory(u.clone()).unwrap();
        assert!(matches!(
            store.put_memory(u),
            Err(StoreError::DuplicateId(_))
        ));

        let mut bad = unit(&mut store, "banana", "s1");
        bad.embedding = Some(vec![0.5, 0.5]);
        assert!(matches!(
            store.put_memory(bad),
            Err(StoreError::Validation(_))
        ));

        let mut low = unit(&mut store, "cherry", "s1");
        low.importance = 0.1;
        assert!(store.put_memory(low).is_err());
    }

    #[test]
    fn query_scope_respects_sessions() {
        let mut store = MemoryStore::with_seed(2);
        let a = unit(&mut store, "first session", "s1");
        let mut b = unit(&mut store, "second session", "s2");
        b.created_at = t0() + chrono::Duration::days(1);
        b.updated_at = b.created_at;
        store.put_memory(a.clone()).unwrap();
        store.put_memory(b.clone()).unwrap();

        let base = Scope::new("u", "w").unwrap();
        let both = store.query_scope(&base, true, None);
        assert_eq!(both.len(), 2);
        assert_eq!(both[0].memory_id, b.memory_id, "newest first");

        let only = store.query_scope(&scope("s1"), false, None);
        assert_eq!(only.len(), 1);
        assert_eq!(only[0].memory_id, a.memory_id);

        let nobody = Scope::new("other", "w").unwrap();
        assert!(store.query_scope(&nobody, true, None).is_empty());
    }

    #[test]
    fn supersede_transitions_and_guards() {
        let mut store = MemoryStore::with_seed(3);
        let a = unit(&mut store, "old fact", "s1");
        let b = unit(&mut store, "new fact", "s1");
        let (a_id, b_id) = (a.memory_id, b.memory_id);
        store.put_memory(a).unwrap();
        store.put_memory(b).unwrap();

        store.supersede(a_id, b_id).unwrap();
        assert_eq!(store.get(&a_id).unwrap().status, MemoryStatus::Superseded);
        assert_eq!(store.get(&a_id).unwrap().superseded_by, Some(b_id));
        assert!(store.get(&b_id).unwrap().supersedes.contains(&a_id));

        let err = store.supersede(a_id, b_id).unwrap_err();
        assert!(err.to_string().contains("already superseded"));
        let missing = Uuid::nil();
        let err = store.supersede(missing, b_id).unwrap_err();
        assert!(err.to_string().contains("unknown id"));
    }

    #[test]
    fn replay_reconstructs_statuses() {
        let mut store = MemoryStore::with_seed(4);
        let ids: Vec<Uuid> = (0..4)
            .map(|i| {
                let u = unit(&mut store, &format!("memory number {i}"), "s1");
                store.put_memory(u).unwrap()
            })
            .collect();
        store.supersede(ids[0], ids[1]).unwrap();
        store.merge_into(ids[2], ids[1], BTreeMap::new()).unwrap();
        store.expire(ids[3]).unwrap();
        let replayed = replay_statuses(store.events());
        for u in store.units() {
            assert_eq!(replayed[&u.memory_id], u.status);
        }
    }

    #[test]
    fn links_are_unique_and_non_reflexive() {
        let mut store = MemoryStore::with_seed(5);
        let ua = unit(&mut store, "aaa", "s1");
        let ub = unit(&mut store, "bbb", "s1");
        let a = store.put_memory(ua).unwrap();
        let b = store.put_memory(ub).unwrap();
        assert!(store.add_link(a, a, LinkKind::Related).is_err());
        store.add_link(a, b, LinkKind::Related).unwrap();
        assert!(store.add_link(a, b, LinkKind::Related).is_err());
        store.add_link(a, b, LinkKind::Elaborates).unwrap();
        assert_eq!(store.links().len(), 2);
    }

    #[test]
    fn seeded_ids_are_reproducible_v4() {
        let mut a = MemoryStore::with_seed(9);
        let mut b = MemoryStore::with_seed(9);
        let x = a.next_id();
        assert_eq!(x, b.next_id());
        assert_eq!(x.get_version_num(), 4);
    }
}
