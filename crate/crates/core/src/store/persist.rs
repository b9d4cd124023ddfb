//! Snapshot persistence.
//!
//! Paths ending in `.json` use the JSON export
//! `{schema_version, memories, events, links}`; any other path is written as
//! a single-file SQLite database with the tables `memories`, `memories_fts`
//! (FTS5 over content/summary/entities/topics), `memory_events`,
//! `memory_links` and `schema_version`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use chrono::{DateTime, Utc};
use rusqlite::{params, Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use super::{MemoryEvent, MemoryLink, MemoryStore, MemoryUnit, StoreError};

pub const SCHEMA_VERSION: u32 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub schema_version: u32,
    pub memories: Vec<MemoryUnit>,
    pub events: Vec<MemoryEvent>,
    pub links: Vec<MemoryLink>,
}

impl Snapshot {
    pub fn of(store: &MemoryStore) -> Self {
        Snapshot {
            schema_version: SCHEMA_VERSION,
            memories: store.units().cloned().collect(),
            events: store.events().to_vec(),
            links: store.links().to_vec(),
        }
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()) == Some("json")
}

pub fn save_snapshot(store: &MemoryStore, path: impl AsRef<Path>) -> Result<(), StoreError> {
    let path = path.as_ref();
    if is_json(path) {
        let body = serde_json::to_vec_pretty(&Snapshot::of(store))
            .map_err(|e| StoreError::Corrupt(e.to_string()))?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, body)?;
        fs::rename(&tmp, path)?;
        Ok(())
    } else {
        let tmp = path.with_extension("tmp-db");
        if tmp.exists() {
            fs::remove_file(&tmp)?;
        }
        write_sqlite(store, &tmp)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

/// Loads a snapshot into a fresh store. Fails without side effects on a
/// version mismatch or a corrupt file.
pub fn load_snapshot(path: impl AsRef<Path>) -> Result<MemoryStore, StoreError> {
    let path = path.as_ref();
    let snapshot = if is_json(path) {
        read_json(path)?
    } else {
        read_sqlite(path)?
    };
    MemoryStore::from_parts(snapshot.memories, snapshot.events, snapshot.links)
}

fn read_json(path: &Path) -> Result<Snapshot, StoreError> {
    let raw = fs::read(path)?;
    let value: serde_json::Value =
        serde_json::from_slice(&raw).map_err(|e| StoreError::Corrupt(e.to_string()))?;
    let found = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| StoreError::Corrupt("missing schema_version".into()))?;
    if found != u64::from(SCHEMA_VERSION) {
        return Err(StoreError::SchemaVersion {
            found: found as u32,
            expected: SCHEMA_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| StoreError::Corrupt(e.to_string()))
}

const SCHEMA: &str = "
CREATE TABLE schema_version (version INTEGER NOT NULL);
CREATE TABLE memories (
    memory_id TEXT PRIMARY KEY,
    scope_id TEXT NOT NULL,
    memory_type TEXT NOT NULL,
    content TEXT NOT NULL,
    summary TEXT,
    entities TEXT NOT NULL,
    persons TEXT NOT NULL,
    locations TEXT NOT NULL,
    topics TEXT NOT NULL,
    keywords TEXT NOT NULL,
    importance REAL NOT NULL,
    base_importance REAL NOT NULL,
    confidence REAL NOT NULL,
    reinforcement_score REAL NOT NULL,
    access_count INTEGER NOT NULL,
    embedding BLOB,
    tags TEXT NOT NULL,
    status TEXT NOT NULL,
    supersedes TEXT NOT NULL,
    superseded_by TEXT,
    expires_at TEXT,
    created_at TEXT NOT NULL,
    updated_at TEXT NOT NULL
);
CREATE VIRTUAL TABLE memories_fts USING fts5(memory_id UNINDEXED, content, summary, entities, topics);
CREATE TABLE memory_events (
    event_id INTEGER PRIMARY KEY,
    memory_id TEXT NOT NULL,
    kind TEXT NOT NULL,
    payload TEXT NOT NULL,
    at TEXT NOT NULL
);
CREATE TABLE memory_links (
    src TEXT NOT NULL REFERENCES memories(memory_id),
    dst TEXT NOT NULL REFERENCES memories(memory_id),
    kind TEXT NOT NULL,
    ord INTEGER NOT NULL,
    UNIQUE (src, dst, kind)
);
";

fn json_set<T: Serialize>(set: &T) -> String {
    serde_json::to_string(set).expect("string sets always serialize")
}

fn parse_set<T: for<'de> Deserialize<'de>>(raw: &str, column: &str) -> Result<T, StoreError> {
    serde_json::from_str(raw).map_err(|e| StoreError::Corrupt(format!("column {column}: {e}")))
}

fn encode_embedding(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn decode_embedding(bytes: &[u8]) -> Result<Vec<f64>, StoreError> {
    if !bytes.len().is_multiple_of(8) {
        return Err(StoreError::Corrupt("embedding blob length".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn ts(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn parse_ts(raw: &str) -> Result<DateTime<Utc>, StoreError> {
    DateTime::parse_from_rfc3339(raw)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| StoreError::Corrupt(format!("timestamp `{raw}`: {e}")))
}

fn parse_uuid(raw: &str) -> Result<Uuid, StoreError> {
    Uuid::parse_str(raw).map_err(|e| StoreError::Corrupt(format!("uuid `{raw}`: {e}")))
}

fn write_sqlite(store: &MemoryStore, path: &Path) -> Result<(), StoreError> {
    let mut conn = Connection::open(path)?;
    conn.pragma_update(None, "foreign_keys", "ON")?;
    conn.execute_batch(SCHEMA)?;
    let tx = conn.transaction()?;
    tx.execute(
        "INSERT INTO schema_version (version) VALUES (?1)",
        params![SCHEMA_VERSION],
    )?;
    {
        let mut insert = tx.prepare(
            "INSERT INTO memories VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11, ?12, ?13,
             ?14, ?15, ?16, ?17, ?18, ?19, ?20, ?21, ?22, ?23)",
        )?;
        let mut fts = tx.prepare(
            "INSERT INTO memories_fts (memory_id, content, summary, entities, topics)
             VALUES (?1, ?2, ?3, ?4, ?5)",
        )?;
        for u in store.units() {
            insert.execute(params![
                u.memory_id.to_string(),
                u.scope.to_string(),
                u.memory_type.as_str(),
                u.content,
                u.summary,
                json_set(&u.entities),
                json_set(&u.persons),
                json_set(&u.locations),
                json_set(&u.topics),
                json_set(&u.keywords),
                u.importance,
                u.base_importance,
                u.confidence,
                u.reinforcement,
                u.access_count as i64,
                u.embedding.as_deref().map(encode_embedding),
                json_set(&u.tags),
                u.status.as_str(),
                json_set(&u.supersedes),
                u.superseded_by.map(|id| id.to_string()),
                u.expires_at.as_ref().map(ts),
                ts(&u.created_at),
                ts(&u.updated_at),
            ])?;
            fts.execute(params![
                u.memory_id.to_string(),
                u.content,
                u.summary.clone().unwrap_or_default(),
                u.entities.iter().cloned().collect::<Vec<_>>().join(" "),
                u.topics.iter().cloned().collect::<Vec<_>>().join(" "),
            ])?;
        }
        let mut events = tx.prepare(
            "INSERT INTO memory_events (event_id, memory_id, kind, payload, at)
             VALUES (?1, ?2, ?3, ?4, ?5)",
        )?;
        for e in store.events() {
            events.execute(params![
                e.event_id as i64,
                e.memory_id.to_string(),
                e.kind.as_str(),
                json_set(&e.payload),
                ts(&e.at),
            ])?;
        }
        let mut links =
            tx.prepare("INSERT INTO memory_links (src, dst, kind, ord) VALUES (?1, ?2, ?3, ?4)")?;
        for (i, l) in store.links().iter().enumerate() {
            links.execute(params![
                l.src.to_string(),
                l.dst.to_string(),
                l.kind.as_str(),
                i as i64
            ])?;
        }
    }
    tx.commit()?;
    Ok(())
}

fn read_sqlite(path: &Path) -> Result<Snapshot, StoreError> {
    if !path.exists() {
        return Err(StoreError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} does not exist", path.display()),
        )));
    }
    let conn = Connection::open_with_flags(path, OpenFlags::SQLITE_OPEN_READ_ONLY)?;
    let found: u32 = conn
        .query_row("SELECT version FROM schema_version", [], |r| r.get(0))
        .map_err(|e| match e {
            rusqlite::Error::SqliteFailure(..) | rusqlite::Error::QueryReturnedNoRows => {
                StoreError::Corrupt(format!("no schema_version: {e}"))
            }
            other => StoreError::Sqlite(other),
        })?;
    if found != SCHEMA_VERSION {
        return Err(StoreError::SchemaVersion {
            found,
            expected: SCHEMA_VERSION,
        });
    }

    let mut stmt = conn.prepare("SELECT * FROM memories ORDER BY memory_id")?;
    let rows = stmt.query_map([], |r| {
        Ok((
            (
                r.get::<_, String>(0)?,
                r.get::<_, String>(1)?,
                r.get::<_, String>(2)?,
                r.get::<_, String>(3)?,
                r.get::<_, Option<String>>(4)?,
                r.get::<_, String>(5)?,
                r.get::<_, String>(6)?,
                r.get::<_, String>(7)?,
                r.get::<_, String>(8)?,
                r.get::<_, String>(9)?,
            ),
            (
                r.get::<_, f64>(10)?,
                r.get::<_, f64>(11)?,
                r.get::<_, f64>(12)?,
                r.get::<_, f64>(13)?,
                r.get::<_, i64>(14)?,
                r.get::<_, Option<Vec<u8>>>(15)?,
                r.get::<_, String>(16)?,
                r.get::<_, String>(17)?,
                r.get::<_, String>(18)?,
                r.get::<_, Option<String>>(19)?,
                r.get::<_, Option<String>>(20)?,
                r.get::<_, String>(21)?,
                r.get::<_, String>(22)?,
            ),
        ))
    })?;
    let mut memories = Vec::new();
    for row in rows {
        let (
            (id, scope, mtype, content, summary, entities, persons, locations, topics, keywords),
            (
                importance,
                base_importance,
                confidence,
                reinforcement,
                access_count,
                embedding,
                tags,
                status,
                supersedes,
                superseded_by,
                expires_at,
                created_at,
                updated_at,
            ),
        ) = row?;
        memories.push(MemoryUnit {
            memory_id: parse_uuid(&id)?,
            scope: scope.parse()?,
            memory_type: mtype.parse()?,
            content,
            summary,
            embedding: embedding.as_deref().map(decode_embedding).transpose()?,
            importance,
            base_importance,
            confidence,
            reinforcement,
            entities: parse_set(&entities, "entities")?,
            persons: parse_set(&persons, "persons")?,
            locations: parse_set(&locations, "locations")?,
            topics: parse_set(&topics, "topics")?,
            tags: parse_set(&tags, "tags")?,
            keywords: parse_set(&keywords, "keywords")?,
            access_count: access_count as u64,
            status: status.parse()?,
            supersedes: parse_set::<BTreeSet<Uuid>>(&supersedes, "supersedes")?,
            superseded_by: superseded_by.as_deref().map(parse_uuid).transpose()?,
            created_at: parse_ts(&created_at)?,
            updated_at: parse_ts(&updated_at)?,
            expires_at: expires_at.as_deref().map(parse_ts).transpose()?,
        });
    }

    let mut stmt = conn.prepare(
        "SELECT event_id, memory_id, kind, payload, at FROM memory_events ORDER BY event_id",
    )?;
    let rows = stmt.query_map([], |r| {
        Ok((
            r.get::<_, i64>(0)?,
            r.get::<_, String>(1)?,
            r.get::<_, String>(2)?,
            r.get::<_, String>(3)?,
            r.get::<_, String>(4)?,
        ))
    })?;
    let mut events = Vec::new();
    for row in rows {
        let (event_id, memory_id, kind, payload, at) = row?;
        events.push(MemoryEvent {
            event_id: event_id as u64,
            memory_id: parse_uuid(&memory_id)?,
            kind: kind.parse()?,
            payload: parse_set(&payload, "payload")?,
            at: parse_ts(&at)?,
        });
    }

    let mut stmt = conn.prepare("SELECT src, dst, kind FROM memory_links ORDER BY ord")?;
    let rows = stmt.query_map([], |r| {
        Ok((
            r.get::<_, String>(0)?,
            r.get::<_, String>(1)?,
            r.get::<_, String>(2)?,
        ))
    })?;
    let mut links = Vec::new();
    for row in rows {
        let (src, dst, kind) = row?;
        links.push(MemoryLink {
            src: parse_uuid(&src)?,
            dst: parse_uuid(&dst)?,
            kind: kind.parse()?,
        });
    }

    Ok(Snapshot {
        schema_version: found,
        memories,
        events,
        links,
    })
}

/// Full-text search over a SQLite snapshot's FTS5 index. Returns memory ids
/// in FTS rank order.
pub fn fulltext_search(path: impl AsRef<Path>, query: &str) -> Result<Vec<Uuid>, StoreError> {
    let conn = Connection::open_with_flags(path.as_ref(), OpenFlags::SQLITE_OPEN_READ_ONLY)?;
    let terms: Vec<String> = crate::text::tokenize(query)
        .into_iter()
        .map(|t| format!("\"{t}\""))
        .collect();
    if terms.is_empty() {
        return Ok(Vec::new());
    }
    let mut stmt = conn
        .prepare("SELECT memory_id FROM memories_fts WHERE memories_fts MATCH ?1 ORDER BY rank")?;
    let ids = stmt
        .query_map(params![terms.join(" OR ")], |r| r.get::<_, String>(0))?
        .collect::<Result<Vec<_>, _>>()?;
    ids.iter().map(|s| parse_uuid(s)).collect()
}
