//! Random fixtures and brute-force reference scorers shared by the
//! property and acceptance suites.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Duration, TimeZone, Utc};
use memtune::embedding::hash_embed;
use memtune::retrieval::{FusionMode, RetrievalConfig};
use memtune::store::{MemoryStore, MemoryType, MemoryUnit, Scope};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uuid::Uuid;

pub const WORDS: &[&str] = &[
    "camping",
    "beach",
    "melanie",
    "caroline",
    "painting",
    "sunrise",
    "lake",
    "pottery",
    "class",
    "adoption",
    "agency",
    "sweden",
    "dog",
    "oliver",
    "race",
    "charity",
    "book",
    "kids",
    "career",
    "counseling",
    "bowl",
    "birthday",
    "trip",
    "museum",
    "paris",
];

pub const PERSONS: &[&str] = &["Melanie", "Caroline", "John", "Oliver Twist"];
pub const LOCATIONS: &[&str] = &["Paris", "Sweden", "the beach", "Lake Tahoe"];
pub const ENTITIES: &[&str] = &["camping", "pottery class", "charity race", "sunrise"];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
}

pub fn sentence(rng: &mut ChaCha8Rng, min: usize, max: usize) -> String {
    let n = rng.gen_range(min..=max);
    (0..n)
        .map(|_| *WORDS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

fn pick_some(rng: &mut ChaCha8Rng, pool: &[&str]) -> BTreeSet<String> {
    pool.iter()
        .filter(|_| rng.gen_bool(0.3))
        .map(|s| s.to_string())
        .collect()
}

/// Options for [`random_unit`].
#[derive(Clone, Copy)]
pub struct UnitShape {
    pub min_words: usize,
    pub max_words: usize,
    pub embeddings: bool,
    pub metadata: bool,
}

impl Default for UnitShape {
    fn default() -> Self {
        UnitShape {
            min_words: 1,
            max_words: 8,
            embeddings: true,
            metadata: true,
        }
    }
}

pub fn random_unit(rng: &mut ChaCha8Rng, id: Uuid, scope: Scope, shape: UnitShape) -> MemoryUnit {
    let content = loop {
        let s = sentence(rng, shape.min_words, shape.max_words);
        if s.len() >= 3 {
            break s;
        }
    };
    let created = epoch() - Duration::seconds(rng.gen_range(0..120 * 86_400));
    let ty = *MemoryType::ALL.choose(rng).unwrap();
    let mut u =
        MemoryUnit::new(id, scope, ty, content, created).with_importance(rng.gen_range(0.15..=1.0));
    u.reinforcement = rng.gen_range(0.0..=0.3);
    if shape.embeddings {
        u.embedding = embed(&u.content);
    }
    if shape.metadata {
        u.persons = pick_some(rng, PERSONS);
        u.locations = pick_some(rng, LOCATIONS);
        u.entities = pick_some(rng, ENTITIES);
    }
    u
}

pub fn scopes() -> Vec<Scope> {
    vec![
        Scope::new("alice", "home").unwrap(),
        Scope::new("alice", "work").unwrap(),
        Scope::new("bob", "home").unwrap(),
    ]
}

/// A store of `n` units spread over a few scopes (some in sessions), with
/// deliberate near and exact duplicates.
pub fn random_store(seed: u64, n: usize) -> MemoryStore {
    let mut rng = rng(seed);
    let mut store = MemoryStore::with_seed(seed);
    let scopes = scopes();
    let mut contents: Vec<(Scope, String)> = Vec::new();
    for _ in 0..n {
        let mut scope = scopes.choose(&mut rng).unwrap().clone();
        if rng.gen_bool(0.3) {
            scope = scope
                .with_session(&format!("s{}", rng.gen_range(0..3)))
                .unwrap();
        }
        let id = store.next_id();
        let mut u = random_unit(&mut rng, id, scope.clone(), UnitShape::default());
        if !contents.is_empty() && rng.gen_bool(0.3) {
            let (s, c) = contents.choose(&mut rng).unwrap().clone();
            u.scope = s;
            u.content = if rng.gen_bool(0.5) {
                c.to_uppercase()
            } else {
                format!("{c} {}", WORDS.choose(&mut rng).unwrap())
            };
            u.embedding = embed(&u.content);
        }
        contents.push((u.scope.clone(), u.content.clone()));
        store.put_memory(u).unwrap();
    }
    store
}

pub fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Okapi BM25 over `docs` with IDF ln(1 + (N - df + 0.5) / (df + 0.5)),
/// distinct query terms, terms taken in sorted order.
pub fn bm25_oracle(docs: &[(Uuid, String)], query: &str, k1: f64, b: f64) -> BTreeMap<Uuid, f64> {
    let toks: Vec<(Uuid, Vec<String>)> = docs.iter().map(|(id, d)| (*id, tokens(d))).collect();
    let n = toks.len() as f64;
    let avg = if toks.is_empty() {
        0.0
    } else {
        toks.iter().map(|(_, t)| t.len()).sum::<usize>() as f64 / n
    };
    let terms: BTreeSet<String> = tokens(query).into_iter().collect();
    let mut out = BTreeMap::new();
    for term in &terms {
        let df = toks.iter().filter(|(_, t)| t.contains(term)).count() as f64;
        if df == 0.0 {
            continue;
        }
        let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
        for (id, t) in &toks {
            let tf = t.iter().filter(|x| *x == term).count() as f64;
            if tf == 0.0 {
                continue;
            }
            let norm = if avg > 0.0 {
                1.0 - b + b * t.len() as f64 / avg
            } else {
                1.0
            };
            *out.entry(*id).or_insert(0.0) += idf * tf * (k1 + 1.0) / (tf + k1 * norm);
        }
    }
    out
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

fn ngrams(query: &str) -> BTreeSet<String> {
    let t = tokens(query);
    let mut out = BTreeSet::new();
    for n in 1..=4usize.min(t.len()) {
        for w in t.windows(n) {
            out.insert(w.join(" "));
        }
    }
    out
}

fn norm_term(s: &str) -> String {
    tokens(s).join(" ")
}

fn structured(units: &[MemoryUnit], query: &str) -> BTreeMap<Uuid, f64> {
    let grams = ngrams(query);
    let mut out = BTreeMap::new();
    for u in units {
        let mut s = 0.0;
        for field in [&u.persons, &u.locations, &u.entities] {
            if field.iter().any(|v| grams.contains(&norm_term(v))) {
                s += 1.0;
            }
        }
        if s > 0.0 {
            out.insert(u.memory_id, s);
        }
    }
    out
}

fn top(scores: &BTreeMap<Uuid, f64>, k: usize) -> Vec<(Uuid, f64)> {
    let mut v: Vec<(Uuid, f64)> = scores
        .iter()
        .filter(|(_, s)| **s > 0.0)
        .map(|(i, s)| (*i, *s))
        .collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.truncate(k);
    v
}

/// Scores every active unit from scratch and returns `(id, final score)`
/// in ranked order, cut to the context budget.
pub fn retrieve_oracle(
    units: &[MemoryUnit],
    query: &str,
    cfg: &RetrievalConfig,
    now: DateTime<Utc>,
) -> Vec<(Uuid, f64)> {
    let units: Vec<MemoryUnit> = units.iter().filter(|u| u.is_active()).cloned().collect();
    let docs: Vec<(Uuid, String)> = units
        .iter()
        .map(|u| (u.memory_id, u.content.clone()))
        .collect();
    let mut views: Vec<(f64, Vec<(Uuid, f64)>)> = Vec::new();
    if cfg.keyword_top_k > 0 {
        views.push((
            cfg.w_kw,
            top(
                &bm25_oracle(&docs, query, 1.5, 0.75),
                cfg.keyword_top_k as usize,
            ),
        ));
    }
    if cfg.semantic_top_k > 0 {
        let q = hash_embed(query);
        let scores = units
            .iter()
            .map(|u| {
                (
                    u.memory_id,
                    u.embedding.as_deref().map_or(0.0, |e| cosine(&q, e)),
                )
            })
            .collect();
        views.push((cfg.w_sem, top(&scores, cfg.semantic_top_k as usize)));
    }
    if cfg.structured_top_k > 0 {
        views.push((
            cfg.w_str,
            top(&structured(&units, query), cfg.structured_top_k as usize),
        ));
    }
    let mut fused: BTreeMap<Uuid, f64> = BTreeMap::new();
    for (w, list) in &views {
        let lo = list.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
        let hi = list.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
        for (rank0, (id, s)) in list.iter().enumerate() {
            let add = match cfg.fusion_mode {
                FusionMode::Sum => *s,
                FusionMode::Rrf => 1.0 / (cfg.rrf_k as f64 + (rank0 + 1) as f64),
                FusionMode::WeightedSum => w * if hi > lo { (s - lo) / (hi - lo) } else { 1.0 },
            };
            *fused.entry(*id).or_insert(0.0) += add;
        }
    }
    let reference = cfg
        .reference_date
        .map(|d| d.and_hms_opt(0, 0, 0).unwrap().and_utc())
        .unwrap_or(now);
    let mut out: Vec<(Uuid, f64)> = fused
        .into_iter()
        .map(|(id, f)| {
            let u = units.iter().find(|u| u.memory_id == id).unwrap();
            let rec = match cfg.time_decay_half_life_days {
                None => 0.0,
                Some(h) => {
                    let age = ((reference - u.created_at).num_seconds() as f64 / 86_400.0).max(0.0);
                    (-age / h).exp2()
                }
            };
            (
                id,
                f + cfg.importance_weight * u.importance
                    + cfg.recency_weight * rec
                    + u.reinforcement,
            )
        })
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out.truncate(cfg.max_context as usize);
    out
}

/// A random valid configuration with swap and decomposition off.
pub fn random_config(rng: &mut ChaCha8Rng) -> RetrievalConfig {
    let k = |rng: &mut ChaCha8Rng| {
        if rng.gen_bool(0.25) {
            0
        } else {
            rng.gen_range(3..=30)
        }
    };
    let mut cfg = RetrievalConfig {
        keyword_top_k: k(rng),
        semantic_top_k: k(rng),
        structured_top_k: k(rng),
        max_context: rng.gen_range(6..=30),
        fusion_mode: *[FusionMode::Sum, FusionMode::Rrf, FusionMode::WeightedSum]
            .choose(rng)
            .unwrap(),
        w_kw: rng.gen_range(0.1..=2.5),
        w_sem: rng.gen_range(0.1..=2.5),
        w_str: rng.gen_range(0.1..=2.5),
        importance_weight: rng.gen_range(0.0..=1.0),
        recency_weight: rng.gen_range(0.0..=1.0),
        time_decay_half_life_days: if rng.gen_bool(0.5) {
            Some(rng.gen_range(1.0..=90.0))
        } else {
            None
        },
        ..RetrievalConfig::default()
    };
    if cfg.keyword_top_k + cfg.semantic_top_k + cfg.structured_top_k == 0 {
        cfg.keyword_top_k = 5;
    }
    cfg
}

/// Hash embedding, or `None` when the tokens cancel out to the zero vector.
pub fn embed(text: &str) -> Option<Vec<f64>> {
    let e = hash_embed(text);
    e.iter().any(|x| *x != 0.0).then_some(e)
}
