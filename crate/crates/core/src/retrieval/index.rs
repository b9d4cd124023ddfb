use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::embedding::{cosine, EmbedError};
use crate::store::{MemoryStatus, MemoryStore, MemoryUnit, Scope};
use crate::text::{normalize_term, tokenize};

/// Okapi BM25 constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LexicalIndexConfig {
    pub k1: f64,
    pub b: f64,
}

impl Default for LexicalIndexConfig {
    fn default() -> Self {
        LexicalIndexConfig { k1: 1.5, b: 0.75 }
    }
}

impl LexicalIndexConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), String> {
        if !(self.k1 > 0.0) {
            return Err(format!("k1 must be positive, got {}", self.k1));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(format!("b must be in [0, 1], got {}", self.b));
        }
        Ok(())
    }
}

/// Longest query n-gram matched against metadata vocabularies.
const MAX_NGRAM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MetaField {
    Persons,
    Locations,
    Entities,
}

impl MetaField {
    pub const ALL: [MetaField; 3] = [
        MetaField::Persons,
        MetaField::Locations,
        MetaField::Entities,
    ];

    fn values(self, unit: &MemoryUnit) -> &BTreeSet<String> {
        match self {
            MetaField::Persons => &unit.persons,
            MetaField::Locations => &unit.locations,
            MetaField::Entities => &unit.entities,
        }
    }
}

/// Immutable search structures over the active units of one base scope.
#[derive(Debug, Clone, Default)]
pub struct RetrievalIndex {
    units: BTreeMap<Uuid, MemoryUnit>,
    doc_len: BTreeMap<Uuid, usize>,
    avg_len: f64,
    postings: HashMap<String, Vec<(Uuid, usize)>>,
    vocab: BTreeMap<MetaField, HashMap<String, BTreeSet<Uuid>>>,
}

impl RetrievalIndex {
    pub fn build(store: &MemoryStore, scope: &Scope) -> RetrievalIndex {
        let units = store.query_scope(&scope.base(), true, Some(MemoryStatus::Active));
        RetrievalIndex::from_units(units)
    }

    /// Indexes `units` as given; inactive units are skipped.
    pub fn from_units(units: impl IntoIterator<Item = MemoryUnit>) -> RetrievalIndex {
        let mut index = RetrievalIndex::default();
        for field in MetaField::ALL {
            index.vocab.insert(field, HashMap::new());
        }
        for unit in units.into_iter().filter(MemoryUnit::is_active) {
            let id = unit.memory_id;
            let tokens = tokenize(&unit.content);
            index.doc_len.insert(id, tokens.len());
            let mut tf: BTreeMap<String, usize> = BTreeMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (term, n) in tf {
                index.postings.entry(term).or_default().push((id, n));
            }
            for field in MetaField::ALL {
                let vocab = index.vocab.get_mut(&field).expect("all fields present");
                for value in field.values(&unit) {
                    let key = normalize_term(value);
                    if !key.is_empty() {
                        vocab.entry(key).or_default().insert(id);
                    }
                }
            }
            index.units.insert(id, unit);
        }
        let total: usize = index.doc_len.values().sum();
        index.avg_len = if index.doc_len.is_empty() {
            0.0
        } else {
            total as f64 / index.doc_len.len() as f64
        };
        index
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.avg_len
    }

    pub fn unit(&self, id: &Uuid) -> Option<&MemoryUnit> {
        self.units.get(id)
    }

    pub fn units(&self) -> impl Iterator<Item = &MemoryUnit> {
        self.units.values()
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.units.len() as f64;
        let df = self.doc_freq(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// BM25 score of every document containing at least one query term.
    /// Repeated query terms count once.
    pub fn score_bm25(&self, query: &str, cfg: LexicalIndexConfig) -> BTreeMap<Uuid, f64> {
        let mut scores = BTreeMap::new();
        let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
        for term in terms {
            let Some(postings) = self.postings.get(&term) else {
                continue;
            };
            let idf = self.idf(&term);
            for (id, tf) in postings {
                let tf = *tf as f64;
                let len = self.doc_len[id] as f64;
                let norm = if self.avg_len > 0.0 {
                    1.0 - cfg.b + cfg.b * len / self.avg_len
                } else {
                    1.0
                };
                *scores.entry(*id).or_insert(0.0) +=
                    idf * tf * (cfg.k1 + 1.0) / (tf + cfg.k1 * norm);
            }
        }
        scores
    }

    /// Cosine similarity of every unit to `query`; units without an
    /// embedding score 0.
    pub fn score_semantic(&self, query: &[f64]) -> Result<BTreeMap<Uuid, f64>, EmbedError> {
        let mut scores = BTreeMap::new();
        for (id, unit) in &self.units {
            let s = match &unit.embedding {
                Some(v) => cosine(query, v)?,
                None => 0.0,
            };
            scores.insert(*id, s);
        }
        Ok(scores)
    }

    /// Vocabulary keys of `field` that occur as token n-grams of `query`.
    pub fn matched_terms(&self, field: MetaField, query: &str) -> BTreeSet<String> {
        let Some(vocab) = self.vocab.get(&field) else {
            return BTreeSet::new();
        };
        query_ngrams(query)
            .into_iter()
            .filter(|g| vocab.contains_key(g))
            .collect()
    }

    /// Number of metadata fields (persons, locations, entities) in which a
    /// unit shares at least one value with the query.
    pub fn score_structured(&self, query: &str) -> BTreeMap<Uuid, u32> {
        let mut scores = BTreeMap::new();
        for field in MetaField::ALL {
            let mut hit: BTreeSet<Uuid> = BTreeSet::new();
            for term in self.matched_terms(field, query) {
                hit.extend(&self.vocab[&field][&term]);
            }
            for id in hit {
                *scores.entry(id).or_insert(0) += 1;
            }
        }
        scores
    }
}

/// All contiguous token n-grams of `query` up to length four, joined by
/// single spaces.
pub fn query_ngrams(query: &str) -> BTreeSet<String> {
    let tokens = tokenize(query);
    let mut grams = BTreeSet::new();
    for n in 1..=MAX_NGRAM.min(tokens.len()) {
        for window in tokens.windows(n) {
            grams.insert(window.join(" "));
        }
    }
    grams
}
