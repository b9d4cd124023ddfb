//! Multi-view retrieval: BM25, cosine and metadata views, fused and ranked
//! under a [`RetrievalConfig`], with optional entity-swap and query
//! decomposition passes.

mod config;
mod fusion;
mod index;

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde_json::Value;
use uuid::Uuid;

pub use config::{
    clamp_top_k, coerce_field, field_kind, AnswerStyle, ConfigError, ConfigOverride, FieldError,
    FieldKind, FusionMode, RetrievalConfig, VerificationStyle, FIELDS, TOP_K_RANGE,
};
pub use fusion::{
    fuse, hybrid_rank, rank_order, recency, reference_instant, top_k, Provenance, ScoredCandidate,
    View, ViewList,
};
pub use index::{query_ngrams, LexicalIndexConfig, MetaField, RetrievalIndex};

use crate::embedding::{EmbedError, Embedder};
use crate::gateway::{parse_json_payload, ChatRequest, Gateway};
use crate::prompts::{render, PromptLibrary};
use crate::store::MemoryUnit;
use crate::text::tokenize;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// Candidates plus the units they point to, in final order.
#[derive(Debug, Clone)]
pub struct Retrieval {
    pub candidates: Vec<ScoredCandidate>,
    pub units: Vec<MemoryUnit>,
    /// Sub-queries actually retrieved for; just the query when
    /// decomposition was off or declined.
    pub sub_queries: Vec<String>,
}

/// Everything retrieval reads besides the config.
pub struct Retriever<'a> {
    pub index: &'a RetrievalIndex,
    pub embedder: &'a dyn Embedder,
    pub gateway: Option<&'a Gateway>,
    pub prompts: &'a PromptLibrary,
    pub lexical: LexicalIndexConfig,
    pub now: DateTime<Utc>,
}

impl<'a> Retriever<'a> {
    pub fn new(
        index: &'a RetrievalIndex,
        embedder: &'a dyn Embedder,
        prompts: &'a PromptLibrary,
        now: DateTime<Utc>,
    ) -> Self {
        Retriever {
            index,
            embedder,
            gateway: None,
            prompts,
            lexical: LexicalIndexConfig::default(),
            now,
        }
    }

    pub fn with_gateway(mut self, gateway: &'a Gateway) -> Self {
        self.gateway = Some(gateway);
        self
    }

    fn embed_query(&self, query: &str) -> Result<Vec<f64>, EmbedError> {
        let mut out = self
            .embedder
            .embed(&[query.to_string()])
            .map_err(|message| EmbedError::Backend {
                batch: 0,
                retries: 0,
                message,
            })?;
        out.pop().ok_or(EmbedError::Backend {
            batch: 0,
            retries: 0,
            message: "no vector returned".into(),
        })
    }

    /// Runs every enabled view with its own top-k (or `k_override` for all
    /// of them).
    pub fn view_lists(
        &self,
        query: &str,
        cfg: &RetrievalConfig,
        k_override: Option<u32>,
    ) -> Result<Vec<(View, ViewList)>, RetrievalError> {
        let k = |own: u32| k_override.unwrap_or(own) as usize;
        let mut views = Vec::new();
        if cfg.keyword_top_k > 0 {
            let scores = self.index.score_bm25(query, self.lexical);
            views.push((View::Keyword, top_k(&scores, k(cfg.keyword_top_k))));
        }
        if cfg.semantic_top_k > 0 {
            let q = self.embed_query(query)?;
            let scores = self.index.score_semantic(&q)?;
            views.push((View::Semantic, top_k(&scores, k(cfg.semantic_top_k))));
        }
        if cfg.structured_top_k > 0 {
            let scores = self.index.score_structured(query);
            views.push((View::Structured, top_k(&scores, k(cfg.structured_top_k))));
        }
        Ok(views)
    }

    /// Views, fusion and hybrid ranking for one query, no augmentation.
    pub fn ranked(
        &self,
        query: &str,
        cfg: &RetrievalConfig,
        k_override: Option<u32>,
    ) -> Result<Vec<ScoredCandidate>, RetrievalError> {
        let views = self.view_lists(query, cfg, k_override)?;
        let fused = fuse(&views, cfg.fusion_mode, cfg);
        Ok(hybrid_rank(fused, self.index, cfg, self.now))
    }

    /// Ranking for one query, with the entity-swap union when enabled.
    fn single(
        &self,
        query: &str,
        cfg: &RetrievalConfig,
    ) -> Result<Vec<ScoredCandidate>, RetrievalError> {
        let base = self.ranked(query, cfg, None)?;
        if !cfg.enable_entity_swap {
            return Ok(base);
        }
        let swap = self.entity_swap(query, cfg)?;
        Ok(union_max(base, swap))
    }

    /// Retrieval on the query with person names removed, cut to
    /// `swap_merge_top_k`. Empty when the query names nobody known.
    pub fn entity_swap(
        &self,
        query: &str,
        cfg: &RetrievalConfig,
    ) -> Result<Vec<ScoredCandidate>, RetrievalError> {
        let Some(q_swap) = swap_query(self.index, query) else {
            return Ok(Vec::new());
        };
        let mut out = self.ranked(&q_swap, cfg, Some(cfg.swap_topic_top_k))?;
        out.truncate(cfg.swap_merge_top_k as usize);
        for c in &mut out {
            c.provenance.insert(Provenance::Swap);
        }
        Ok(out)
    }

    /// Full retrieval for a question of `category`, cut to the context budget.
    pub fn retrieve(
        &self,
        query: &str,
        category: Option<&str>,
        cfg: &RetrievalConfig,
    ) -> Result<Retrieval, RetrievalError> {
        let cfg = cfg.effective(category);
        let sub_queries = match (cfg.enable_query_decomposition, self.gateway) {
            (true, Some(gw)) => decompose_query(
                query,
                cfg.decomposition_max_subqs as usize,
                gw,
                self.prompts,
            ),
            _ => vec![query.to_string()],
        };
        let mut candidates = if sub_queries.len() == 1 && sub_queries[0] == query {
            self.single(query, &cfg)?
        } else {
            let lists = sub_queries
                .iter()
                .map(|q| self.single(q, &cfg))
                .collect::<Result<Vec<_>, _>>()?;
            let mut merged = rrf_merge(lists, cfg.rrf_k);
            merged.truncate(cfg.decomposition_merge_top_k as usize);
            merged
        };
        candidates.truncate(cfg.max_context as usize);
        let units = candidates
            .iter()
            .filter_map(|c| self.index.unit(&c.memory_id).cloned())
            .collect();
        Ok(Retrieval {
            candidates,
            units,
            sub_queries,
        })
    }
}

/// Merges two rankings of the same query: one entry per memory with the
/// larger score and the union of provenance, re-sorted.
pub fn union_max(base: Vec<ScoredCandidate>, extra: Vec<ScoredCandidate>) -> Vec<ScoredCandidate> {
    let mut pool: BTreeMap<Uuid, ScoredCandidate> = BTreeMap::new();
    for c in base.into_iter().chain(extra) {
        match pool.get_mut(&c.memory_id) {
            None => {
                pool.insert(c.memory_id, c);
            }
            Some(existing) => {
                let provenance: BTreeSet<Provenance> =
                    existing.provenance.union(&c.provenance).copied().collect();
                if c.s > existing.s {
                    *existing = c;
                }
                existing.provenance = provenance;
            }
        }
    }
    let mut out: Vec<ScoredCandidate> = pool.into_values().collect();
    out.sort_by(|a, b| rank_order((a.s, &a.memory_id), (b.s, &b.memory_id)));
    out
}

/// Reciprocal-rank merge of per-sub-query rankings. Each candidate keeps
/// its best hybrid score and gains `decomp` provenance; order follows the
/// merged score.
pub fn rrf_merge(lists: Vec<Vec<ScoredCandidate>>, rrf_k: u32) -> Vec<ScoredCandidate> {
    let mut pool: BTreeMap<Uuid, ScoredCandidate> = BTreeMap::new();
    for list in lists {
        for (i, c) in list.into_iter().enumerate() {
            let contribution = 1.0 / (rrf_k as f64 + (i + 1) as f64);
            match pool.get_mut(&c.memory_id) {
                None => {
                    let mut c = c;
                    c.merged_score = Some(contribution);
                    c.provenance.insert(Provenance::Decomp);
                    pool.insert(c.memory_id, c);
                }
                Some(existing) => {
                    let merged = existing.merged_score.unwrap_or(0.0) + contribution;
                    let mut provenance = existing.provenance.clone();
                    provenance.extend(c.provenance.iter().copied());
                    if c.s > existing.s {
                        *existing = c;
                    }
                    existing.provenance = provenance;
                    existing.merged_score = Some(merged);
                }
            }
        }
    }
    let mut out: Vec<ScoredCandidate> = pool.into_values().collect();
    out.sort_by(|a, b| {
        rank_order(
            (a.merged_score.unwrap_or(0.0), &a.memory_id),
            (b.merged_score.unwrap_or(0.0), &b.memory_id),
        )
    });
    out
}

/// `query` with every word naming a known person removed, or `None` when
/// no person is detected. A trailing possessive ("John's") counts as the
/// name.
pub fn swap_query(index: &RetrievalIndex, query: &str) -> Option<String> {
    let persons = index.matched_terms(MetaField::Persons, query);
    if persons.is_empty() {
        return None;
    }
    let person_tokens: BTreeSet<String> = persons.iter().flat_map(|p| tokenize(p)).collect();
    let kept: Vec<&str> = query
        .split_whitespace()
        .filter(|word| {
            let mut tokens = tokenize(word);
            if tokens.len() > 1 && tokens.last().map(String::as_str) == Some("s") {
                tokens.pop();
            }
            tokens.is_empty() || !tokens.iter().all(|t| person_tokens.contains(t))
        })
        .collect();
    Some(kept.join(" "))
}

/// Asks the model to split `query` into at most `max_n` single-hop
/// sub-questions. Any failure yields `[query]`.
pub fn decompose_query(
    query: &str,
    max_n: usize,
    gateway: &Gateway,
    prompts: &PromptLibrary,
) -> Vec<String> {
    let fallback = || vec![query.to_string()];
    let Ok(prompt) = render(
        &prompts.decompose,
        &[("max_n", max_n.into()), ("question", query.into())],
    ) else {
        return fallback();
    };
    let reply = match gateway.chat(&ChatRequest::new(None, prompt)) {
        Ok(r) => r.text,
        Err(e) => {
            log::warn!("decomposition failed, using the original question: {e}");
            return fallback();
        }
    };
    let Ok(Value::Array(items)) = parse_json_payload(&reply) else {
        return fallback();
    };
    let mut subs: Vec<String> = items
        .iter()
        .filter_map(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    subs.truncate(max_n.max(1));
    if subs.is_empty() {
        fallback()
    } else {
        subs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashEmbedder;
    use crate::gateway::{StubRule, StubScript};
    use crate::store::{MemoryType, Scope};
    use chrono::TimeZone;

    fn unit(n: u128, content: &str) -> MemoryUnit {
        let mut u = MemoryUnit::new(
            Uuid::from_u128(n),
            Scope::new("u", "w").unwrap(),
            MemoryType::Semantic,
            content,
            Utc.with_ymd_and_hms(2023, 5, 1, 0, 0, 0).unwrap(),
        );
        u.embedding = Some(HashEmbedder::default().embed_one(content));
        u
    }

    fn now() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2023, 6, 1, 0, 0, 0).unwrap()
    }

    #[test]
    fn swap_query_strips_names() {
        let mut u = unit(1, "John visited Paris");
        u.persons.insert("John".into());
        let idx = RetrievalIndex::from_units([u]);
        assert_eq!(
            swap_query(&idx, "Did John visit Paris?").unwrap(),
            "Did visit Paris?"
        );
        assert_eq!(
            swap_query(&idx, "Where is John's dog?").unwrap(),
            "Where is dog?"
        );
        assert!(swap_query(&idx, "Did Mary visit Paris?").is_none());
    }

    #[test]
    fn union_keeps_max_and_merges_provenance() {
        let mk = |s: f64, p: Provenance| ScoredCandidate {
            s,
            provenance: [p].into(),
            ..fuse(
                &[(View::Keyword, vec![(Uuid::from_u128(1), 1.0)])],
                FusionMode::Sum,
                &RetrievalConfig::default(),
            )[0]
            .clone()
        };
        let out = union_max(
            vec![mk(0.4, Provenance::Kw)],
            vec![mk(0.6, Provenance::Swap)],
        );
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].s, 0.6);
        assert_eq!(out[0].provenance, [Provenance::Kw, Provenance::Swap].into());
    }

    #[test]
    fn baseline_is_lexical_only_and_budgeted() {
        let units: Vec<MemoryUnit> = (1..=20)
            .map(|i| unit(i, &format!("camping trip number {i} with tents")))
            .collect();
        let idx = RetrievalIndex::from_units(units);
        let prompts = PromptLibrary::builtin();
        let emb = HashEmbedder::default();
        let r = Retriever::new(&idx, &emb, &prompts, now());
        let cfg = RetrievalConfig::default();
        let out = r.retrieve("camping tents", None, &cfg).unwrap();
        assert_eq!(out.candidates.len(), 5);
        assert!(out
            .candidates
            .iter()
            .all(|c| c.provenance == [Provenance::Kw].into()));
        let wide = RetrievalConfig {
            keyword_top_k: 20,
            max_context: 6,
            ..Default::default()
        };
        assert_eq!(
            r.retrieve("camping tents", None, &wide)
                .unwrap()
                .units
                .len(),
            6
        );
    }

    #[test]
    fn swap_override_applies_to_its_category_only() {
        let mut a = unit(1, "Caroline adopted a dog named Rex");
        a.persons.insert("Caroline".into());
        let mut b = unit(2, "Melanie loves pottery classes");
        b.persons.insert("Melanie".into());
        let idx = RetrievalIndex::from_units([a, b]);
        let prompts = PromptLibrary::builtin();
        let emb = HashEmbedder::default();
        let r = Retriever::new(&idx, &emb, &prompts, now());
        let mut cfg = RetrievalConfig::default();
        cfg.per_category_overrides.insert(
            "adversarial".into(),
            ConfigOverride {
                enable_entity_swap: Some(true),
                ..Default::default()
            },
        );
        let q = "What pottery classes did Caroline take?";
        let adv = r.retrieve(q, Some("adversarial"), &cfg).unwrap();
        assert!(adv
            .candidates
            .iter()
            .any(|c| c.provenance.contains(&Provenance::Swap)));
        let other = r.retrieve(q, Some("temporal"), &cfg).unwrap();
        assert!(other
            .candidates
            .iter()
            .all(|c| !c.provenance.contains(&Provenance::Swap)));
    }

    #[test]
    fn decomposition_truncates_and_falls_back() {
        let prompts = PromptLibrary::builtin();
        let gw = Gateway::stub(StubScript::new(vec![StubRule::text(
            "Split this question",
            &[r#"["a?", "b?", "c?"]"#, "not json"],
        )]));
        assert_eq!(decompose_query("q", 2, &gw, &prompts), vec!["a?", "b?"]);
        assert_eq!(decompose_query("q", 2, &gw, &prompts), vec!["q"]);
        let broken = Gateway::stub(StubScript::default());
        assert_eq!(decompose_query("q", 3, &broken, &prompts), vec!["q"]);
    }

    #[test]
    fn decomposed_retrieval_is_tagged() {
        let idx = RetrievalIndex::from_units([
            unit(1, "Caroline moved from Sweden"),
            unit(2, "Caroline joined a support group"),
        ]);
        let prompts = PromptLibrary::builtin();
        let emb = HashEmbedder::default();
        let gw = Gateway::stub(StubScript::new(vec![StubRule::text(
            "Split this question",
            &[r#"["Where did Caroline move from?", "What group did Caroline join?"]"#],
        )]));
        let r = Retriever::new(&idx, &emb, &prompts, now()).with_gateway(&gw);
        let cfg = RetrievalConfig {
            enable_query_decomposition: true,
            ..Default::default()
        };
        let out = r.retrieve("multi hop question", None, &cfg).unwrap();
        assert_eq!(out.sub_queries.len(), 2);
        assert_eq!(out.candidates.len(), 2);
        assert!(out
            .candidates
            .iter()
            .all(|c| c.provenance.contains(&Provenance::Decomp) && c.merged_score.is_some()));
    }
}
