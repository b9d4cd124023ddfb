//! Store maintenance: stale working-summary pruning, exact and near
//! duplicate merging, linear importance decay and entity reinforcement.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;
use uuid::Uuid;

use crate::store::{MemoryStore, MemoryType, MemoryUnit, Scope, StoreError};
use crate::text::{normalize_content, normalize_term, token_set};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsolidationConfig {
    pub jaccard_threshold: f64,
    /// Importance lost per day of age.
    pub decay_rate: f64,
    pub importance_floor: f64,
    pub reinforce_step: f64,
    pub reinforce_cap: f64,
    /// Reinforcement a merge survivor gains when it shares an entity with
    /// the unit merged into it.
    pub merge_reinforce_step: f64,
    /// Scheduling horizon reported alongside decay; not a cutoff.
    pub decay_horizon_days: f64,
}

impl Default for ConsolidationConfig {
    fn default() -> Self {
        ConsolidationConfig {
            jaccard_threshold: 0.80,
            decay_rate: 0.05,
            importance_floor: 0.15,
            reinforce_step: 0.05,
            reinforce_cap: 0.30,
            merge_reinforce_step: 0.05,
            decay_horizon_days: 30.0,
        }
    }
}

impl ConsolidationConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.jaccard_threshold > 0.0 && self.jaccard_threshold <= 1.0) {
            return Err(format!(
                "jaccard_threshold {} not in (0, 1]",
                self.jaccard_threshold
            ));
        }
        if !(0.0..1.0).contains(&self.importance_floor) {
            return Err(format!(
                "importance_floor {} not in [0, 1)",
                self.importance_floor
            ));
        }
        if !(self.reinforce_step > 0.0 && self.reinforce_step <= self.reinforce_cap) {
            return Err("reinforce_step must be in (0, reinforce_cap]".into());
        }
        if self.decay_rate < 0.0 || self.merge_reinforce_step < 0.0 {
            return Err("decay_rate and merge_reinforce_step must be non-negative".into());
        }
        Ok(())
    }
}

/// Token Jaccard similarity; two token-less strings count as identical.
pub fn jaccard(a: &str, b: &str) -> f64 {
    jaccard_sets(&token_set(a), &token_set(b))
}

fn jaccard_sets(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeRecord {
    pub victim: Uuid,
    pub survivor: Uuid,
    pub jaccard: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConsolidationReport {
    pub pruned_summaries: usize,
    pub exact_duplicates: usize,
    pub near_duplicates: usize,
    pub decayed: usize,
    pub reinforced: usize,
    pub decay_horizon_days: f64,
    pub merges: Vec<MergeRecord>,
}

impl ConsolidationReport {
    fn absorb(&mut self, other: ConsolidationReport) {
        self.pruned_summaries += other.pruned_summaries;
        self.exact_duplicates += other.exact_duplicates;
        self.near_duplicates += other.near_duplicates;
        self.decayed += other.decayed;
        self.reinforced += other.reinforced;
        self.merges.extend(other.merges);
    }
}

fn in_scope(unit: &MemoryUnit, scope: Option<&Scope>) -> bool {
    scope.is_none_or(|s| unit.scope.base() == s.base())
}

fn active(store: &MemoryStore, scope: Option<&Scope>) -> Vec<MemoryUnit> {
    store
        .units()
        .filter(|u| u.is_active() && in_scope(u, scope))
        .cloned()
        .collect()
}

/// Survivor order: higher importance, then older, then lower id.
fn priority(a: &MemoryUnit, b: &MemoryUnit) -> std::cmp::Ordering {
    b.importance
        .total_cmp(&a.importance)
        .then_with(|| a.created_at.cmp(&b.created_at))
        .then_with(|| a.memory_id.cmp(&b.memory_id))
}

/// Keeps only the newest working summary in each exact scope.
pub fn prune_working_summaries(
    store: &mut MemoryStore,
    scope: Option<&Scope>,
) -> Result<ConsolidationReport, StoreError> {
    let mut groups: BTreeMap<Scope, Vec<MemoryUnit>> = BTreeMap::new();
    for u in active(store, scope) {
        if u.memory_type == MemoryType::WorkingSummary {
            groups.entry(u.scope.clone()).or_default().push(u);
        }
    }
    let mut report = ConsolidationReport::default();
    for mut group in groups.into_values() {
        group.sort_by(|a, b| {
            b.created_at
                .cmp(&a.created_at)
                .then_with(|| a.memory_id.cmp(&b.memory_id))
        });
        let newest = group[0].memory_id;
        for old in &group[1..] {
            store.supersede(old.memory_id, newest)?;
            report.pruned_summaries += 1;
        }
    }
    Ok(report)
}

/// Among units of one base scope with the same type and normalized
/// content, keeps the highest-importance one.
pub fn dedup_exact(
    store: &mut MemoryStore,
    scope: Option<&Scope>,
) -> Result<ConsolidationReport, StoreError> {
    let mut groups: BTreeMap<(Scope, MemoryType, String), Vec<MemoryUnit>> = BTreeMap::new();
    for u in active(store, scope) {
        let key = (u.scope.base(), u.memory_type, normalize_content(&u.content));
        groups.entry(key).or_default().push(u);
    }
    let mut report = ConsolidationReport::default();
    for mut group in groups.into_values().filter(|g| g.len() > 1) {
        group.sort_by(priority);
        let survivor = group[0].memory_id;
        for victim in &group[1..] {
            store.supersede(victim.memory_id, survivor)?;
            report.exact_duplicates += 1;
        }
    }
    Ok(report)
}

fn shares_entity(a: &MemoryUnit, b: &MemoryUnit) -> bool {
    let norm = |u: &MemoryUnit| -> BTreeSet<String> {
        u.entities.iter().map(|e| normalize_term(e)).collect()
    };
    !norm(a).is_disjoint(&norm(b))
}

/// Greedily merges every pair within a base scope whose token Jaccard
/// reaches the threshold. Units are visited by survivor priority, so each
/// survivor absorbs all remaining units similar to it.
pub fn merge_near_duplicates(
    store: &mut MemoryStore,
    scope: Option<&Scope>,
    cfg: &ConsolidationConfig,
) -> Result<ConsolidationReport, StoreError> {
    let mut by_scope: BTreeMap<Scope, Vec<MemoryUnit>> = BTreeMap::new();
    for u in active(store, scope) {
        by_scope.entry(u.scope.base()).or_default().push(u);
    }
    let mut report = ConsolidationReport::default();
    for mut units in by_scope.into_values() {
        units.sort_by(priority);
        let tokens: Vec<BTreeSet<String>> = units.iter().map(|u| token_set(&u.content)).collect();
        let mut merged = vec![false; units.len()];
        for i in 0..units.len() {
            if merged[i] {
                continue;
            }
            for j in i + 1..units.len() {
                if merged[j] {
                    continue;
                }
                let sim = jaccard_sets(&tokens[i], &tokens[j]);
                if sim < cfg.jaccard_threshold {
                    continue;
                }
                merged[j] = true;
                let (survivor, victim) = (&units[i], &units[j]);
                let detail = BTreeMap::from([("jaccard".to_string(), json!(sim))]);
                store.merge_into(victim.memory_id, survivor.memory_id, detail)?;
                let target = store
                    .unit_mut(&survivor.memory_id)
                    .expect("survivor exists");
                target.entities.extend(victim.entities.iter().cloned());
                target.persons.extend(victim.persons.iter().cloned());
                target.locations.extend(victim.locations.iter().cloned());
                target.topics.extend(victim.topics.iter().cloned());
                target.keywords.extend(victim.keywords.iter().cloned());
                target.tags.extend(victim.tags.iter().cloned());
                if cfg.merge_reinforce_step > 0.0
                    && shares_entity(survivor, victim)
                    && store.reinforce(
                        survivor.memory_id,
                        cfg.merge_reinforce_step,
                        cfg.reinforce_cap,
                    )?
                {
                    report.reinforced += 1;
                }
                report.near_duplicates += 1;
                report.merges.push(MergeRecord {
                    victim: victim.memory_id,
                    survivor: survivor.memory_id,
                    jaccard: sim,
                });
            }
        }
    }
    Ok(report)
}

/// Sets each active unit's importance to
/// `max(floor, base_importance - decay_rate * age_days)`. Recomputed from
/// the base value, so repeating it with the same `now` changes nothing.
pub fn decay_importance(
    store: &mut MemoryStore,
    scope: Option<&Scope>,
    now: DateTime<Utc>,
    cfg: &ConsolidationConfig,
) -> Result<ConsolidationReport, StoreError> {
    let mut report = ConsolidationReport {
        decay_horizon_days: cfg.decay_horizon_days,
        ..Default::default()
    };
    for u in active(store, scope) {
        let target = decayed_importance(&u, now, cfg);
        if store.set_importance(u.memory_id, target)? {
            report.decayed += 1;
        }
    }
    Ok(report)
}

pub fn decayed_importance(unit: &MemoryUnit, now: DateTime<Utc>, cfg: &ConsolidationConfig) -> f64 {
    let age_days = ((now - unit.created_at).num_seconds() as f64 / 86_400.0).max(0.0);
    (unit.base_importance - cfg.decay_rate * age_days)
        .max(cfg.importance_floor)
        .min(1.0)
}

/// Reinforces every active unit sharing an entity with the query.
pub fn reinforce_entities(
    store: &mut MemoryStore,
    scope: Option<&Scope>,
    query_entities: &BTreeSet<String>,
    cfg: &ConsolidationConfig,
) -> Result<ConsolidationReport, StoreError> {
    let wanted: BTreeSet<String> = query_entities.iter().map(|e| normalize_term(e)).collect();
    let mut report = ConsolidationReport::default();
    for u in active(store, scope) {
        let hit = u
            .entities
            .iter()
            .any(|e| wanted.contains(&normalize_term(e)));
        if hit && store.reinforce(u.memory_id, cfg.reinforce_step, cfg.reinforce_cap)? {
            report.reinforced += 1;
        }
    }
    Ok(report)
}

/// Prune, exact dedup, near-duplicate merge, decay, in that order.
pub fn consolidate(
    store: &mut MemoryStore,
    scope: Option<&Scope>,
    now: DateTime<Utc>,
    cfg: &ConsolidationConfig,
) -> Result<ConsolidationReport, StoreError> {
    let mut report = ConsolidationReport {
        decay_horizon_days: cfg.decay_horizon_days,
        ..Default::default()
    };
    report.absorb(prune_working_summaries(store, scope)?);
    report.absorb(dedup_exact(store, scope)?);
    report.absorb(merge_near_duplicates(store, scope, cfg)?);
    report.absorb(decay_importance(store, scope, now, cfg)?);
    Ok(report)
}
