use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use super::config::{FusionMode, RetrievalConfig};
use super::index::RetrievalIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Kw,
    Sem,
    Str,
    Swap,
    Decomp,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Kw => "kw",
            Provenance::Sem => "sem",
            Provenance::Str => "str",
            Provenance::Swap => "swap",
            Provenance::Decomp => "decomp",
        }
    }
}

/// The three candidate generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum View {
    Keyword,
    Semantic,
    Structured,
}

impl View {
    pub fn provenance(self) -> Provenance {
        match self {
            View::Keyword => Provenance::Kw,
            View::Semantic => Provenance::Sem,
            View::Structured => Provenance::Str,
        }
    }

    pub fn weight(self, cfg: &RetrievalConfig) -> f64 {
        match self {
            View::Keyword => cfg.w_kw,
            View::Semantic => cfg.w_sem,
            View::Structured => cfg.w_str,
        }
    }
}

/// One view's ranked candidates: `(memory_id, raw score)`, best first.
pub type ViewList = Vec<(Uuid, f64)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub memory_id: Uuid,
    pub s_kw: f64,
    pub s_sem: f64,
    pub s_str: f64,
    pub r_kw: Option<usize>,
    pub r_sem: Option<usize>,
    pub r_str: Option<usize>,
    pub s_fuse: f64,
    pub s: f64,
    pub provenance: BTreeSet<Provenance>,
    /// Rank-fusion score across sub-queries, set when decomposition ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merged_score: Option<f64>,
}

impl ScoredCandidate {
    fn new(memory_id: Uuid) -> Self {
        ScoredCandidate {
            memory_id,
            s_kw: 0.0,
            s_sem: 0.0,
            s_str: 0.0,
            r_kw: None,
            r_sem: None,
            r_str: None,
            s_fuse: 0.0,
            s: 0.0,
            provenance: BTreeSet::new(),
            merged_score: None,
        }
    }

    fn set_view(&mut self, view: View, score: f64, rank: usize) {
        let (s, r) = match view {
            View::Keyword => (&mut self.s_kw, &mut self.r_kw),
            View::Semantic => (&mut self.s_sem, &mut self.r_sem),
            View::Structured => (&mut self.s_str, &mut self.r_str),
        };
        *s = score;
        *r = Some(rank);
        self.provenance.insert(view.provenance());
    }
}

/// Descending score, then ascending id.
pub fn rank_order(a: (f64, &Uuid), b: (f64, &Uuid)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// The `k` best positive entries of `scores`.
pub fn top_k<S: Copy + Into<f64>>(scores: &BTreeMap<Uuid, S>, k: usize) -> ViewList {
    let mut list: ViewList = scores
        .iter()
        .map(|(id, s)| (*id, (*s).into()))
        .filter(|(_, s)| *s > 0.0)
        .collect();
    list.sort_by(|a, b| rank_order((a.1, &a.0), (b.1, &b.0)));
    list.truncate(k);
    list
}

/// Combines per-view lists into one candidate per memory, sorted by fused
/// score. Ranks are 1-based positions in each view's list.
pub fn fuse(
    views: &[(View, ViewList)],
    mode: FusionMode,
    cfg: &RetrievalConfig,
) -> Vec<ScoredCandidate> {
    let mut pool: BTreeMap<Uuid, ScoredCandidate> = BTreeMap::new();
    for (view, list) in views {
        let (lo, hi) = list
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, s)| {
                (lo.min(*s), hi.max(*s))
            });
        for (i, (id, score)) in list.iter().enumerate() {
            let rank = i + 1;
            let c = pool.entry(*id).or_insert_with(|| ScoredCandidate::new(*id));
            c.set_view(*view, *score, rank);
            c.s_fuse += match mode {
                FusionMode::Sum => *score,
                FusionMode::Rrf => 1.0 / (cfg.rrf_k as f64 + rank as f64),
                FusionMode::WeightedSum => {
                    let norm = if hi > lo {
                        (score - lo) / (hi - lo)
                    } else {
                        1.0
                    };
                    view.weight(cfg) * norm
                }
            };
        }
    }
    let mut out: Vec<ScoredCandidate> = pool.into_values().collect();
    out.sort_by(|a, b| rank_order((a.s_fuse, &a.memory_id), (b.s_fuse, &b.memory_id)));
    out
}

/// The instant recency is measured from.
pub fn reference_instant(reference_date: Option<NaiveDate>, now: DateTime<Utc>) -> DateTime<Utc> {
    reference_date
        .map(|d| d.and_hms_opt(0, 0, 0).expect("midnight exists").and_utc())
        .unwrap_or(now)
}

/// `2^(-age / half_life)` with age in days, never negative; 0 without a
/// half-life.
pub fn recency(created_at: DateTime<Utc>, reference: DateTime<Utc>, half_life: Option<f64>) -> f64 {
    match half_life {
        None => 0.0,
        Some(h) => {
            let age_days = ((reference - created_at).num_seconds() as f64 / 86_400.0).max(0.0);
            (-age_days / h).exp2()
        }
    }
}

/// Adds importance, recency and reinforcement to the fused score and sorts.
pub fn hybrid_rank(
    mut fused: Vec<ScoredCandidate>,
    index: &RetrievalIndex,
    cfg: &RetrievalConfig,
    now: DateTime<Utc>,
) -> Vec<ScoredCandidate> {
    let reference = reference_instant(cfg.reference_date, now);
    for c in &mut fused {
        let Some(unit) = index.unit(&c.memory_id) else {
            c.s = c.s_fuse;
            continue;
        };
        let rec = recency(unit.created_at, reference, cfg.time_decay_half_life_days);
        c.s = c.s_fuse
            + cfg.importance_weight * unit.importance
            + cfg.recency_weight * rec
            + unit.reinforcement;
    }
    fused.sort_by(|a, b| rank_order((a.s, &a.memory_id), (b.s, &b.memory_id)));
    fused
}
