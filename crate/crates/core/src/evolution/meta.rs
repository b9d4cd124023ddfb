//! Guarded configuration update: revert on regression, explore on
//! stagnation, otherwise apply the proposal.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::diagnose::{DiagnosisMode, DiagnosisProposal};
use super::perturb::perturb_config;
use crate::retrieval::{FieldError, RetrievalConfig};

/// Score differences within this distance of a threshold count as equal
/// to it, so that a drop of exactly the threshold does not trigger.
pub const SCORE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuardConfig {
    /// A drop from the previous round larger than this reverts.
    pub revert_threshold: f64,
    /// Shared threshold for stagnation and convergence.
    pub convergence_eps: f64,
    /// Stagnation threshold, when it should differ from `convergence_eps`.
    pub explore_eps: Option<f64>,
    /// Convergence threshold, when it should differ from `convergence_eps`.
    pub stop_eps: Option<f64>,
    /// Number of evaluated rounds, at most.
    pub max_rounds: usize,
    pub perturb_scale: f64,
    /// Consecutive sub-threshold changes that trigger exploration.
    pub stagnation_window: u32,
    pub diagnosis_mode: DiagnosisMode,
    pub seed: u64,
}

impl Default for GuardConfig {
    fn default() -> Self {
        GuardConfig {
            revert_threshold: 0.01,
            convergence_eps: 0.005,
            explore_eps: None,
            stop_eps: None,
            max_rounds: 7,
            perturb_scale: 0.15,
            stagnation_window: 2,
            diagnosis_mode: DiagnosisMode::Llm,
            seed: 0,
        }
    }
}

impl GuardConfig {
    pub fn explore_eps(&self) -> f64 {
        self.explore_eps.unwrap_or(self.convergence_eps)
    }

    pub fn stop_eps(&self) -> f64 {
        self.stop_eps.unwrap_or(self.convergence_eps)
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), String> {
        let positive = |name: &str, x: f64| {
            if x > 0.0 {
                Ok(())
            } else {
                Err(format!("{name} must be positive, got {x}"))
            }
        };
        positive("revert_threshold", self.revert_threshold)?;
        positive("convergence_eps", self.convergence_eps)?;
        positive("explore_eps", self.explore_eps())?;
        positive("stop_eps", self.stop_eps())?;
        if self.max_rounds < 1 {
            return Err("max_rounds must be at least 1".into());
        }
        if self.stagnation_window < 1 {
            return Err("stagnation_window must be at least 1".into());
        }
        if !(self.perturb_scale >= 0.0) {
            return Err(format!(
                "perturb_scale must be non-negative, got {}",
                self.perturb_scale
            ));
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<GuardConfig, String> {
        let raw = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let g: GuardConfig =
            serde_json::from_str(&raw).map_err(|e| format!("{}: {e}", path.display()))?;
        g.validate()?;
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Revert,
    Explore,
    Apply,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Revert => "revert",
            Branch::Explore => "explore",
            Branch::Apply => "apply",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    Converged,
    MaxRounds,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundEntry {
    pub round: usize,
    pub score: f64,
    pub config: RetrievalConfig,
    /// The update taken after this round; `None` on the final round.
    pub branch: Option<Branch>,
    /// Every question failed; the score was carried over.
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionState {
    /// Index of the next round to evaluate.
    pub round: usize,
    pub history: Vec<RoundEntry>,
    pub best_score: f64,
    pub best_config: RetrievalConfig,
    pub best_round: Option<usize>,
    pub stagnation_count: u32,
    pub terminated: bool,
    pub reason: Option<TerminationReason>,
}

impl EvolutionState {
    pub fn new(theta0: &RetrievalConfig) -> Self {
        EvolutionState {
            round: 0,
            history: Vec::new(),
            best_score: 0.0,
            best_config: theta0.clamped(),
            best_round: None,
            stagnation_count: 0,
            terminated: false,
            reason: None,
        }
    }

    /// Appends an evaluated round and updates the best-so-far.
    pub fn record(&mut self, score: f64, config: &RetrievalConfig, degraded: bool) {
        let round = self.history.len();
        if self.best_round.is_none() || score > self.best_score {
            self.best_score = score;
            self.best_config = config.clone();
            self.best_round = Some(round);
        }
        self.history.push(RoundEntry {
            round,
            score,
            config: config.clone(),
            branch: None,
            degraded,
        });
        self.round = round + 1;
    }

    /// Score of the latest round and of the one before it.
    fn last_two(&self) -> (Option<f64>, Option<f64>) {
        let n = self.history.len();
        let cur = n.checked_sub(1).map(|i| self.history[i].score);
        let prev = n.checked_sub(2).map(|i| self.history[i].score);
        (prev, cur)
    }

    /// Whether the loop ends after the latest round. Convergence needs the
    /// previous round to have explored and the latest one to have gained
    /// less than the stop threshold.
    pub fn termination(&self, guards: &GuardConfig) -> Option<TerminationReason> {
        let n = self.history.len();
        if let (Some(prev), Some(cur)) = self.last_two() {
            let explored = self.history[n - 2].branch == Some(Branch::Explore);
            if explored && cur - prev < guards.stop_eps() - SCORE_TOLERANCE {
                return Some(TerminationReason::Converged);
            }
        }
        (n >= guards.max_rounds).then_some(TerminationReason::MaxRounds)
    }

    pub fn terminate(&mut self, reason: TerminationReason) {
        self.terminated = true;
        self.reason = Some(reason);
    }

    pub fn branches(&self) -> Vec<Option<Branch>> {
        self.history.iter().map(|h| h.branch).collect()
    }
}

/// Projects every field onto its allowed range.
pub fn clamp_config(cfg: &RetrievalConfig) -> RetrievalConfig {
    cfg.clamped()
}

/// Overlays a proposal: each suggested value replaces its field, category
/// proposals overlay that category's override, and the result is clamped.
/// Values of the wrong type are skipped and reported.
pub fn apply_delta(
    cfg: &RetrievalConfig,
    delta: &DiagnosisProposal,
) -> (RetrievalConfig, Vec<FieldError>) {
    let (mut out, mut errors) = cfg.with_fields(
        delta
            .parameter_suggestions
            .iter()
            .map(|(k, v)| (k.as_str(), v)),
    );
    for (category, fields) in &delta.per_category_proposals {
        let (next, errs) = out.with_override_fields(category, fields);
        out = next;
        errors.extend(errs);
    }
    (out.clamped(), errors)
}

/// Outcome of one guarded update.
#[derive(Debug, Clone, PartialEq)]
pub struct Update {
    pub next: RetrievalConfig,
    pub branch: Branch,
    pub errors: Vec<FieldError>,
}

/// Chooses the next configuration after the latest recorded round, whose
/// config is `theta`:
///
/// 1. REVERT to the best-so-far config if the score fell by more than the
///    revert threshold since the previous round;
/// 2. otherwise EXPLORE with a seeded perturbation of `theta` once the score
///    has moved less than the explore threshold for `stagnation_window`
///    consecutive rounds;
/// 3. otherwise APPLY the clamped proposal.
///
/// The stagnation count resets after REVERT and EXPLORE. The branch is
/// stored on the latest history entry.
pub fn meta_update(
    state: &mut EvolutionState,
    theta: &RetrievalConfig,
    delta: &DiagnosisProposal,
    guards: &GuardConfig,
) -> Update {
    let (prev, cur) = state.last_two();
    let cur = cur.expect("meta_update needs a recorded round");
    let round = state.history.len() - 1;
    let update = match prev {
        Some(prev) if prev - cur > guards.revert_threshold + SCORE_TOLERANCE => {
            state.stagnation_count = 0;
            Update {
                next: state.best_config.clone(),
                branch: Branch::Revert,
                errors: Vec::new(),
            }
        }
        _ => {
            let stagnant =
                prev.is_some_and(|p| (cur - p).abs() < guards.explore_eps() - SCORE_TOLERANCE);
            state.stagnation_count = if stagnant {
                state.stagnation_count + 1
            } else {
                0
            };
            if state.stagnation_count >= guards.stagnation_window {
                state.stagnation_count = 0;
                let seed = guards.seed.wrapping_add(round as u64);
                Update {
                    next: perturb_config(theta, guards.perturb_scale, seed),
                    branch: Branch::Explore,
                    errors: Vec::new(),
                }
            } else {
                let (next, errors) = apply_delta(theta, delta);
                Update {
                    next,
                    branch: Branch::Apply,
                    errors,
                }
            }
        }
    };
    state.history[round].branch = Some(update.branch);
    update
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::FusionMode;
    use serde_json::json;

    fn proposal(pairs: &[(&str, serde_json::Value)]) -> DiagnosisProposal {
        DiagnosisProposal {
            parameter_suggestions: pairs
                .iter()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect(),
            ..Default::default()
        }
    }

    /// Runs the update rule over a score sequence, recording each round with
    /// the config the previous update produced.
    fn drive(scores: &[f64], guards: &GuardConfig) -> (EvolutionState, Vec<Branch>) {
        let mut state = EvolutionState::new(&RetrievalConfig::default());
        let mut theta = RetrievalConfig::default();
        let mut branches = Vec::new();
        for (i, s) in scores.iter().enumerate() {
            state.record(*s, &theta, false);
            let delta = proposal(&[("keyword_top_k", json!(5 + i))]);
            let u = meta_update(&mut state, &theta, &delta, guards);
            branches.push(u.branch);
            theta = u.next;
        }
        (state, branches)
    }

    #[test]
    fn apply_replaces_named_fields_only() {
        let base = RetrievalConfig::default();
        let d = proposal(&[("fusion_mode", json!("rrf")), ("semantic_top_k", json!(15))]);
        let (next, errs) = apply_delta(&base, &d);
        assert!(errs.is_empty());
        assert_eq!(next.fusion_mode, FusionMode::Rrf);
        assert_eq!(next.semantic_top_k, 15);
        let mut expect = base.clone();
        expect.fusion_mode = FusionMode::Rrf;
        expect.semantic_top_k = 15;
        assert_eq!(next, expect);
        assert_eq!(apply_delta(&base, &DiagnosisProposal::default()).0, base);
    }

    #[test]
    fn apply_rejects_bad_types_and_clamps() {
        let base = RetrievalConfig::default();
        let d = proposal(&[
            ("semantic_top_k", json!("high")),
            ("w_sem", json!(0.0)),
            ("keyword_top_k", json!(50)),
        ]);
        let (next, errs) = apply_delta(&base, &d);
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].field, "semantic_top_k");
        assert_eq!(next.w_sem, 0.1);
        assert_eq!(next.keyword_top_k, 30);
    }

    #[test]
    fn clamp_examples() {
        let c = RetrievalConfig {
            semantic_top_k: 50,
            w_sem: 0.0,
            ..RetrievalConfig::default()
        };
        let k = clamp_config(&c);
        assert_eq!((k.semantic_top_k, k.w_sem), (30, 0.1));
        assert_eq!(
            clamp_config(&RetrievalConfig::default()),
            RetrievalConfig::default()
        );
    }

    #[test]
    fn revert_restores_best() {
        let (state, branches) = drive(&[0.489, 0.543, 0.489], &GuardConfig::default());
        assert_eq!(branches, [Branch::Apply, Branch::Apply, Branch::Revert]);
        assert_eq!(state.best_round, Some(1));
        assert_eq!(state.best_config, state.history[1].config);
    }

    #[test]
    fn revert_threshold_is_strict() {
        let (_, b) = drive(&[0.50, 0.49], &GuardConfig::default());
        assert_eq!(b[1], Branch::Apply);
        let (_, b) = drive(&[0.50, 0.4899], &GuardConfig::default());
        assert_eq!(b[1], Branch::Revert);
    }

    #[test]
    fn explore_after_two_flat_rounds() {
        let (state, b) = drive(&[0.400, 0.401, 0.402], &GuardConfig::default());
        assert_eq!(b, [Branch::Apply, Branch::Apply, Branch::Explore]);
        assert_eq!(state.stagnation_count, 0);
    }

    #[test]
    fn revert_beats_explore_and_resets_stagnation() {
        let guards = GuardConfig {
            stagnation_window: 1,
            explore_eps: Some(0.5),
            ..GuardConfig::default()
        };
        let (state, b) = drive(&[0.5, 0.45], &guards);
        assert_eq!(b[1], Branch::Revert);
        assert_eq!(state.stagnation_count, 0);
    }

    #[test]
    fn growth_applies() {
        let (_, b) = drive(&[0.30, 0.36], &GuardConfig::default());
        assert_eq!(b, [Branch::Apply, Branch::Apply]);
    }

    #[test]
    fn termination_rules() {
        let guards = GuardConfig {
            max_rounds: 10,
            ..GuardConfig::default()
        };
        let mut state = EvolutionState::new(&RetrievalConfig::default());
        let theta = RetrievalConfig::default();
        let d = DiagnosisProposal::default();
        for s in [0.400, 0.401, 0.402] {
            state.record(s, &theta, false);
            assert_eq!(state.termination(&guards), None);
            meta_update(&mut state, &theta, &d, &guards);
        }
        state.record(0.403, &theta, false);
        assert_eq!(
            state.termination(&guards),
            Some(TerminationReason::Converged)
        );

        let one = GuardConfig {
            max_rounds: 1,
            ..GuardConfig::default()
        };
        let mut state = EvolutionState::new(&theta);
        state.record(0.1, &theta, false);
        assert_eq!(state.termination(&one), Some(TerminationReason::MaxRounds));
    }

    #[test]
    fn guard_validation() {
        assert!(GuardConfig::default().validate().is_ok());
        let bad = GuardConfig {
            revert_threshold: 0.0,
            ..GuardConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = GuardConfig {
            max_rounds: 0,
            ..GuardConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
