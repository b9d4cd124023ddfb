//! Seeded random perturbation of a configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use crate::retrieval::RetrievalConfig;
use crate::retrieval::{FieldKind, FIELDS, TOP_K_RANGE};

/// Chance that any one numeric field, or the enum draw, is perturbed.
pub const PERTURB_PROBABILITY: f64 = 0.3;

fn width(kind: FieldKind) -> Option<f64> {
    match kind {
        FieldKind::TopK => Some((TOP_K_RANGE.1 - TOP_K_RANGE.0) as f64),
        FieldKind::Int { lo, hi } => Some((hi - lo) as f64),
        FieldKind::Float { lo, hi } | FieldKind::OptFloat { lo, hi } => Some(hi - lo),
        _ => None,
    }
}

/// Moves each numeric field, with probability 0.3, by a uniform offset in
/// `±scale × range width`, and with probability 0.3 re-samples one enum
/// field uniformly. Disabled views and unset optional fields stay as they
/// are. Overrides are untouched. The result is clamped and depends only on
/// `cfg`, `scale` and `seed`.
pub fn perturb_config(cfg: &RetrievalConfig, scale: f64, seed: u64) -> RetrievalConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut updates: Vec<(&str, Value)> = Vec::new();
    let mut enums: Vec<(&str, &[&str])> = Vec::new();
    for &(name, kind) in FIELDS {
        if let FieldKind::Enum(options) = kind {
            enums.push((name, options));
            continue;
        }
        let Some(w) = width(kind) else { continue };
        // Both draws happen for every numeric field so one field's state
        // never shifts the stream seen by the next.
        let hit = rng.gen::<f64>() < PERTURB_PROBABILITY;
        let u: f64 = rng.gen_range(-1.0..=1.0);
        let current = cfg.get_field(name).and_then(|v| v.as_f64());
        let Some(x) = current else { continue };
        if !hit || scale <= 0.0 || (kind == FieldKind::TopK && x == 0.0) {
            continue;
        }
        updates.push((name, Value::from(x + u * scale * w)));
    }
    let hit = rng.gen::<f64>() < PERTURB_PROBABILITY;
    let (name, options) = enums[rng.gen_range(0..enums.len())];
    let pick = options[rng.gen_range(0..options.len())];
    if hit && scale > 0.0 {
        updates.push((name, Value::from(pick)));
    }
    cfg.with_fields(updates.iter().map(|(n, v)| (*n, v))).0
}
