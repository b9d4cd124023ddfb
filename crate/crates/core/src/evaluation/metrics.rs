//! Answer scoring against a reference string.

use std::collections::HashMap;

use crate::answering::extract_choice;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("multiple-choice reference `{0}` is not one of A, B, C, D")]
pub struct InvalidChoice(pub String);

/// Lowercases, deletes punctuation and splits on whitespace. Articles are
/// kept, so "and", "a" and "the" all count as tokens.
pub fn normalize_answer(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

fn overlap(a: &[String], b: &[String]) -> usize {
    let cb = counts(b);
    counts(a)
        .into_iter()
        .map(|(t, n)| n.min(cb.get(t).copied().unwrap_or(0)))
        .sum()
}

/// Harmonic mean of multiset token precision and recall. Two empty
/// answers agree perfectly; one empty answer scores 0.
pub fn token_f1(prediction: &str, reference: &str) -> f64 {
    let p = normalize_answer(prediction);
    let r = normalize_answer(reference);
    if p.is_empty() && r.is_empty() {
        return 1.0;
    }
    if p.is_empty() || r.is_empty() {
        return 0.0;
    }
    let common = overlap(&p, &r);
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / r.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Clipped unigram precision times the brevity penalty
/// `exp(1 - |ref| / |pred|)` for predictions shorter than the reference.
/// No smoothing; an empty prediction scores 0.
pub fn bleu1(prediction: &str, reference: &str) -> f64 {
    let p = normalize_answer(prediction);
    let r = normalize_answer(reference);
    if p.is_empty() {
        return 0.0;
    }
    let precision = overlap(&p, &r) as f64 / p.len() as f64;
    let bp = if p.len() < r.len() {
        (1.0 - r.len() as f64 / p.len() as f64).exp()
    } else {
        1.0
    };
    precision * bp
}

/// Whether the normalized token sequences are identical.
pub fn exact_match(prediction: &str, reference: &str) -> f64 {
    if normalize_answer(prediction) == normalize_answer(reference) {
        1.0
    } else {
        0.0
    }
}

/// 1 iff the first standalone A to D letter of `prediction` equals the
/// reference letter, case-insensitively.
pub fn exact_match_mcq(prediction: &str, reference: &str) -> Result<f64, InvalidChoice> {
    let r = reference.trim().to_ascii_uppercase();
    if !matches!(r.as_str(), "A" | "B" | "C" | "D") {
        return Err(InvalidChoice(reference.to_string()));
    }
    let hit = extract_choice(prediction).map(String::from) == Some(r);
    Ok(if hit { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization() {
        assert_eq!(normalize_answer("The Cat!"), vec!["the", "cat"]);
        assert!(normalize_answer("").is_empty());
        assert_eq!(
            normalize_answer("cats and dogs"),
            vec!["cats", "and", "dogs"]
        );
    }

    #[test]
    fn f1_values() {
        let f = token_f1(
            "explored nature, roasted marshmallows, went on a hike",
            "explored nature, roasted marshmallows, and went on a hike",
        );
        assert!((f - 16.0 / 17.0).abs() < 1e-12);
        assert_eq!(token_f1("went camping", "went camping"), 1.0);
        assert_eq!(token_f1("red", "blue"), 0.0);
        assert_eq!(token_f1("", ""), 1.0);
        assert_eq!(token_f1("", "x"), 0.0);
        // repeated tokens are matched at most as often as the reference has them
        assert!((token_f1("a a a", "a b") - 0.4).abs() < 1e-12);
    }

    #[test]
    fn bleu_values() {
        assert_eq!(bleu1("the red car", "the red car"), 1.0);
        assert!((bleu1("red car", "red car goes fast") - (-1f64).exp()).abs() < 1e-12);
        assert_eq!(bleu1("", "anything"), 0.0);
        assert!((bleu1("a a", "a b") - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mcq_letters() {
        assert_eq!(exact_match_mcq("B", "B"), Ok(1.0));
        assert_eq!(exact_match_mcq("Answer: b)", "B"), Ok(1.0));
        assert_eq!(exact_match_mcq("B", "C"), Ok(0.0));
        assert_eq!(exact_match_mcq("no letter", "c"), Ok(0.0));
        assert!(exact_match_mcq("A", "E").is_err());
    }
}
