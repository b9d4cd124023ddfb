//! Tokenization shared by the lexical index, the hashing embedder, the
//! consolidation passes and the coverage verifier.

use std::collections::BTreeSet;

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

pub fn token_set(text: &str) -> BTreeSet<String> {
    tokenize(text).into_iter().collect()
}

/// Normalized form of a metadata value (entity, person, location...):
/// its tokens joined by single spaces.
pub fn normalize_term(term: &str) -> String {
    tokenize(term).join(" ")
}

/// Key for exact-duplicate detection: lowercase, whitespace collapsed,
/// trailing punctuation removed.
pub fn normalize_content(text: &str) -> String {
    let collapsed = text
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    collapsed
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}

pub(crate) const STOP_WORDS: &[&str] = &[
    "a", "about", "after", "again", "all", "also", "am", "an", "and", "any", "are", "as", "at",
    "be", "because", "been", "before", "being", "but", "by", "can", "could", "did", "do", "does",
    "for", "from", "had", "has", "have", "he", "her", "here", "hers", "him", "his", "how", "i",
    "if", "in", "into", "is", "it", "its", "just", "me", "my", "no", "not", "now", "of", "oh",
    "ok", "okay", "on", "or", "our", "she", "so", "that", "the", "their", "them", "then", "there",
    "these", "they", "this", "those", "to", "too", "us", "very", "was", "we", "well", "were",
    "what", "when", "where", "which", "who", "why", "will", "with", "would", "yeah", "yes", "you",
    "your",
];

pub(crate) fn is_stop_word(token: &str) -> bool {
    STOP_WORDS.binary_search(&token).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_and_lowercases() {
        assert_eq!(tokenize("Hello, World! x2"), vec!["hello", "world", "x2"]);
        assert!(tokenize("  ...  ").is_empty());
    }

    #[test]
    fn content_normalization() {
        assert_eq!(
            normalize_content("  Caroline  went\tto Paris!! "),
            "caroline went to paris"
        );
        assert_eq!(normalize_content("a.b."), "a.b");
        assert_eq!(normalize_content("..."), "");
    }

    #[test]
    fn stop_words_are_sorted_for_binary_search() {
        let mut sorted = STOP_WORDS.to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, STOP_WORDS);
        assert!(is_stop_word("the"));
        assert!(!is_stop_word("marshmallows"));
    }
}
