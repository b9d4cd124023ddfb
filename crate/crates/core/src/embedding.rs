//! Text embeddings: a deterministic SHA-256 feature-hashing embedder and the
//! [`Embedder`] contract that external dense models plug into.

use sha2::{Digest, Sha256};

use crate::text::tokenize;

pub const HASH_DIM: usize = 64;
pub const BATCH_SIZE: usize = 32;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EmbedError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("embedding backend failed on batch {batch} after {retries} retries: {message}")]
    Backend {
        batch: usize,
        retries: u32,
        message: String,
    },
}

/// A text embedding backend.
pub trait Embedder: Send + Sync {
    fn name(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, String>;
}

/// Feature-hashing embedder.
///
/// Each token's SHA-256 digest picks a dimension (first four bytes,
/// big-endian, modulo `dim`) and a sign (`+1` when byte 4 is even). The
/// accumulated vector is L2-normalized; no tokens gives the zero vector.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder { dim: HASH_DIM }
    }
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashEmbedder { dim }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        hash_embed_dim(text, self.dim)
    }
}

impl Embedder for HashEmbedder {
    fn name(&self) -> String {
        format!("sha256-hash-{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, String> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

pub fn hash_embed(text: &str) -> Vec<f64> {
    hash_embed_dim(text, HASH_DIM)
}

pub fn hash_embed_dim(text: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for token in tokenize(text) {
        let digest = Sha256::digest(token.as_bytes());
        let index = u32::from_be_bytes([digest[0], digest[1], digest[2], digest[3]]) as usize % dim;
        let sign = if digest[4] % 2 == 0 { 1.0 } else { -1.0 };
        v[index] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

/// Cosine similarity; 0 when either side is all-zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, EmbedError> {
    if a.len() != b.len() {
        return Err(EmbedError::DimensionMismatch(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Embeds `texts` in batches of [`BATCH_SIZE`], retrying a failed batch up
/// to `max_retries` times before giving up.
pub fn embed_batch(
    texts: &[String],
    backend: &dyn Embedder,
    max_retries: u32,
) -> Result<Vec<Vec<f64>>, EmbedError> {
    let mut out = Vec::with_capacity(texts.len());
    for (batch, chunk) in texts.chunks(BATCH_SIZE).enumerate() {
        let mut retries = 0;
        loop {
            match backend.embed(chunk) {
                Ok(vectors) if vectors.len() == chunk.len() => {
                    out.extend(vectors);
                    break;
                }
                Ok(vectors) => {
                    return Err(EmbedError::Backend {
                        batch,
                        retries,
                        message: format!("expected {} vectors, got {}", chunk.len(), vectors.len()),
                    })
                }
                Err(message) if retries >= max_retries => {
                    return Err(EmbedError::Backend {
                        batch,
                        retries,
                        message,
                    })
                }
                Err(_) => retries += 1,
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn deterministic_and_order_independent() {
        assert_eq!(hash_embed("apple"), hash_embed("apple"));
        let c = cosine(&hash_embed("apple banana"), &hash_embed("banana apple")).unwrap();
        assert!((c - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_text_is_zero_vector() {
        let v = hash_embed("   ");
        assert_eq!(v.len(), 64);
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((cosine(&[s, s], &[1.0, 0.0]).unwrap() - s).abs() < 1e-12);
        assert!((cosine(&[3.0, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(
            cosine(&[1.0], &[1.0, 0.0]),
            Err(EmbedError::DimensionMismatch(1, 2))
        ));
    }

    struct Counting {
        calls: AtomicUsize,
        fail_first: usize,
    }

    impl Embedder for Counting {
        fn name(&self) -> String {
            "counting".into()
        }
        fn dim(&self) -> usize {
            HASH_DIM
        }
        fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, String> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                return Err("boom".into());
            }
            HashEmbedder::default().embed(texts)
        }
    }

    #[test]
    fn batches_of_32() {
        let backend = Counting {
            calls: AtomicUsize::new(0),
            fail_first: 0,
        };
        let texts: Vec<String> = (0..33).map(|i| format!("text number {i}")).collect();
        let out = embed_batch(&texts, &backend, 0).unwrap();
        assert_eq!(backend.calls.load(Ordering::SeqCst), 2);
        for (t, v) in texts.iter().zip(&out) {
            assert_eq!(&hash_embed(t), v);
        }
        assert!(embed_batch(&[], &backend, 0).unwrap().is_empty());
    }

    #[test]
    fn batch_failure_reports_retries() {
        let backend = Counting {
            calls: AtomicUsize::new(0),
            fail_first: 10,
        };
        let texts = vec!["a b c".to_string()];
        let err = embed_batch(&texts, &backend, 2).unwrap_err();
        assert_eq!(
            err,
            EmbedError::Backend {
                batch: 0,
                retries: 2,
                message: "boom".into()
            }
        );
    }
}
