//! Deterministic dense-retrieval stand-in: character 3-gram feature hashing.
//!
//! The default backend hashes lowercased byte trigrams into a fixed-width
//! vector and L2-normalizes it. It is dependency-free and bit-reproducible,
//! which the fixture suite and the pruning/memory oracles rely on. Real
//! sentence encoders can be plugged in behind the same trait.

use serde::{Deserialize, Serialize};

use super::GatewayError;

/// Default embedding width.
pub const DEFAULT_EMBED_DIM: usize = 256;

/// A fixed-dimension, L2-normalized embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// Normalizes and wraps `values`. Zero vectors are rejected.
    pub fn new(mut values: Vec<f64>) -> Result<Self, GatewayError> {
        let norm = values.iter().map(|v| v.powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(GatewayError::EmptyEmbedInput);
        }
        for v in &mut values {
            *v /= norm;
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Cosine similarity; vectors are unit-norm so this is a dot product.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        debug_assert_eq!(self.values.len(), other.values.len());
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }
}

/// A deterministic text embedder (the DRM of the pipeline).
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError>;
}

/// Character 3-gram feature-hashing embedder.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_EMBED_DIM)
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        if text.trim().is_empty() {
            return Err(GatewayError::EmptyEmbedInput);
        }
        let lowered = text.to_lowercase();
        let bytes = lowered.as_bytes();
        let mut counts = vec![0f64; self.dim];
        if bytes.len() < 3 {
            counts[(fnv1a(bytes) % self.dim as u64) as usize] += 1.0;
        } else {
            for gram in bytes.windows(3) {
                counts[(fnv1a(gram) % self.dim as u64) as usize] += 1.0;
            }
        }
        EmbeddingVector::new(counts)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for b in bytes {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_is_deterministic() {
        let e = HashEmbedder::default();
        assert_eq!(e.embed("mascot team").unwrap(), e.embed("mascot team").unwrap());
    }

    #[test]
    fn self_cosine_is_one() {
        let e = HashEmbedder::default();
        let v = e.embed("mascot team championships").unwrap();
        assert!((v.cosine(&v) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_text_is_rejected() {
        let e = HashEmbedder::default();
        assert!(e.embed("").is_err());
        assert!(e.embed("   ").is_err());
    }

    #[test]
    fn related_text_scores_higher_than_unrelated() {
        let e = HashEmbedder::default();
        let probe = e.embed("mascot team championships").unwrap();
        let related = e.embed("mascot of the team").unwrap();
        let unrelated = e.embed("border country europe").unwrap();
        let close = probe.cosine(&related);
        let far = probe.cosine(&unrelated);
        assert!(close > far, "{close} vs {far}");
    }

    #[test]
    fn short_inputs_embed() {
        let e = HashEmbedder::default();
        assert_eq!(e.embed("ab").unwrap().dim(), DEFAULT_EMBED_DIM);
    }
}
