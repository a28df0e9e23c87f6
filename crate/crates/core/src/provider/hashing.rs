use super::{Embedder, ProviderError};

/// Local feature-hashing embedder: bag of lowercased word tokens and token
/// bigrams hashed into `dim` signed buckets, then L2-normalized.
///
/// Deterministic and dependency-free; useful when no embedding service is
/// configured. Semantic quality is far below a trained sentence encoder.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    fn bucket(&self, feature: &str) -> (usize, f64) {
        // FNV-1a, 64 bit
        let mut h: u64 = 0xcbf29ce484222325;
        for b in feature.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        ((h % self.dim as u64) as usize, sign)
    }
}

impl Embedder for HashingEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        if text.trim().is_empty() {
            return Err(ProviderError::EmptyInput);
        }
        let tokens: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect();
        let mut v = vec![0.0; self.dim];
        let mut add = |feature: &str| {
            let (i, s) = self.bucket(feature);
            v[i] += s;
        };
        if tokens.is_empty() {
            add(text);
        }
        for t in &tokens {
            add(t);
        }
        for pair in tokens.windows(2) {
            add(&format!("{} {}", pair[0], pair[1]));
        }
        if v.iter().all(|&x| x == 0.0) {
            // every feature cancelled out
            v[self.bucket(text).0] = 1.0;
        }
        super::normalize_embedding(v)
    }

    fn identity(&self) -> String {
        format!("hashing-embedder:{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_unit_norm() {
        let e = HashingEmbedder::new(64);
        let a = e.embed("Reorder the conditions to exploit short-circuit evaluation").unwrap();
        let b = e.embed("Reorder the conditions to exploit short-circuit evaluation").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert!(e.embed("  ").is_err());
        assert!(e.embed("!!!").is_ok());
    }
}
