use thiserror::Error;

use crate::scalar::{l2_norm, Real};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimilarityError {
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("cosine similarity undefined for a zero vector")]
    ZeroVector,
}

/// `dot(a, b) / (|a| |b|)`, clamped into `[-1, 1]`.
pub fn cosine_similarity<T: Real>(a: &[T], b: &[T]) -> Result<T, SimilarityError> {
    if a.len() != b.len() {
        return Err(SimilarityError::Dimension(a.len(), b.len()));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == T::zero() || nb == T::zero() {
        return Err(SimilarityError::ZeroVector);
    }
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let one = T::one();
    Ok((dot / (na * nb)).max(-one).min(one))
}

/// Symmetric pairwise cosine similarity matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix<T> {
    n: usize,
    values: Vec<T>,
}

impl<T: Real> SimilarityMatrix<T> {
    pub fn from_vectors<V: AsRef<[T]>>(vectors: &[V]) -> Result<Self, SimilarityError> {
        let n = vectors.len();
        let mut values = vec![T::one(); n * n];
        for i in 0..n {
            let vi = vectors[i].as_ref();
            if l2_norm(vi) == T::zero() {
                return Err(SimilarityError::ZeroVector);
            }
            for j in (i + 1)..n {
                let s = cosine_similarity(vi, vectors[j].as_ref())?;
                values[i * n + j] = s;
                values[j * n + i] = s;
            }
        }
        Ok(Self { n, values })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.n + j]
    }

    /// Mean similarity of row `i` to every other row; zero when `n == 1`.
    pub fn mean_to_others(&self, i: usize) -> T {
        if self.n < 2 {
            return T::zero();
        }
        let sum: T = (0..self.n).filter(|&j| j != i).map(|j| self.get(i, j)).sum();
        sum / T::from_usize(self.n - 1).expect("count fits scalar")
    }

    /// Index of the row with the highest mean similarity to the others.
    /// Ties go to the lowest index.
    pub fn most_central(&self) -> Option<usize> {
        let mut best: Option<(usize, T)> = None;
        for i in 0..self.n {
            let m = self.mean_to_others(i);
            if best.map_or(true, |(_, b)| m > b) {
                best = Some((i, m));
            }
        }
        best.map(|(i, _)| i)
    }
}
