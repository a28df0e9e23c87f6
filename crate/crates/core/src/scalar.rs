//! Numeric abstractions shared by the similarity, clustering and
//! performance arithmetic.
//!
//! [`Scalar`] is anything that forms an ordered field with signed values
//! (`f32`, `f64`, `Ratio<i64>`, `BigRational`). [`Real`] adds the
//! floating-point operations needed for norms and cosine similarity.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, Num, Signed};

/// An ordered field element. Exact rationals satisfy this as well as floats.
pub trait Scalar: Clone + PartialOrd + Num + Signed + FromPrimitive + Debug + Send + Sync {
    /// `num / den` built from integers, so thresholds like 5% are exact for
    /// rational scalars and correctly rounded for floats.
    fn from_ratio(num: i64, den: i64) -> Self {
        let n = Self::from_i64(num).expect("integer fits scalar");
        let d = Self::from_i64(den).expect("integer fits scalar");
        n / d
    }
}

impl<T> Scalar for T where T: Clone + PartialOrd + Num + Signed + FromPrimitive + Debug + Send + Sync {}

/// Floating-point scalar used for embeddings.
pub trait Real: Scalar + Float + Sum + Copy {}

impl<T> Real for T where T: Scalar + Float + Sum + Copy {}

pub(crate) fn l2_norm<T: Real>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Scales `v` to unit length. Returns `false` (leaving `v` untouched) for the
/// zero vector or non-finite input.
pub fn normalize_in_place<T: Real>(v: &mut [T]) -> bool {
    let norm = l2_norm(v);
    if !norm.is_finite() || norm == T::zero() {
        return false;
    }
    for x in v.iter_mut() {
        *x = *x / norm;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Rational64;

    #[test]
    fn from_ratio_is_exact_for_rationals() {
        assert_eq!(Rational64::from_ratio(5, 100), Rational64::new(1, 20));
        assert_eq!(f64::from_ratio(5, 100), 0.05);
        assert_eq!(f32::from_ratio(-2, 100), -0.02f32);
    }

    #[test]
    fn normalize_rejects_zero() {
        let mut z = [0.0f64; 3];
        assert!(!normalize_in_place(&mut z));
        let mut v = [3.0f32, 4.0];
        assert!(normalize_in_place(&mut v));
        assert!((v[0] - 0.6).abs() < 1e-6 && (v[1] - 0.8).abs() < 1e-6);
    }
}
