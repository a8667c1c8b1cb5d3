//! Feature vectors and cosine geometry.

use crate::error::{Error, Result};

/// A finite real embedding vector: the single currency for image features,
/// prompt features, and the anchor.
///
/// Invariants: `dim >= 1` and every entry is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Vec<f64>,
}

impl FeatureVector {
    /// Builds a vector, rejecting empty or non-finite input.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Invalid("feature vector must have dim >= 1".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "feature vector entries".into(),
            });
        }
        Ok(Self { values })
    }

    /// Internal constructor for values already known to be finite.
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        debug_assert!(!values.is_empty());
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self { values }
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        check_dims(self, other)?;
        Ok(dot_slices(&self.values, &other.values))
    }
}

pub(crate) fn check_dims(u: &FeatureVector, v: &FeatureVector) -> Result<()> {
    if u.dim() != v.dim() {
        return Err(Error::DimMismatch {
            expected: u.dim(),
            actual: v.dim(),
        });
    }
    Ok(())
}

pub(crate) fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm_slice(a: &[f64]) -> f64 {
    dot_slices(a, a).sqrt()
}

/// Cosine similarity clamped to [-1, 1].
///
/// The clamp guards downstream score and hinge computations against
/// floating-point drift; zero-norm inputs are rejected rather than mapped to
/// a conventional value because a zero embedding always indicates an
/// upstream bug.
pub fn cosine_similarity(u: &FeatureVector, v: &FeatureVector) -> Result<f64> {
    check_dims(u, v)?;
    let nu = u.norm();
    let nv = v.norm();
    if nu == 0.0 {
        return Err(Error::ZeroNorm {
            op: "cosine_similarity",
        });
    }
    if nv == 0.0 {
        return Err(Error::ZeroNorm {
            op: "cosine_similarity",
        });
    }
    Ok((u.dot(v)? / (nu * nv)).clamp(-1.0, 1.0))
}

/// Cosine distance `1 - cosine_similarity`, in [0, 2].
pub fn cosine_distance(u: &FeatureVector, v: &FeatureVector) -> Result<f64> {
    Ok(1.0 - cosine_similarity(u, v)?)
}

/// Returns `v / ||v||`; errors on zero-norm input.
pub fn l2_normalize(v: &FeatureVector) -> Result<FeatureVector> {
    let n = v.norm();
    if n == 0.0 {
        return Err(Error::ZeroNorm { op: "l2_normalize" });
    }
    Ok(FeatureVector::from_raw(
        v.values().iter().map(|x| x / n).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(values: &[f64]) -> FeatureVector {
        FeatureVector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(FeatureVector::new(vec![]).is_err());
        assert!(FeatureVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(FeatureVector::new(vec![f64::INFINITY]).is_err());
        assert!(FeatureVector::zeros(0).is_err());
        assert_eq!(FeatureVector::zeros(3).unwrap().values(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn cosine_similarity_axis_cases() {
        let e1 = fv(&[1.0, 0.0]);
        let e2 = fv(&[0.0, 1.0]);
        assert_eq!(cosine_similarity(&e1, &e1).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&e1, &e2).unwrap(), 0.0);
        let diag = l2_normalize(&fv(&[1.0, 1.0])).unwrap();
        let got = cosine_similarity(&e1, &diag).unwrap();
        assert!((got - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn cosine_similarity_rejects_zero_norm() {
        let z = fv(&[0.0, 0.0]);
        let e1 = fv(&[1.0, 0.0]);
        assert!(matches!(
            cosine_similarity(&z, &e1),
            Err(Error::ZeroNorm { .. })
        ));
        assert!(matches!(
            cosine_similarity(&e1, &z),
            Err(Error::ZeroNorm { .. })
        ));
    }

    #[test]
    fn cosine_distance_examples() {
        let u = fv(&[0.3, 0.4]);
        assert_eq!(cosine_distance(&u, &u).unwrap(), 0.0);
        let e1 = fv(&[1.0, 0.0]);
        let neg = fv(&[-1.0, 0.0]);
        assert_eq!(cosine_distance(&e1, &neg).unwrap(), 2.0);
        let diag = l2_normalize(&fv(&[1.0, 1.0])).unwrap();
        let got = cosine_distance(&e1, &diag).unwrap();
        assert!((got - (1.0 - std::f64::consts::FRAC_1_SQRT_2)).abs() < 1e-15);
    }

    #[test]
    fn cosine_distance_symmetry_and_range() {
        let mut rng = crate::numeric::RngState::from_seed(11);
        for _ in 0..200 {
            let u = crate::numeric::sample_gaussian(&mut rng, 5, 1.0).unwrap();
            let v = crate::numeric::sample_gaussian(&mut rng, 5, 1.0).unwrap();
            let duv = cosine_distance(&u, &v).unwrap();
            let dvu = cosine_distance(&v, &u).unwrap();
            assert_eq!(duv, dvu);
            assert!((0.0..=2.0).contains(&duv));
        }
    }

    #[test]
    fn cosine_distance_scale_invariance() {
        // Powers of two scale exactly in IEEE-754, so equality is bitwise.
        let mut rng = crate::numeric::RngState::from_seed(12);
        for &s in &[0.5, 2.0, 4.0, 1024.0] {
            let u = crate::numeric::sample_gaussian(&mut rng, 6, 1.0).unwrap();
            let su = FeatureVector::new(u.values().iter().map(|x| x * s).collect()).unwrap();
            assert_eq!(cosine_distance(&u, &su).unwrap(), 0.0);
        }
    }

    #[test]
    fn l2_normalize_examples() {
        let got = l2_normalize(&fv(&[3.0, 4.0])).unwrap();
        assert_eq!(got.values(), &[0.6, 0.8]);
        let got = l2_normalize(&fv(&[0.0, 0.0, 5.0])).unwrap();
        assert_eq!(got.values(), &[0.0, 0.0, 1.0]);
        assert!(matches!(
            l2_normalize(&fv(&[0.0, 0.0])),
            Err(Error::ZeroNorm { .. })
        ));
    }

    #[test]
    fn l2_normalize_is_idempotent_within_eps() {
        let unit = l2_normalize(&fv(&[1.0, 2.0, -3.0, 0.5])).unwrap();
        assert!((unit.norm() - 1.0).abs() < 1e-12);
        let again = l2_normalize(&unit).unwrap();
        for (a, b) in again.values().iter().zip(unit.values()) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
