//! Gram-matrix accumulation and spectral diversity.
//!
//! `Σ̂ = Σ_t x_{A_t,t} ⊗ x_{A_t,t}` summarizes how diverse the principal's
//! data is. Its smallest eigenvalue `λ_min(Σ̂)` is the quantity that gates
//! incentive compatibility; `λ'(Σ̂) = λ_min(Σ̂ ⊙ I)` is the smallest diagonal
//! entry and dominates `λ_min` whenever the latter is positive.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues in `[-EIG_TOL, 0)` are clamped to zero; anything lower is a
/// numerical error.
pub const EIG_TOL: f64 = 1e-9;

const EIG_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct GramAccumulator {
    matrix: DMatrix<f64>,
    count: usize,
}

/// Point-in-time spectral readout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralSnapshot {
    pub t: usize,
    pub lambda_min: f64,
    pub lambda_diag: f64,
}

impl GramAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            matrix: DMatrix::zeros(dim, dim),
            count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn absorb(&mut self, feature: &DVector<f64>) -> Result<()> {
        if feature.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: feature.len(),
            });
        }
        // Symmetric rank-1 update; filling both triangles from the same
        // product keeps the matrix exactly symmetric.
        let d = self.dim();
        for i in 0..d {
            for j in i..d {
                let v = feature[i] * feature[j];
                self.matrix[(i, j)] += v;
                if i != j {
                    self.matrix[(j, i)] += v;
                }
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn min_eigen(&self) -> Result<f64> {
        min_eigenvalue(&self.matrix)
    }

    /// `λ_min(Σ̂ ⊙ I)`, i.e. the smallest diagonal entry.
    pub fn diag_min(&self) -> f64 {
        if self.dim() == 0 {
            return 0.0;
        }
        self.matrix.diagonal().min()
    }

    pub fn snapshot(&self, t: usize) -> Result<SpectralSnapshot> {
        Ok(SpectralSnapshot {
            t,
            lambda_min: self.min_eigen()?,
            lambda_diag: self.diag_min(),
        })
    }
}

/// Smallest eigenvalue of a symmetric PSD matrix, clamped at zero.
pub fn min_eigenvalue(matrix: &DMatrix<f64>) -> Result<f64> {
    let d = matrix.nrows();
    if d == 0 {
        return Ok(0.0);
    }
    let fail = |detail: String| {
        let diag = matrix.diagonal();
        Error::Numerical {
            dim: d,
            frobenius: matrix.norm(),
            diag_min: diag.min(),
            diag_max: diag.max(),
            detail,
        }
    };
    let eig = matrix
        .clone()
        .try_symmetric_eigen(f64::EPSILON, EIG_MAX_ITER)
        .ok_or_else(|| fail(format!("no convergence in {EIG_MAX_ITER} iterations")))?;
    let lambda = eig.eigenvalues.min();
    if !lambda.is_finite() {
        return Err(fail("non-finite eigenvalue".into()));
    }
    if lambda < -EIG_TOL {
        return Err(fail(format!("eigenvalue {lambda:.3e} below -{EIG_TOL:e}")));
    }
    Ok(lambda.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, Streams};
    use rand::Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    #[test]
    fn absorb_examples() {
        let mut acc = GramAccumulator::new(2);
        for _ in 0..3 {
            acc.absorb(&v(&[1.0, 0.0])).unwrap();
        }
        for _ in 0..2 {
            acc.absorb(&v(&[0.0, 1.0])).unwrap();
        }
        assert_eq!(acc.matrix(), &DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 2.0]));
        assert_eq!(acc.count(), 5);
        assert_eq!(acc.min_eigen().unwrap(), 2.0);
        assert_eq!(acc.diag_min(), 2.0);

        let mut acc = GramAccumulator::new(2);
        acc.absorb(&v(&[1.0, 1.0])).unwrap();
        assert_eq!(acc.matrix(), &DMatrix::from_element(2, 2, 1.0));
        assert_eq!(acc.diag_min(), 1.0);
        assert!(acc.min_eigen().unwrap().abs() < 1e-12);

        let acc = GramAccumulator::new(3);
        assert_eq!(acc.count(), 0);
        assert_eq!(acc.matrix(), &DMatrix::zeros(3, 3));
        assert_eq!(acc.min_eigen().unwrap(), 0.0);
    }

    #[test]
    fn dimension_mismatch() {
        let mut acc = GramAccumulator::new(2);
        assert!(matches!(acc.absorb(&v(&[1.0])), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn two_by_two_eigenvalue() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        assert!((min_eigenvalue(&m).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn negative_definite_input_is_an_error() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(min_eigenvalue(&m), Err(Error::Numerical { .. })));
    }

    /// det(A - λI) for a 3×3 matrix.
    fn char_poly(a: &DMatrix<f64>, l: f64) -> f64 {
        let m = |i: usize, j: usize| a[(i, j)] - if i == j { l } else { 0.0 };
        m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1)) - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0))
            + m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0))
    }

    /// Smallest root of the characteristic polynomial: scan from below on a
    /// fine grid to bracket the first sign change, then bisect.
    fn smallest_root_by_bisection(a: &DMatrix<f64>) -> f64 {
        let bound = a.iter().map(|x| x.abs()).sum::<f64>() + 1.0;
        let steps = 200_000;
        let h = 2.0 * bound / steps as f64;
        let mut lo = -bound;
        let mut flo = char_poly(a, lo);
        for s in 1..=steps {
            let hi = -bound + s as f64 * h;
            let fhi = char_poly(a, hi);
            if fhi == 0.0 {
                return hi;
            }
            if flo.signum() != fhi.signum() {
                let (mut l, mut r) = (lo, hi);
                for _ in 0..200 {
                    let mid = 0.5 * (l + r);
                    if char_poly(a, mid).signum() == char_poly(a, l).signum() {
                        l = mid;
                    } else {
                        r = mid;
                    }
                }
                return 0.5 * (l + r);
            }
            lo = hi;
            flo = fhi;
        }
        panic!("no root bracketed");
    }

    #[test]
    fn min_eigen_matches_characteristic_polynomial_oracle() {
        let mut rng = Streams::new(2024, 0).rng(0, Purpose::Audit);
        for _ in 0..20 {
            let mut acc = GramAccumulator::new(3);
            for _ in 0..4 {
                let f: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                acc.absorb(&v(&f)).unwrap();
            }
            let oracle = smallest_root_by_bisection(acc.matrix());
            let got = acc.min_eigen().unwrap();
            assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
        }
    }

    #[test]
    fn repeated_unit_vector_has_zero_min_eigen() {
        for d in 2..6 {
            let mut acc = GramAccumulator::new(d);
            let mut e = DVector::zeros(d);
            e[0] = 1.0;
            for _ in 0..7 {
                acc.absorb(&e).unwrap();
            }
            assert_eq!(acc.min_eigen().unwrap(), 0.0);
        }
    }

    #[test]
    fn diag_dominates_on_random_histories() {
        let mut rng = Streams::new(99, 0).rng(0, Purpose::Audit);
        for _ in 0..500 {
            let d = rng.random_range(1..6);
            let n = rng.random_range(0..12);
            let mut acc = GramAccumulator::new(d);
            for _ in 0..n {
                let f: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
                acc.absorb(&v(&f)).unwrap();
            }
            let lm = acc.min_eigen().unwrap();
            if lm > 0.0 {
                assert!(acc.diag_min() >= lm);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn min_eigen_is_monotone_in_data(
            feats in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 3), 1..20),
            split in 0usize..20,
        ) {
            let split = split.min(feats.len());
            let mut acc = GramAccumulator::new(3);
            for f in &feats[..split] {
                acc.absorb(&v(f)).unwrap();
            }
            let before = acc.min_eigen().unwrap();
            for f in &feats[split..] {
                acc.absorb(&v(f)).unwrap();
            }
            let after = acc.min_eigen().unwrap();
            proptest::prop_assert!(after >= before - 1e-9 * (1.0 + before));
            proptest::prop_assert_eq!(acc.count(), feats.len());
        }
    }
}
