//! Small dense linear-algebra helpers on top of `nalgebra`.
//!
//! Everything here works on symmetric matrices: square roots and operator
//! norms go through a symmetric eigendecomposition with eigenvalues clamped
//! at zero, since the matrices involved are PSD up to rounding.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// `(M + M') / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Frobenius inner product `tr(M'N)`, as a sum of elementwise products.
pub fn frobenius_inner(m: &DMatrix<f64>, n: &DMatrix<f64>) -> f64 {
    assert_eq!(m.shape(), n.shape(), "frobenius_inner: shape mismatch");
    m.iter().zip(n.iter()).map(|(a, b)| a * b).sum()
}

/// Eigenvalues (unsorted) and eigenvectors of the symmetric part of `m`.
pub fn sym_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new(symmetrize(m))
}

fn rebuild(eig: &SymmetricEigen<f64, nalgebra::Dyn>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let q = &eig.eigenvectors;
    let d = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&l| f(l)));
    let scaled = q * DMatrix::from_diagonal(&d);
    symmetrize(&(scaled * q.transpose()))
}

/// Projects a symmetric matrix onto the PSD cone by clamping negative
/// eigenvalues to zero.
pub fn clamp_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 0 {
        return m.clone();
    }
    rebuild(&sym_eigen(m), |l| l.max(0.0))
}

/// Symmetric PSD square root `M^{1/2}`.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 0 {
        return m.clone();
    }
    rebuild(&sym_eigen(m), |l| l.max(0.0).sqrt())
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigen(m).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Largest eigenvalue of the symmetric part of `m`, clamped at zero. For a
/// PSD matrix this is the operator norm `|M|_2`.
pub fn psd_operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    sym_eigen(m).eigenvalues.iter().copied().fold(0.0, f64::max)
}

/// Ratio of largest to smallest absolute eigenvalue; infinite when singular.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = sym_eigen(m);
    let abs = eig.eigenvalues.iter().map(|l| l.abs());
    let (lo, hi) = abs.fold((f64::INFINITY, 0.0f64), |(lo, hi), a| (lo.min(a), hi.max(a)));
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Intrinsic dimension `tr(M) / |M|_2` of a PSD matrix; zero for `M = 0`.
pub fn intrinsic_dimension(m: &DMatrix<f64>) -> f64 {
    let norm = psd_operator_norm(m);
    if norm <= 0.0 {
        return 0.0;
    }
    m.trace() / norm
}

/// Quadratic form `v' M v`.
pub fn quad_form(m: &DMatrix<f64>, v: &[f64]) -> f64 {
    let p = v.len();
    let mut acc = 0.0;
    for j in 0..p {
        let mut row = 0.0;
        for k in 0..p {
            row += m[(j, k)] * v[k];
        }
        acc += v[j] * row;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sqrt_squares_back() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let r = sym_sqrt(&m);
        assert_relative_eq!(&r * &r, m, epsilon = 1e-12);
    }

    #[test]
    fn clamp_removes_negative_part() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-14]);
        let c = clamp_psd(&m);
        assert!(min_eigenvalue(&c) >= 0.0);
        assert_relative_eq!(c[(0, 0)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn intrinsic_dimension_cases() {
        assert_relative_eq!(intrinsic_dimension(&DMatrix::identity(4, 4)), 4.0, epsilon = 1e-12);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 0.0]));
        assert_relative_eq!(intrinsic_dimension(&d), 2.0, epsilon = 1e-12);
        let v = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        assert_relative_eq!(intrinsic_dimension(&(&v * v.transpose())), 1.0, epsilon = 1e-12);
        assert_eq!(intrinsic_dimension(&DMatrix::zeros(3, 3)), 0.0);
    }

    #[test]
    fn frobenius_matches_trace() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 5.0]);
        let b = DMatrix::from_row_slice(2, 2, &[0.5, -1.0, -1.0, 3.0]);
        assert_relative_eq!(frobenius_inner(&a, &b), (a.transpose() * &b).trace(), epsilon = 1e-14);
    }
}
