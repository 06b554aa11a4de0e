//! Small dense complex solves used by the background update and by WPE.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;

// Pivot ratio below which an unregularized system is treated as singular.
const SINGULAR_RCOND: f64 = 1e-13;

/// Row-normalized system `A^H D^-1 A + eps I` and right-hand side
/// `A^H D^-1 b`, with `D` the diagonal of squared row norms of `A`.
/// All-zero rows get unit weight.
pub fn regularized_system(a: &CMatrix, b: &CMatrix, epsilon: f64) -> Result<(CMatrix, CMatrix)> {
    let (an, bn) = normalize_rows(a, b)?;
    let d = a.nrows();
    let ah = an.adjoint();
    let mut sys = &ah * &an;
    for i in 0..d {
        sys[(i, i)] += Complex64::new(epsilon, 0.0);
    }
    Ok((sys, ah * bn))
}

fn normalize_rows(a: &CMatrix, b: &CMatrix) -> Result<(CMatrix, CMatrix)> {
    let d = a.nrows();
    if a.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "system matrix must be square, got {}x{}",
            d,
            a.ncols()
        )));
    }
    if b.nrows() != d {
        return Err(Error::DimensionMismatch(format!(
            "right-hand side has {} rows, expected {d}",
            b.nrows()
        )));
    }
    let mut an = a.clone();
    let mut bn = b.clone();
    for i in 0..d {
        let norm2: f64 = a.row(i).iter().map(|v| v.norm_sqr()).sum();
        let scale = if norm2 > 0.0 { norm2.sqrt().recip() } else { 1.0 };
        an.row_mut(i).scale_mut(scale);
        bn.row_mut(i).scale_mut(scale);
    }
    Ok((an, bn))
}

/// Solves `A x = b` through the row-normalized, diagonally loaded normal
/// equations `(A^H D^-1 A + eps I) x = A^H D^-1 b`.
///
/// After normalization the eigenvalues of `A^H D^-1 A` sum to `d`, so
/// `epsilon` acts as a relative shift. With `epsilon > 0` the system is
/// Hermitian positive definite and solved by Cholesky; with `epsilon == 0`
/// the equivalent square system `D^-1/2 A x = D^-1/2 b` is solved directly and
/// a singular `A` is an error.
pub fn regularized_solve(a: &CMatrix, b: &CMatrix, epsilon: f64) -> Result<CMatrix> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "epsilon must be finite and non-negative, got {epsilon}"
        )));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("linear system"));
    }
    if epsilon == 0.0 {
        let (an, bn) = normalize_rows(a, b)?;
        let lu = an.lu();
        let diag = lu.u().diagonal();
        let max = diag.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let min = diag.iter().map(|v| v.norm()).fold(f64::INFINITY, f64::min);
        if !(min > SINGULAR_RCOND * max) {
            return Err(Error::Singular(format!(
                "pivot ratio {:e} with epsilon = 0",
                min / max
            )));
        }
        return lu
            .solve(&bn)
            .ok_or_else(|| Error::Singular("LU solve failed".into()));
    }
    let (sys, rhs) = regularized_system(a, b, epsilon)?;
    let chol = sys
        .cholesky()
        .ok_or_else(|| Error::Singular("regularized system not positive definite".into()))?;
    Ok(chol.solve(&rhs))
}

/// `log |det A|` via LU; `None` when the determinant underflows `1e-300`.
pub fn log_abs_det(a: &CMatrix) -> Option<f64> {
    let lu = a.clone().lu();
    let mut acc = 0.0;
    for v in lu.u().diagonal().iter() {
        let n = v.norm();
        if n == 0.0 {
            return None;
        }
        acc += n.ln();
    }
    (acc > 1e-300f64.ln()).then_some(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{complex_normal, rng};

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn random(d: usize, r: usize, seed: u64) -> CMatrix {
        let mut g = rng(seed);
        CMatrix::from_fn(d, r, |_, _| complex_normal(&mut g))
    }

    #[test]
    fn identity_and_diagonal() {
        let b = random(3, 2, 1);
        let x = regularized_solve(&CMatrix::identity(3, 3), &b, 0.0).unwrap();
        assert!((x - &b).norm() < 1e-15);

        let a = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![c(2.0), c(4.0)]));
        let b = CMatrix::from_column_slice(2, 1, &[c(2.0), c(4.0)]);
        let x = regularized_solve(&a, &b, 0.0).unwrap();
        assert!((x[(0, 0)] - c(1.0)).norm() < 1e-15);
        assert!((x[(1, 0)] - c(1.0)).norm() < 1e-15);
    }

    #[test]
    fn singular_without_regularization_is_error() {
        let a = CMatrix::from_row_slice(2, 2, &[c(1.0), c(2.0), c(2.0), c(4.0)]);
        let b = random(2, 1, 3);
        assert!(matches!(
            regularized_solve(&a, &b, 0.0),
            Err(Error::Singular(_))
        ));
        let x = regularized_solve(&a, &b, 1e-3).unwrap();
        assert!(x.iter().all(|v| v.is_finite()));
        // A zero row takes unit weight instead of dividing by zero.
        let z = CMatrix::from_row_slice(2, 2, &[c(1.0), c(0.0), c(0.0), c(0.0)]);
        assert!(regularized_solve(&z, &b, 1e-3).is_ok());
    }

    #[test]
    fn normalized_trace_is_d_plus_eps_d() {
        let a = random(4, 4, 5);
        let b = random(4, 1, 6);
        let (sys, _) = regularized_system(&a, &b, 0.01).unwrap();
        let tr: Complex64 = sys.diagonal().iter().sum();
        assert!((tr.re - 4.04).abs() < 1e-12 && tr.im.abs() < 1e-12);
    }

    #[test]
    fn residual_grows_with_epsilon() {
        let a = random(4, 4, 7);
        let b = random(4, 1, 8);
        let mut last = 0.0;
        for eps in [0.0, 1e-4, 1e-3, 1e-2, 1e-1] {
            let x = regularized_solve(&a, &b, eps).unwrap();
            let r = (&a * x - &b).norm();
            assert!(r >= last - 1e-12, "eps={eps}: {r} < {last}");
            last = r;
        }
    }

    #[test]
    fn log_det_of_diagonal() {
        let a = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![c(2.0), c(-2.0)]));
        assert!((log_abs_det(&a).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(log_abs_det(&CMatrix::zeros(2, 2)).is_none());
    }
}
