//! Dense linear-algebra helpers shared by the decomposition routines.

use faer::{Mat, MatRef};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Thin SVD factors with singular values sorted nonincreasing.
#[derive(Debug, Clone)]
pub(crate) struct ThinSvd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
}

/// Economy SVD `a = u * diag(s) * v^T`.
///
/// Tall inputs are reduced by a Householder QR first, so the iterative part
/// only ever runs on a `min(n, m)`-sized square factor.
pub(crate) fn thin_svd(a: &DMatrix<f64>) -> Result<ThinSvd> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix passed to SVD"));
    }
    let (n, m) = a.shape();
    if n == 0 || m == 0 {
        return Err(Error::InvalidInput("SVD of an empty matrix".into()));
    }
    if n > 2 * m {
        let qr = a.clone().qr();
        let inner = svd_of(&qr.r())?;
        Ok(ThinSvd {
            u: qr.q() * inner.u,
            ..inner
        })
    } else {
        svd_of(a)
    }
}

fn svd_of(a: &DMatrix<f64>) -> Result<ThinSvd> {
    let svd = to_faer(a)
        .thin_svd()
        .map_err(|_| Error::NonFinite("SVD did not converge"))?;
    let s = svd.S().column_vector();
    Ok(ThinSvd {
        u: from_faer(svd.U()),
        s: DVector::from_fn(s.nrows(), |i, _| s[i]),
        v: from_faer(svd.V()),
    })
}

fn to_faer<T: Copy + faer::traits::ComplexField>(a: &DMatrix<T>) -> Mat<T> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

fn from_faer<T: Copy + nalgebra::Scalar>(a: MatRef<'_, T>) -> DMatrix<T> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

/// Numerical rank: count of singular values above `rel_tol * s[0]`.
pub(crate) fn numerical_rank(s: &DVector<f64>, rel_tol: f64) -> usize {
    let Some(&top) = s.iter().next() else {
        return 0;
    };
    if top <= 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > rel_tol * top).count()
}

pub(crate) fn to_complex(a: &DMatrix<f64>) -> DMatrix<Complex64> {
    a.map(|v| Complex64::new(v, 0.0))
}

/// Eigenpairs of a small real square matrix.
///
/// Eigenvalues come from the real Schur form; each eigenvector is the right
/// singular vector of `a - lambda I` for its smallest singular value, polished
/// by a few steps of inverse iteration. The partner of a complex-conjugate
/// pair reuses the conjugated vector so real data yields conjugate-closed
/// modes exactly.
pub(crate) fn real_eigen(a: &DMatrix<f64>) -> (DVector<Complex64>, DMatrix<Complex64>) {
    let n = a.nrows();
    let values = DVector::from_vec(
        to_faer(a)
            .eigenvalues()
            .unwrap_or_else(|_| vec![Complex64::new(f64::NAN, 0.0); n]),
    );
    let ac = to_complex(a);
    let mut vectors = DMatrix::<Complex64>::zeros(n, n);
    let scale = a.norm().max(f64::MIN_POSITIVE);
    let mut done = vec![false; n];

    for i in 0..n {
        if done[i] {
            continue;
        }
        let lambda = values[i];
        let w = null_vector(&ac, lambda, scale);
        vectors.set_column(i, &w);
        done[i] = true;
        if lambda.im.abs() > 1e-14 * scale {
            let target = lambda.conj();
            let partner = (0..n)
                .filter(|&j| !done[j])
                .min_by(|&j, &k| {
                    (values[j] - target)
                        .norm()
                        .total_cmp(&(values[k] - target).norm())
                });
            if let Some(j) = partner {
                if (values[j] - target).norm() <= 1e-8 * scale {
                    vectors.set_column(j, &w.map(|c| c.conj()));
                    done[j] = true;
                }
            }
        }
    }
    (values, vectors)
}

fn null_vector(a: &DMatrix<Complex64>, lambda: Complex64, scale: f64) -> DVector<Complex64> {
    let n = a.nrows();
    let shifted = a - DMatrix::<Complex64>::identity(n, n) * lambda;
    let mut w = match to_faer(&shifted).svd() {
        Ok(svd) => {
            let v = svd.V();
            DVector::from_fn(n, |i, _| v[(i, n - 1)])
        }
        Err(_) => DVector::from_element(n, Complex64::new(1.0, 0.0)),
    };

    // Inverse iteration against a slightly perturbed shift.
    let eps = Complex64::new(1e-10 * scale, 0.0);
    let perturbed = &shifted - DMatrix::<Complex64>::identity(n, n) * eps;
    if let Some(lu) = Some(perturbed.lu()).filter(|lu| lu.is_invertible()) {
        for _ in 0..2 {
            if let Some(next) = lu.solve(&w) {
                let norm = next.norm();
                if norm.is_finite() && norm > 0.0 {
                    w = next / Complex64::new(norm, 0.0);
                }
            }
        }
    }
    normalize_phase(w)
}

/// Unit norm with the largest-magnitude entry made real and positive.
fn normalize_phase(mut w: DVector<Complex64>) -> DVector<Complex64> {
    let norm = w.norm();
    if norm > 0.0 {
        w /= Complex64::new(norm, 0.0);
    }
    if let Some(pivot) = w.iter().copied().max_by(|a, b| a.norm().total_cmp(&b.norm())) {
        if pivot.norm() > 0.0 {
            let phase = pivot.conj() / pivot.norm();
            w *= phase;
        }
    }
    w
}

/// Least-squares solution `x = a^+ b` through the SVD of `a`, treating
/// singular values below `rel_tol * s_max` as zero.
pub(crate) fn complex_pinv_solve(
    a: &DMatrix<Complex64>,
    b: &DVector<Complex64>,
    rel_tol: f64,
) -> DVector<Complex64> {
    let Ok(svd) = to_faer(a).thin_svd() else {
        return DVector::from_element(a.ncols(), Complex64::new(f64::NAN, 0.0));
    };
    let u = from_faer(svd.U());
    let v = from_faer(svd.V());
    let sv = svd.S().column_vector();
    let s: Vec<f64> = (0..sv.nrows()).map(|k| sv[k].re).collect();
    let top = s.iter().cloned().fold(0.0_f64, f64::max);
    let utb = u.adjoint() * b;
    let mut scaled = DVector::<Complex64>::zeros(s.len());
    for k in 0..s.len() {
        if s[k] > rel_tol * top && s[k] > 0.0 {
            scaled[k] = utb[k] / s[k];
        }
    }
    v * scaled
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn rotation_matrix_eigenpairs() {
        let th: f64 = 0.3;
        let a = dmatrix![th.cos(), -th.sin(); th.sin(), th.cos()];
        let (vals, vecs) = real_eigen(&a);
        let ac = to_complex(&a);
        for i in 0..2 {
            assert!((vals[i].norm() - 1.0).abs() < 1e-14);
            assert!((vals[i].im.abs() - th.sin()).abs() < 1e-14);
            let r = &ac * vecs.column(i) - vecs.column(i) * vals[i];
            assert!(r.norm() < 1e-12, "residual {}", r.norm());
        }
        assert!((vals[0] - vals[1].conj()).norm() < 1e-14);
    }

    #[test]
    fn mixed_spectrum_residuals() {
        let a = dmatrix![0.9, 0.2, 0.0; -0.3, 0.8, 0.1; 0.05, 0.0, 0.5];
        let (vals, vecs) = real_eigen(&a);
        let ac = to_complex(&a);
        for i in 0..3 {
            let r = &ac * vecs.column(i) - vecs.column(i) * vals[i];
            assert!(r.norm() < 1e-10, "residual {}", r.norm());
            assert!((vecs.column(i).norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn thin_svd_of_tall_matrix_is_orthonormal() {
        let a = DMatrix::from_fn(50, 4, |i, j| ((i * 3 + j * 7) % 11) as f64 - 5.0 + (i as f64).sin());
        let f = thin_svd(&a).unwrap();
        let utu = f.u.transpose() * &f.u;
        assert!((utu - DMatrix::identity(4, 4)).amax() < 1e-12);
        let rec = &f.u * DMatrix::from_diagonal(&f.s) * f.v.transpose();
        assert!((rec - &a).norm() / a.norm() < 1e-13);
        assert!(f.s.as_slice().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn pinv_solve_matches_exact_solution() {
        let a = to_complex(&dmatrix![1.0, 0.0; 0.0, 2.0; 0.0, 0.0]);
        let b = DVector::from_vec(vec![
            Complex64::new(3.0, 0.0),
            Complex64::new(4.0, 0.0),
            Complex64::new(0.0, 0.0),
        ]);
        let x = complex_pinv_solve(&a, &b, 1e-12);
        assert!((x[0] - Complex64::new(3.0, 0.0)).norm() < 1e-14);
        assert!((x[1] - Complex64::new(2.0, 0.0)).norm() < 1e-14);
    }
}
