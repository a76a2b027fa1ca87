use serde::{Deserialize, Serialize};

use super::Mat;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAX_SWEEPS: usize = 100;

/// Eigendecomposition `S = V · diag(values) · Vᵀ` of a symmetric matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymmetricEigen<T> {
    /// Eigenvalues, descending.
    pub values: Vec<T>,
    /// Orthonormal eigenvectors stored as columns, in the order of `values`.
    pub vectors: Mat<T>,
}

#[derive(Clone, Copy)]
pub(crate) enum Stop<T> {
    /// Stop once the off-diagonal Frobenius norm is at or below the threshold.
    OffNorm(T),
    /// Rotate every pair with `|a_pq| > ε·sqrt(|a_pp·a_qq|)` until none remain.
    /// Recovers small eigenvalues to high relative accuracy on graded matrices.
    Relative { fallback: T },
}

fn off_norm<T: Scalar>(a: &Mat<T>) -> T {
    let n = a.rows();
    let mut s = T::zero();
    for p in 0..n {
        for q in 0..n {
            if p != q {
                s = s + a[(p, q)] * a[(p, q)];
            }
        }
    }
    s.sqrt()
}

/// Cyclic Jacobi on a symmetric matrix, accumulating rotations into `v`.
/// Leaves the eigenvalues on the diagonal of `a`.
pub(crate) fn jacobi_in_place<T: Scalar>(a: &mut Mat<T>, v: &mut Mat<T>, stop: Stop<T>) -> Result<()> {
    let n = a.rows();
    let eps = T::epsilon();
    let half = T::lit(0.5);
    let big = T::lit(1e150).min(T::max_value().sqrt());
    for _ in 0..MAX_SWEEPS {
        if let Stop::OffNorm(threshold) = stop {
            if off_norm(a) <= threshold {
                return Ok(());
            }
        }
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let (app, aqq) = (a[(p, p)], a[(q, q)]);
                if let Stop::Relative { .. } = stop {
                    if apq.abs() <= eps * (app.abs() * aqq.abs()).sqrt() {
                        continue;
                    }
                }
                rotated = true;
                let theta = (aqq - app) / (apq + apq);
                let t = if theta.abs() > big {
                    half / theta
                } else {
                    theta.signum() / (theta.abs() + (T::one() + theta * theta).sqrt())
                };
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = T::zero();
                a[(q, p)] = T::zero();
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        if !rotated {
            return Ok(());
        }
    }
    let threshold = match stop {
        Stop::OffNorm(t) => t,
        Stop::Relative { fallback } => fallback,
    };
    if off_norm(a) <= threshold {
        Ok(())
    } else {
        Err(Error::NoConvergence {
            op: "jacobi eigensolver",
            iterations: MAX_SWEEPS,
        })
    }
}

/// Sorts eigenpairs by descending eigenvalue (stable).
pub(crate) fn sorted_eigen<T: Scalar>(diag: Vec<T>, vectors: &Mat<T>) -> SymmetricEigen<T> {
    let n = diag.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).unwrap_or(std::cmp::Ordering::Equal));
    let values = order.iter().map(|&i| diag[i]).collect();
    let vectors = Mat::from_fn(n, n, |r, c| vectors[(r, order[c])]);
    SymmetricEigen { values, vectors }
}

/// Eigendecomposition of a small dense symmetric matrix by cyclic Jacobi rotations.
///
/// Sweeps until the off-diagonal Frobenius norm drops to `1e-12·‖S‖_F`, at most
/// [`MAX_SWEEPS`] times. The input must be symmetric to `1e-9·‖S‖_∞`; it is
/// symmetrized before rotating.
pub fn symmetric_eig<T: Scalar>(s: &Mat<T>) -> Result<SymmetricEigen<T>> {
    if !s.is_square() {
        return Err(Error::domain(format!(
            "symmetric_eig needs a square matrix, got {}x{}",
            s.rows(),
            s.cols()
        )));
    }
    if !s.is_finite() {
        return Err(Error::NonFinite {
            context: "symmetric_eig input".into(),
        });
    }
    let st = s.transpose();
    let asym = s.sub(&st).inf_norm();
    if asym > T::tolerance(1e-9) * s.inf_norm() {
        return Err(Error::domain(format!(
            "symmetric_eig input is not symmetric (‖S − Sᵀ‖∞ = {asym})"
        )));
    }
    let n = s.rows();
    let mut a = s.add(&st).scale(T::lit(0.5));
    let mut v = Mat::identity(n);
    let scale = a.frobenius_norm();
    if scale > T::zero() {
        jacobi_in_place(&mut a, &mut v, Stop::OffNorm(T::tolerance(1e-12) * scale))?;
    }
    let diag = (0..n).map(|i| a[(i, i)]).collect();
    Ok(sorted_eigen(diag, &v))
}
