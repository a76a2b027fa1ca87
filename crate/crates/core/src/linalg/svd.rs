use serde::{Deserialize, Serialize};

use super::eig::{jacobi_in_place, sorted_eigen, Stop};
use super::{dot, norm, Mat};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Thin SVD `W = U · diag(sigma) · Vt` of a wide matrix (rows ≤ cols).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvdResult<T> {
    /// rows × rows, orthonormal columns.
    pub u: Mat<T>,
    /// Non-negative, descending.
    pub sigma: Vec<T>,
    /// rows × cols, orthonormal rows.
    pub vt: Mat<T>,
}

impl<T: Scalar> SvdResult<T> {
    pub fn reconstruct(&self) -> Mat<T> {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, &s) in self.sigma.iter().enumerate() {
                us[(i, j)] = us[(i, j)] * s;
            }
        }
        us.matmul(&self.vt)
    }
}

fn eig_vectors<T: Scalar>(s: Mat<T>) -> Result<Mat<T>> {
    let n = s.rows();
    let mut a = s;
    let mut v = Mat::identity(n);
    let scale = a.frobenius_norm();
    if scale > T::zero() {
        let fallback = T::tolerance(1e-12) * scale;
        jacobi_in_place(&mut a, &mut v, Stop::Relative { fallback })?;
    }
    let diag = (0..n).map(|i| a[(i, i)]).collect();
    Ok(sorted_eigen(diag, &v).vectors)
}

/// Thin SVD via the Jacobi eigendecomposition of `W·Wᵀ`.
///
/// A second Jacobi pass on `(UᵀW)(UᵀW)ᵀ` restores orthogonality of the right
/// singular vectors belonging to small singular values. Rows of `Vt` for zero
/// singular values are completed by Gram-Schmidt against the others.
pub fn svd_thin<T: Scalar>(w: &Mat<T>) -> Result<SvdResult<T>> {
    let (b, d) = w.shape();
    if b > d {
        return Err(Error::domain(format!(
            "svd_thin needs rows <= cols, got {b}x{d}"
        )));
    }
    if !w.is_finite() {
        return Err(Error::NonFinite {
            context: "svd_thin input".into(),
        });
    }

    let u0 = eig_vectors(w.gram_rows())?;
    let w1 = u0.transpose().matmul(w);
    let u1 = eig_vectors(w1.gram_rows())?;
    let u = u0.matmul(&u1);
    // rows of `proj` are σ_i · v_iᵀ
    let proj = u1.transpose().matmul(&w1);

    let raw_sigma: Vec<T> = (0..b).map(|i| norm(proj.row(i))).collect();
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&i, &j| {
        raw_sigma[j]
            .partial_cmp(&raw_sigma[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let u = Mat::from_fn(b, b, |r, c| u[(r, order[c])]);

    let sigma_max = raw_sigma[order[0]];
    let cutoff = T::epsilon() * T::lit(d as f64) * sigma_max;
    let mut sigma = Vec::with_capacity(b);
    let mut vt = Mat::zeros(b, d);
    let mut missing = Vec::new();
    for (row, &src) in order.iter().enumerate() {
        let s = raw_sigma[src];
        if s > cutoff && s > T::zero() {
            sigma.push(s);
            for (o, &x) in vt.row_mut(row).iter_mut().zip(proj.row(src)) {
                *o = x / s;
            }
        } else {
            sigma.push(T::zero());
            missing.push(row);
        }
    }
    complete_rows(&mut vt, &missing);
    Ok(SvdResult { u, sigma, vt })
}

/// Fills the listed rows with unit vectors orthogonal to every other row.
fn complete_rows<T: Scalar>(vt: &mut Mat<T>, missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let (b, d) = vt.shape();
    let mut filled: Vec<usize> = (0..b).filter(|r| !missing.contains(r)).collect();
    let mut candidate = 0;
    for &row in missing {
        loop {
            assert!(candidate < d, "ran out of basis vectors completing Vt");
            let mut w = vec![T::zero(); d];
            w[candidate] = T::one();
            candidate += 1;
            for _ in 0..2 {
                for &f in &filled {
                    let c = dot(&w, vt.row(f));
                    for (x, &y) in w.iter_mut().zip(vt.row(f)) {
                        *x = *x - c * y;
                    }
                }
            }
            let n = norm(&w);
            if n > T::lit(0.5) {
                for (o, x) in vt.row_mut(row).iter_mut().zip(w) {
                    *o = x / n;
                }
                filled.push(row);
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn orthonormality_error(m: &Mat<f64>) -> f64 {
        m.matmul(&m.transpose()).max_abs_diff(&Mat::identity(m.rows()))
    }

    #[test]
    fn diagonal_case() {
        let w: Mat<f64> = Mat::from_rows(&[[3.0, 0.0, 0.0], [0.0, 2.0, 0.0]]).unwrap();
        let svd = svd_thin(&w).unwrap();
        assert!((svd.sigma[0] - 3.0).abs() < 1e-14);
        assert!((svd.sigma[1] - 2.0).abs() < 1e-14);
        assert!(svd.reconstruct().max_abs_diff(&w) < 1e-14);
    }

    #[test]
    fn zero_matrix() {
        let w = Mat::<f64>::zeros(2, 4);
        let svd = svd_thin(&w).unwrap();
        assert_eq!(svd.sigma, vec![0.0, 0.0]);
        assert!(orthonormality_error(&svd.u.transpose()) < 1e-15);
        assert!(orthonormality_error(&svd.vt) < 1e-15);
    }

    #[test]
    fn random_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let w = Mat::from_fn(4, 8, |_, _| rng.random_range(-1.0..1.0));
            let svd = svd_thin(&w).unwrap();
            assert!(svd.reconstruct().sub(&w).frobenius_norm() <= 1e-8);
            assert!(orthonormality_error(&svd.vt) <= 1e-8);
            assert!(orthonormality_error(&svd.u.transpose()) <= 1e-8);
            assert!(svd.sigma.windows(2).all(|p| p[0] >= p[1]));
        }
    }

    #[test]
    fn rank_deficient_completes_vt() {
        // rank 1: every row a multiple of the same vector
        let base = [1.0, -2.0, 0.5, 3.0, 0.0];
        let w = Mat::from_fn(3, 5, |i, j| (i as f64 + 1.0) * base[j]);
        let svd = svd_thin(&w).unwrap();
        assert!(svd.sigma[0] > 0.0);
        assert_eq!(&svd.sigma[1..], &[0.0, 0.0]);
        assert!(orthonormality_error(&svd.vt) <= 1e-12);
        assert!(svd.reconstruct().sub(&w).frobenius_norm() <= 1e-12);
    }

    #[test]
    fn small_singular_values_keep_orthogonality() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut w = Mat::from_fn(5, 9, |_, _| rng.random_range(-1.0..1.0));
        for j in 0..9 {
            w[(4, j)] = w[(3, j)] + 1e-7 * w[(4, j)];
        }
        let svd = svd_thin(&w).unwrap();
        assert!(svd.sigma[4] > 0.0 && svd.sigma[4] < 1e-6);
        assert!(orthonormality_error(&svd.vt) <= 1e-10);
        assert!(svd.reconstruct().sub(&w).frobenius_norm() <= 1e-12);
    }

    #[test]
    fn rejects_tall_and_non_finite() {
        assert!(svd_thin(&Mat::<f64>::zeros(3, 2)).is_err());
        let mut w = Mat::<f64>::zeros(2, 3);
        w[(0, 0)] = f64::NAN;
        assert!(svd_thin(&w).is_err());
    }

    #[test]
    fn single_precision() {
        let w = Mat::from_rows(&[[3.0f32, 0.0, 1.0], [0.0, 2.0, 0.0]]).unwrap();
        let svd = svd_thin(&w).unwrap();
        assert!(svd.reconstruct().max_abs_diff(&w) < 1e-5);
    }
}
