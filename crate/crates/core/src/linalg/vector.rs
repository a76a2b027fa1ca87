use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Tolerance on ‖v‖₂ for vectors that are meant to be unit length.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Inner product with four interleaved partial sums (fixed order, so results are reproducible).
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
    let mut s = [T::zero(); 4];
    for (x, y) in ca.zip(cb) {
        s[0] = s[0] + x[0] * y[0];
        s[1] = s[1] + x[1] * y[1];
        s[2] = s[2] + x[2] * y[2];
        s[3] = s[3] + x[3] * y[3];
    }
    ((s[0] + s[1]) + (s[2] + s[3])) + tail
}

#[inline]
pub fn norm<T: Scalar>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

/// Returns `v / ‖v‖₂`.
pub fn normalize<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    let n = norm(v);
    if !(n > T::zero()) || !n.is_finite() {
        return Err(Error::domain("cannot normalize a zero or non-finite vector"));
    }
    Ok(v.iter().map(|&x| x / n).collect())
}

pub fn is_unit<T: Scalar>(v: &[T]) -> bool {
    (norm(v) - T::one()).abs() <= T::tolerance(UNIT_NORM_TOL)
}

/// `out += s · v`
#[inline]
pub fn axpy<T: Scalar>(out: &mut [T], s: T, v: &[T]) {
    debug_assert_eq!(out.len(), v.len());
    for (o, &x) in out.iter_mut().zip(v) {
        *o = *o + s * x;
    }
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "cosine_similarity",
            expected: a.len(),
            actual: b.len(),
        });
    }
    let na = norm(a);
    if !(na > T::zero()) {
        return Err(Error::domain("cosine_similarity: argument `a` has zero norm"));
    }
    let nb = norm(b);
    if !(nb > T::zero()) {
        return Err(Error::domain("cosine_similarity: argument `b` has zero norm"));
    }
    let c = dot(a, b) / (na * nb);
    Ok(c.max(-T::one()).min(T::one()))
}

/// `softmax(v / temperature)` computed with max subtraction.
pub fn softmax<T: Scalar>(v: &[T], temperature: T) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(Error::domain("softmax of an empty vector"));
    }
    if !(temperature > T::zero()) || !temperature.is_finite() {
        return Err(Error::domain(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: "softmax input".into(),
        });
    }
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = v.iter().map(|&x| ((x - max) / temperature).exp()).collect();
    let total: T = out.iter().copied().sum();
    for o in &mut out {
        *o = *o / total;
    }
    Ok(out)
}

/// Indices of the `k` largest entries, largest first; ties go to the lower index.
pub fn top_k_indices<T: Scalar>(v: &[T], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::domain("top_k_indices: K must be at least 1"));
    }
    if v.is_empty() {
        return Err(Error::domain("top_k_indices of an empty vector"));
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| {
        v[j].partial_cmp(&v[i])
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    idx.truncate(k.min(v.len()));
    Ok(idx)
}
