//! Layer router, adapter, contrastive scoring with hand-written gradients,
//! and the subspace-projected router update applied between tasks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, softmax, svd_thin, Mat};
use crate::matching::{HierarchyEmbeddings, LayerSubset};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterState<T> {
    /// Active layers × D.
    pub w_r: Mat<T>,
    /// D × D.
    pub w_a: Mat<T>,
    pub p_old: Option<Mat<T>>,
    pub retained_rank: Option<usize>,
    pub task_counter: usize,
}

impl<T: Scalar> RouterState<T> {
    /// Zero router (uniform routing) and identity adapter.
    pub fn new(num_layers: usize, dim: usize) -> Self {
        RouterState {
            w_r: Mat::zeros(num_layers, dim),
            w_a: Mat::identity(dim),
            p_old: None,
            retained_rank: None,
            task_counter: 0,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.w_r.rows()
    }

    pub fn dim(&self) -> usize {
        self.w_a.rows()
    }

}

impl<T: Scalar + Serialize + serde::de::DeserializeOwned> RouterState<T> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let state: Self = serde_json::from_str(&text)?;
        if state.w_r.cols() != state.w_a.rows() || !state.w_a.is_square() {
            return Err(Error::Schema {
                path: path.display().to_string(),
                message: format!(
                    "inconsistent shapes: w_r {:?}, w_a {:?}",
                    state.w_r.shape(),
                    state.w_a.shape()
                ),
            });
        }
        Ok(state)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    /// Weight of the routed hierarchical embedding against the template embedding.
    pub lambda: f64,
    /// Logit temperature.
    pub tau: f64,
    /// Descriptors kept per (class, layer).
    pub k: usize,
    pub layer_subset: LayerSubset,
    pub alpha_temperature: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            lambda: 0.5,
            tau: 0.01,
            k: 5,
            layer_subset: LayerSubset::All,
            alpha_temperature: 1.0,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("scoring.lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("scoring.tau must be positive, got {}", self.tau)));
        }
        if self.k == 0 {
            return Err(Error::Config("scoring.k must be at least 1".into()));
        }
        if !(self.alpha_temperature > 0.0 && self.alpha_temperature.is_finite()) {
            return Err(Error::Config("scoring.alpha_temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Routing {
    /// β = softmax(W_r x).
    Learned,
    /// β uniform; W_r receives no gradient.
    Uniform,
}

/// Scalar knobs of the forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoringParams<T> {
    pub lambda: T,
    pub tau: T,
    pub routing: Routing,
}

impl<T: Scalar> ScoringParams<T> {
    pub fn from_config(config: &ScoringConfig, routing: Routing) -> Self {
        ScoringParams {
            lambda: T::lit(config.lambda),
            tau: T::lit(config.tau),
            routing,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientPair<T> {
    pub d_w_r: Mat<T>,
    pub d_w_a: Mat<T>,
    pub loss: T,
}

/// One training or scoring input: final-layer feature, target position, and per-class structures.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a, T> {
    pub x_final: &'a [T],
    /// Position of the true class within `hierarchy.classes`.
    pub label: usize,
    pub hierarchy: &'a HierarchyEmbeddings<T>,
    /// Template embedding of each class, same order as `hierarchy.classes`.
    pub templates: &'a [Vec<T>],
}

pub fn route<T: Scalar>(state: &RouterState<T>, x_final: &[T]) -> Result<Vec<T>> {
    check_dim("route input", state.w_r.cols(), x_final.len())?;
    softmax(&state.w_r.matvec(x_final), T::one())
}

fn routing_weights<T: Scalar>(state: &RouterState<T>, routing: Routing, x: &[T]) -> Result<Vec<T>> {
    match routing {
        Routing::Learned => route(state, x),
        Routing::Uniform => {
            let l = state.num_layers();
            Ok(vec![T::one() / T::lit(l as f64); l])
        }
    }
}

/// `Σ_b β_b h^b` over the rows of `h`.
pub fn fuse<T: Scalar>(h: &Mat<T>, beta: &[T]) -> Result<Vec<T>> {
    check_dim("fuse weights", h.rows(), beta.len())?;
    Ok(h.matvec_t(beta))
}

fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}

/// λ-mixed class embeddings `λ h̃_i + (1 − λ) e_i`.
fn mixed<T: Scalar>(lambda: T, fused: &[T], template: &[T]) -> Vec<T> {
    fused
        .iter()
        .zip(template)
        .map(|(&h, &e)| lambda * h + (T::one() - lambda) * e)
        .collect()
}

/// Probabilities over classes given already-fused `h̃_i` and templates `e_i`.
pub fn class_scores<T: Scalar>(
    state: &RouterState<T>,
    params: &ScoringParams<T>,
    x_final: &[T],
    fused: &[Vec<T>],
    templates: &[Vec<T>],
) -> Result<Vec<T>> {
    check_dim("class_scores input", state.dim(), x_final.len())?;
    check_dim("class_scores templates", fused.len(), templates.len())?;
    if fused.is_empty() {
        return Err(Error::domain("class_scores needs at least one class"));
    }
    let q = state.w_a.matvec(x_final);
    let qn = norm(&q);
    if qn == T::zero() {
        return Err(Error::domain("adapter output is the zero vector"));
    }
    let mut logits = Vec::with_capacity(fused.len());
    for (i, (h, e)) in fused.iter().zip(templates).enumerate() {
        check_dim("class_scores class embedding", q.len(), h.len())?;
        check_dim("class_scores template", q.len(), e.len())?;
        let m = mixed(params.lambda, h, e);
        let mn = norm(&m);
        if mn == T::zero() {
            return Err(Error::domain(format!("mixed embedding of class {i} has zero norm")));
        }
        logits.push(dot(&q, &m) / (qn * mn) / params.tau);
    }
    softmax(&logits, T::one())
}

/// Class probabilities for one example, routing included.
pub fn predict<T: Scalar>(state: &RouterState<T>, params: &ScoringParams<T>, ex: &Example<'_, T>) -> Result<Vec<T>> {
    let beta = routing_weights(state, params.routing, ex.x_final)?;
    let fused = ex
        .hierarchy
        .classes
        .iter()
        .map(|c| fuse(&c.h, &beta))
        .collect::<Result<Vec<_>>>()?;
    class_scores(state, params, ex.x_final, &fused, ex.templates)
}

/// Mean cross-entropy over the batch and its gradients with respect to `W_r` and `W_a`.
pub fn loss_and_grads<T: Scalar>(
    state: &RouterState<T>,
    params: &ScoringParams<T>,
    batch: &[Example<'_, T>],
) -> Result<GradientPair<T>> {
    if batch.is_empty() {
        return Err(Error::domain("loss_and_grads needs a non-empty batch"));
    }
    let (l, d) = (state.num_layers(), state.dim());
    let inv_n = T::one() / T::lit(batch.len() as f64);
    let mut d_w_r = Mat::zeros(l, d);
    let mut d_w_a = Mat::zeros(d, d);
    let mut loss = T::zero();
    let lambda = params.lambda;

    for (idx, ex) in batch.iter().enumerate() {
        let non_finite = || Error::NonFinite {
            context: format!("forward pass at batch index {idx}"),
        };
        let classes = &ex.hierarchy.classes;
        check_dim("loss_and_grads input", d, ex.x_final.len())?;
        check_dim("loss_and_grads templates", classes.len(), ex.templates.len())?;
        if ex.label >= classes.len() {
            return Err(Error::domain(format!(
                "batch index {idx}: label position {} outside {} active classes",
                ex.label,
                classes.len()
            )));
        }
        let x = ex.x_final;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(non_finite());
        }
        let beta = routing_weights(state, params.routing, x)?;
        let q = state.w_a.matvec(x);
        let qn = norm(&q);
        if !(qn > T::zero()) {
            return Err(non_finite());
        }
        let mut ms = Vec::with_capacity(classes.len());
        let mut cos = Vec::with_capacity(classes.len());
        for (i, c) in classes.iter().enumerate() {
            check_dim("loss_and_grads hierarchy layers", l, c.h.rows())?;
            let m = mixed(lambda, &fuse(&c.h, &beta)?, &ex.templates[i]);
            let mn = norm(&m);
            if mn == T::zero() {
                return Err(Error::domain(format!(
                    "batch index {idx}: mixed embedding of class {} has zero norm",
                    c.class
                )));
            }
            cos.push((dot(&q, &m) / (qn * mn), mn));
            ms.push(m);
        }
        let logits: Vec<T> = cos.iter().map(|&(c, _)| c / params.tau).collect();
        let p = softmax(&logits, T::one()).map_err(|_| non_finite())?;
        let lmax = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = lmax + logits.iter().map(|&z| (z - lmax).exp()).sum::<T>().ln();
        let li = lse - logits[ex.label];
        if !li.is_finite() {
            return Err(non_finite());
        }
        loss = loss + li * inv_n;

        let mut dq = vec![T::zero(); d];
        let mut dbeta = vec![T::zero(); l];
        for (k, ((c, mn), m)) in cos.iter().zip(&ms).enumerate() {
            let y = if k == ex.label { T::one() } else { T::zero() };
            let g = (p[k] - y) / params.tau * inv_n;
            if g == T::zero() {
                continue;
            }
            // ∂cos/∂q and ∂cos/∂m
            axpy(&mut dq, g / (qn * *mn), m);
            axpy(&mut dq, -g * *c / (qn * qn), &q);
            if params.routing == Routing::Learned && lambda != T::zero() {
                let mut dm = vec![T::zero(); d];
                axpy(&mut dm, g / (qn * *mn), &q);
                axpy(&mut dm, -g * *c / (*mn * *mn), m);
                let h = &classes[k].h;
                for (b, db) in dbeta.iter_mut().enumerate() {
                    *db = *db + lambda * dot(&dm, h.row(b));
                }
            }
        }
        d_w_a.add_outer(&dq, x);
        if params.routing == Routing::Learned && lambda != T::zero() {
            let mean: T = beta.iter().zip(&dbeta).map(|(&b, &g)| b * g).sum();
            let dr: Vec<T> = beta.iter().zip(&dbeta).map(|(&b, &g)| b * (g - mean)).collect();
            d_w_r.add_outer(&dr, x);
        }
    }
    if !d_w_r.is_finite() || !d_w_a.is_finite() {
        return Err(Error::NonFinite {
            context: "loss_and_grads gradients".into(),
        });
    }
    Ok(GradientPair { d_w_r, d_w_a, loss })
}

/// Plain SGD with global-norm clipping over both gradients.
pub fn sgd_step<T: Scalar>(state: &mut RouterState<T>, grads: &GradientPair<T>, lr: T, grad_clip: T) {
    let total = (grads.d_w_r.as_slice().iter().chain(grads.d_w_a.as_slice()))
        .map(|&g| g * g)
        .sum::<T>()
        .sqrt();
    let scale = if total > grad_clip { grad_clip / total } else { T::one() };
    state.w_r.add_scaled(-lr * scale, &grads.d_w_r);
    state.w_a.add_scaled(-lr * scale, &grads.d_w_a);
}

/// Smallest `r` whose leading singular values hold a `delta` share of the squared energy.
pub fn energy_rank<T: Scalar>(sigma: &[T], delta: T) -> Result<usize> {
    if !(delta > T::zero() && delta <= T::one()) {
        return Err(Error::domain(format!("delta must lie in (0, 1], got {delta}")));
    }
    if sigma.iter().any(|&s| !(s >= T::zero()) || !s.is_finite()) {
        return Err(Error::domain("singular values must be finite and non-negative"));
    }
    if sigma.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::domain("singular values must be sorted in descending order"));
    }
    let total: T = sigma.iter().map(|&s| s * s).sum();
    if total == T::zero() {
        return Err(Error::domain("all singular values are zero"));
    }
    let mut acc = T::zero();
    for (r, &s) in sigma.iter().enumerate() {
        acc = acc + s * s;
        if acc / total >= delta {
            return Ok(r + 1);
        }
    }
    Ok(sigma.len())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection<T> {
    pub w_proj: Mat<T>,
    /// `None` when the previous router was all zeros.
    pub p_old: Option<Mat<T>>,
    pub retained_rank: Option<usize>,
}

/// `ρ P W_new + (1 − ρ)(I − P) W_new`, with `P` spanning the dominant left singular
/// directions of `W_old`.
pub fn projected_update<T: Scalar>(w_old: &Mat<T>, w_new: &Mat<T>, rho: T, delta: T) -> Result<Projection<T>> {
    if w_old.shape() != w_new.shape() {
        return Err(Error::DimensionMismatch {
            context: "projected_update W_old vs W_new rows",
            expected: w_old.rows(),
            actual: w_new.rows(),
        });
    }
    if !(rho >= T::zero() && rho <= T::one()) {
        return Err(Error::domain(format!("rho must lie in [0, 1], got {rho}")));
    }
    if !(delta > T::zero() && delta <= T::one()) {
        return Err(Error::domain(format!("delta must lie in (0, 1], got {delta}")));
    }
    if w_old.as_slice().iter().all(|&x| x == T::zero()) {
        log::warn!("previous router weights are all zero; keeping the new weights unprojected");
        return Ok(Projection {
            w_proj: w_new.clone(),
            p_old: None,
            retained_rank: None,
        });
    }
    let svd = svd_thin(w_old)?;
    let r = energy_rank(&svd.sigma, delta)?;
    let n = w_old.rows();
    let p = Mat::from_fn(n, n, |i, j| {
        (0..r).map(|c| svd.u[(i, c)] * svd.u[(j, c)]).sum::<T>()
    });
    let pw = p.matmul(w_new);
    let w_proj = pw.zip_map(w_new, |a, w| rho * a + (T::one() - rho) * (w - a));
    Ok(Projection {
        w_proj,
        p_old: Some(p),
        retained_rank: Some(r),
    })
}

#[cfg(test)]
mod tests;
