//! Per-class Gaussian feature statistics and pseudo-feature sampling.
//!
//! The final layer keeps a full covariance; earlier layers keep per-coordinate variances.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoders::LayerEmbeddings;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::rng::Rng;

pub const DEFAULT_RIDGE: f64 = 1e-4;
pub const DEFAULT_REPLAY_PER_CLASS: usize = 8;
const RIDGE_ESCALATIONS: u32 = 3;
const ZERO_VARIANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReplayStats {
    pub class: usize,
    pub final_mean: Vec<f64>,
    /// Empirical covariance plus `ridge · I`.
    pub final_covariance: Mat<f64>,
    pub ridge: f64,
    /// Layers before the final one, in order.
    pub intermediate: Vec<DiagonalStats>,
    pub sample_count: usize,
}

/// Mean and unbiased covariance of the final layer (full) and earlier layers (diagonal).
///
/// `ridge` is relative: the added diagonal is `ridge · trace(Σ) / D`, or `ridge` itself
/// when the covariance is numerically zero.
pub fn fit_stats(class: usize, samples: &[&LayerEmbeddings], ridge: f64) -> Result<ClassReplayStats> {
    let stacks: Vec<&[Vec<f64>]> = samples.iter().map(|s| s.layers()).collect();
    fit_layer_stats(class, &stacks, ridge)
}

/// As [`fit_stats`], over raw (not necessarily normalized) layer stacks.
pub fn fit_layer_stats(class: usize, samples: &[&[Vec<f64>]], ridge: f64) -> Result<ClassReplayStats> {
    if samples.len() < 2 {
        return Err(Error::domain(format!(
            "class {class}: replay statistics need at least 2 samples, got {}",
            samples.len()
        )));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::Config(format!("replay ridge must be non-negative, got {ridge}")));
    }
    let b = samples[0].len();
    let d = samples[0].first().map(Vec::len).unwrap_or(0);
    if b == 0 || d == 0 {
        return Err(Error::domain("replay statistics need non-empty layer stacks"));
    }
    if let Some(s) = samples.iter().find(|s| s.len() != b || s.iter().any(|l| l.len() != d)) {
        return Err(Error::DimensionMismatch {
            context: "fit_stats sample shape",
            expected: b * d,
            actual: s.iter().map(Vec::len).sum(),
        });
    }
    let n = samples.len() as f64;
    let mean_of = |layer: usize| -> Vec<f64> {
        let mut m = vec![0.0; d];
        for s in samples {
            for (a, x) in m.iter_mut().zip(&s[layer]) {
                *a += x;
            }
        }
        m.iter_mut().for_each(|a| *a /= n);
        m
    };

    let last = b - 1;
    let final_mean = mean_of(last);
    let mut cov = Mat::zeros(d, d);
    for s in samples {
        let c: Vec<f64> = s[last].iter().zip(&final_mean).map(|(x, m)| x - m).collect();
        cov.add_outer(&c, &c);
    }
    let mut cov = cov.scale(1.0 / (n - 1.0));
    let tr = cov.trace();
    let per_dim = tr / d as f64;
    let eps = if per_dim > ZERO_VARIANCE { ridge * per_dim } else { ridge };
    for i in 0..d {
        cov.as_mut_slice()[i * d + i] += eps;
    }

    let intermediate = (0..last)
        .map(|layer| {
            let mean = mean_of(layer);
            let mut variance = vec![0.0; d];
            for s in samples {
                for ((v, x), m) in variance.iter_mut().zip(&s[layer]).zip(&mean) {
                    *v += (x - m) * (x - m);
                }
            }
            variance.iter_mut().for_each(|v| *v /= n - 1.0);
            DiagonalStats { mean, variance }
        })
        .collect();

    Ok(ClassReplayStats {
        class,
        final_mean,
        final_covariance: cov,
        ridge: eps,
        intermediate,
        sample_count: samples.len(),
    })
}

/// Lower-triangular `L` with `L Lᵀ = a`, accepting (near-)zero pivots of a PSD matrix.
fn cholesky_psd(a: &Mat<f64>) -> Option<Mat<f64>> {
    let n = a.rows();
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut pivot = a[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if pivot < -tol * 1e3 || !pivot.is_finite() {
            return None;
        }
        if pivot <= tol {
            continue;
        }
        let ljj = pivot.sqrt();
        l.as_mut_slice()[j * n + j] = ljj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l.as_mut_slice()[i * n + j] = s / ljj;
        }
    }
    Some(l)
}

/// Pre-factored sampler for one class.
#[derive(Clone, Debug)]
pub struct ReplaySampler<'a> {
    stats: &'a ClassReplayStats,
    factor: Mat<f64>,
    stds: Vec<Vec<f64>>,
}

impl<'a> ReplaySampler<'a> {
    pub fn new(stats: &'a ClassReplayStats) -> Result<Self> {
        let d = stats.final_mean.len();
        let mut cov = stats.final_covariance.clone();
        let base = if stats.ridge > 0.0 { stats.ridge } else { DEFAULT_RIDGE };
        let mut factor = cholesky_psd(&cov);
        let mut extra = base;
        for attempt in 1..=RIDGE_ESCALATIONS {
            if factor.is_some() {
                break;
            }
            extra *= 10.0;
            log::warn!(
                "class {}: covariance not positive semi-definite, escalating ridge to {extra:e} (attempt {attempt})",
                stats.class
            );
            cov = stats.final_covariance.clone();
            for i in 0..d {
                cov.as_mut_slice()[i * d + i] += extra;
            }
            factor = cholesky_psd(&cov);
        }
        let factor = factor.ok_or_else(|| {
            Error::domain(format!(
                "class {}: Cholesky failed after {RIDGE_ESCALATIONS} ridge escalations",
                stats.class
            ))
        })?;
        let stds = stats
            .intermediate
            .iter()
            .map(|l| l.variance.iter().map(|v| v.max(0.0).sqrt()).collect())
            .collect();
        Ok(ReplaySampler { stats, factor, stds })
    }

    pub fn class(&self) -> usize {
        self.stats.class
    }

    /// Final-layer draws before normalization.
    pub fn draw_raw(&self, n: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
        let d = self.stats.final_mean.len();
        (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let mut x = self.stats.final_mean.clone();
                for (i, xi) in x.iter_mut().enumerate() {
                    let row = self.factor.row(i);
                    *xi += row[..=i].iter().zip(&z).map(|(l, z)| l * z).sum::<f64>();
                }
                x
            })
            .collect()
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Vec<LayerEmbeddings>> {
        let mut out = Vec::with_capacity(n);
        for final_layer in self.draw_raw(n, rng) {
            let mut layers: Vec<Vec<f64>> = self
                .stats
                .intermediate
                .iter()
                .zip(&self.stds)
                .map(|(l, sd)| {
                    l.mean
                        .iter()
                        .zip(sd)
                        .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect();
            layers.push(final_layer);
            out.push(LayerEmbeddings::from_raw(layers).map_err(|e| {
                Error::domain(format!("class {}: degenerate pseudo-feature: {e}", self.stats.class))
            })?);
        }
        Ok(out)
    }
}

/// Draw `n` unit-normalized pseudo-feature stacks for one class.
pub fn sample_pseudo(stats: &ClassReplayStats, n: usize, rng: &mut Rng) -> Result<Vec<LayerEmbeddings>> {
    if n == 0 {
        return Err(Error::domain("sample_pseudo needs n ≥ 1"));
    }
    ReplaySampler::new(stats)?.sample(n, rng)
}

/// One entry of a training batch; real and replayed features have the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub label: usize,
    pub features: LayerEmbeddings,
    /// Sample id of real features, used to look up cached hierarchies.
    pub cache_key: Option<String>,
}

/// Append `replay_per_class` pseudo-features for every past class and shuffle.
pub fn mix_replay_batch(
    mut batch: Vec<BatchItem>,
    past: &[ReplaySampler<'_>],
    replay_per_class: usize,
    rng: &mut Rng,
) -> Result<Vec<BatchItem>> {
    if past.is_empty() || replay_per_class == 0 {
        return Ok(batch);
    }
    for sampler in past {
        for features in sampler.sample(replay_per_class, rng)? {
            batch.push(BatchItem {
                label: sampler.class(),
                features,
                cache_key: None,
            });
        }
    }
    batch.shuffle(rng);
    Ok(batch)
}
