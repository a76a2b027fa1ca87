//! Synthetic hierarchical world.
//!
//! Each class `i` in coarse group `g` owns `B` signal components living in
//! disjoint coordinate blocks: component 1 is the group's coarse prototype,
//! components 2..B are class-specific offsets of increasing granularity.
//! Layer `b` carries `Σ_{j≤b} η^{b−j} u_j(i)`, so coarse cues dominate early
//! layers and fade (by `η`) in deep ones. Sample features add independent
//! isotropic Gaussian noise per layer before normalizing.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{LayerEmbeddings, MapTextEncoder, Sample, Split};
use crate::descriptors::{template_prompt, ClassDescriptors, DescriptorBank, Provenance, TemplateEmbedding};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, normalize};
use crate::rng::{self, Rng};

/// Noise added to descriptor embeddings before renormalizing.
const DESCRIPTOR_NOISE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub num_coarse_groups: usize,
    pub classes_per_group: usize,
    pub layers: usize,
    pub dim: usize,
    pub samples_per_class_train: usize,
    pub samples_per_class_test: usize,
    pub noise_std: f64,
    pub decay: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            num_coarse_groups: 4,
            classes_per_group: 5,
            layers: 6,
            dim: 96,
            samples_per_class_train: 40,
            samples_per_class_test: 20,
            noise_std: 0.35,
            decay: 0.5,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn num_classes(&self) -> usize {
        self.num_coarse_groups * self.classes_per_group
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_coarse_groups == 0 || self.classes_per_group == 0 {
            return Err(Error::domain("world needs at least one group and one class per group"));
        }
        if self.layers == 0 {
            return Err(Error::domain("world needs at least one layer"));
        }
        if self.dim < 4 * self.layers {
            return Err(Error::domain(format!(
                "world dim {} must be at least 4 × layers ({})",
                self.dim,
                4 * self.layers
            )));
        }
        if self.num_coarse_groups > self.dim / self.layers {
            return Err(Error::domain(format!(
                "{} coarse groups do not fit orthogonally in a block of {} coordinates",
                self.num_coarse_groups,
                self.dim / self.layers
            )));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::domain("noise_std must be finite and non-negative"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::domain("decay must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Coordinate ranges of the per-level signal blocks.
    pub fn blocks(&self) -> Vec<std::ops::Range<usize>> {
        let base = self.dim / self.layers;
        let extra = self.dim % self.layers;
        let mut start = 0;
        (0..self.layers)
            .map(|j| {
                let len = base + usize::from(j < extra);
                let r = start..start + len;
                start += len;
                r
            })
            .collect()
    }

    pub fn class_name(&self, class: usize) -> String {
        format!("g{}_c{}", class / self.classes_per_group, class % self.classes_per_group)
    }
}

pub fn descriptor_text(class_name: &str, level: usize) -> String {
    format!("{class_name} cue at level {level}")
}

/// Noise-free structure behind a generated world.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub class_names: Vec<String>,
    /// `components[i][j]` is `u_{j+1}(i)`.
    pub components: Vec<Vec<Vec<f64>>>,
    /// `layer_prototypes[i][b]` is the normalized noise-free layer-`b` feature of class `i`.
    pub layer_prototypes: Vec<Vec<Vec<f64>>>,
    pub descriptor_texts: Vec<Vec<String>>,
    pub descriptor_embeddings: Vec<Vec<Vec<f64>>>,
    pub templates: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct World {
    pub spec: WorldSpec,
    pub samples: Vec<Sample>,
    pub bank: DescriptorBank,
    pub templates: Vec<TemplateEmbedding>,
    pub truth: GroundTruth,
}

fn gaussian(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn random_unit_in_block(rng: &mut Rng, dim: usize, block: &std::ops::Range<usize>) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    loop {
        let g = gaussian(rng, block.len());
        if let Ok(u) = normalize(&g) {
            v[block.clone()].copy_from_slice(&u);
            return v;
        }
    }
}

/// `count` mutually orthogonal unit vectors supported on `block` (Gram-Schmidt over Gaussian draws).
fn orthonormal_in_block(
    rng: &mut Rng,
    count: usize,
    dim: usize,
    block: &std::ops::Range<usize>,
) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v = random_unit_in_block(rng, dim, block);
        for _ in 0..2 {
            for u in &out {
                let d = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= d * y);
            }
        }
        if norm(&v) > 1e-6 {
            out.push(normalize(&v).expect("non-zero"));
        }
    }
    out
}

fn sum_scaled(terms: impl Iterator<Item = (f64, Vec<f64>)>, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (w, v) in terms {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    out
}

/// Layer-`b` signal of a class (0-based `b`): `Σ_{j≤b} η^{b−j} u_j`.
fn layer_signal(components: &[Vec<f64>], b: usize, decay: f64, dim: usize) -> Vec<f64> {
    sum_scaled(
        (0..=b).map(|j| (decay.powi((b - j) as i32), components[j].clone())),
        dim,
    )
}

pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let (g_count, c_count, depth, dim) = (
        spec.num_coarse_groups,
        spec.classes_per_group,
        spec.layers,
        spec.dim,
    );
    let blocks = spec.blocks();

    let mut proto_rng = rng::stream(spec.seed, "world/components");
    let coarse = orthonormal_in_block(&mut proto_rng, g_count, dim, &blocks[0]);
    let mut components = Vec::with_capacity(g_count * c_count);
    for g in 0..g_count {
        for _ in 0..c_count {
            let mut comps = vec![coarse[g].clone()];
            for block in &blocks[1..] {
                comps.push(random_unit_in_block(&mut proto_rng, dim, block));
            }
            components.push(comps);
        }
    }
    let n_classes = components.len();
    let class_names: Vec<String> = (0..n_classes).map(|i| spec.class_name(i)).collect();

    let signals: Vec<Vec<Vec<f64>>> = components
        .iter()
        .map(|comps| (0..depth).map(|b| layer_signal(comps, b, spec.decay, dim)).collect())
        .collect();
    let layer_prototypes = signals
        .iter()
        .map(|s| s.iter().map(|v| normalize(v)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;

    let mut desc_rng = rng::stream(spec.seed, "world/descriptors");
    let mut descriptor_texts = Vec::with_capacity(n_classes);
    let mut descriptor_embeddings = Vec::with_capacity(n_classes);
    let mut templates = Vec::with_capacity(n_classes);
    for (i, comps) in components.iter().enumerate() {
        let mut texts = Vec::with_capacity(depth);
        let mut embs = Vec::with_capacity(depth);
        for m in 0..depth {
            let level = normalize(&sum_scaled((0..=m).map(|j| (1.0, comps[j].clone())), dim))?;
            let noise = gaussian(&mut desc_rng, dim);
            let noisy: Vec<f64> = level
                .iter()
                .zip(&noise)
                .map(|(x, n)| x + DESCRIPTOR_NOISE * n)
                .collect();
            texts.push(descriptor_text(&class_names[i], m + 1));
            embs.push(normalize(&noisy)?);
        }
        descriptor_texts.push(texts);
        descriptor_embeddings.push(embs);
        templates.push(normalize(&sum_scaled(
            comps.iter().map(|c| (1.0, c.clone())),
            dim,
        ))?);
    }

    let mut sample_rng = rng::stream(spec.seed, "world/samples");
    let mut samples = Vec::with_capacity(n_classes * (spec.samples_per_class_train + spec.samples_per_class_test));
    for (label, class_signals) in signals.iter().enumerate() {
        for (split, count) in [
            (Split::Train, spec.samples_per_class_train),
            (Split::Test, spec.samples_per_class_test),
        ] {
            for n in 0..count {
                let layers = class_signals
                    .iter()
                    .map(|s| {
                        let noise = gaussian(&mut sample_rng, dim);
                        s.iter()
                            .zip(&noise)
                            .map(|(x, e)| x + spec.noise_std * e)
                            .collect::<Vec<f64>>()
                    })
                    .collect();
                let split_name = match split {
                    Split::Train => "train",
                    Split::Test => "test",
                };
                samples.push(Sample {
                    id: format!("{}-{split_name}-{n:04}", class_names[label]),
                    label,
                    split,
                    features: LayerEmbeddings::from_raw(layers)?,
                });
            }
        }
    }

    let mut bank = DescriptorBank::new(Provenance::Synthetic);
    bank.embedding_dim = Some(dim);
    for i in 0..n_classes {
        bank.classes.insert(
            class_names[i].clone(),
            ClassDescriptors {
                descriptors: descriptor_texts[i].clone(),
                embeddings: Some(descriptor_embeddings[i].clone()),
                template_embedding: Some(templates[i].clone()),
            },
        );
    }
    let template_list = class_names
        .iter()
        .zip(&templates)
        .map(|(n, e)| TemplateEmbedding {
            class_name: n.clone(),
            embedding: e.clone(),
        })
        .collect();

    Ok(World {
        spec: spec.clone(),
        samples,
        bank,
        templates: template_list,
        truth: GroundTruth {
            class_names,
            components,
            layer_prototypes,
            descriptor_texts,
            descriptor_embeddings,
            templates,
        },
    })
}

/// Text encoder that knows exactly the strings a generated world emits.
pub fn synthetic_text_encoder(truth: &GroundTruth) -> MapTextEncoder {
    let dim = truth.templates.first().map(Vec::len).unwrap_or(0);
    let mut enc = MapTextEncoder::new(dim);
    for i in 0..truth.class_names.len() {
        for (t, e) in truth.descriptor_texts[i].iter().zip(&truth.descriptor_embeddings[i]) {
            enc.insert(t.clone(), e.clone());
        }
        enc.insert(template_prompt(&truth.class_names[i]), truth.templates[i].clone());
    }
    enc
}
