//! Hierarchical descriptor scoring and Top-K aggregation.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::descriptors::DescriptorBank;
use crate::error::{Error, Result};
use crate::linalg::{axpy, cosine_similarity, dot, norm, softmax, top_k_indices, Mat};
use crate::Scalar;

/// Which encoder layers take part in matching (0-based indices).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum LayerSubset {
    #[default]
    All,
    Only(Vec<usize>),
}

impl LayerSubset {
    /// Concrete layer indices for a stack of `num_layers` layers.
    pub fn resolve(&self, num_layers: usize) -> Result<Vec<usize>> {
        match self {
            LayerSubset::All => Ok((0..num_layers).collect()),
            LayerSubset::Only(list) => {
                if list.is_empty() {
                    return Err(Error::Config("layer_subset must not be empty".into()));
                }
                let mut seen = vec![false; num_layers];
                for &b in list {
                    if b >= num_layers {
                        return Err(Error::Config(format!(
                            "layer_subset entry {b} out of range for {num_layers} layers"
                        )));
                    }
                    if std::mem::replace(&mut seen[b], true) {
                        return Err(Error::Config(format!("layer_subset repeats layer {b}")));
                    }
                }
                Ok(list.clone())
            }
        }
    }
}

impl Serialize for LayerSubset {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LayerSubset::All => s.serialize_str("all"),
            LayerSubset::Only(v) => v.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for LayerSubset {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Name(String),
            List(Vec<usize>),
        }
        match Raw::deserialize(d)? {
            Raw::Name(s) if s == "all" => Ok(LayerSubset::All),
            Raw::Name(s) => Err(serde::de::Error::custom(format!(
                "layer_subset must be \"all\" or a list of layer indices, got \"{s}\""
            ))),
            Raw::List(v) => Ok(LayerSubset::Only(v)),
        }
    }
}

/// Top-K descriptor indices chosen for one (class, layer) and their softmax weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection<T> {
    pub indices: Vec<usize>,
    pub weights: Vec<T>,
}

/// `h_i^b` for every matched layer of one class, plus how each row was formed.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassHierarchy<T> {
    pub class: usize,
    /// One row per matched layer.
    pub h: Mat<T>,
    pub selections: Vec<Selection<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierarchyEmbeddings<T> {
    /// Encoder layer index of each row of every `ClassHierarchy::h`.
    pub layers: Vec<usize>,
    /// In the order of `active_classes`.
    pub classes: Vec<ClassHierarchy<T>>,
}

impl<T: Scalar> HierarchyEmbeddings<T> {
    pub fn class(&self, class: usize) -> Option<&ClassHierarchy<T>> {
        self.classes.iter().find(|c| c.class == class)
    }
}

/// Descriptor embeddings for each class index, with their norms precomputed.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassTables<T> {
    names: Vec<String>,
    embeddings: Vec<Vec<Vec<T>>>,
    norms: Vec<Vec<T>>,
}

impl<T: Scalar> ClassTables<T> {
    pub fn new(names: Vec<String>, embeddings: Vec<Vec<Vec<T>>>) -> Result<Self> {
        if names.len() != embeddings.len() {
            return Err(Error::DimensionMismatch {
                context: "class tables names vs embeddings",
                expected: names.len(),
                actual: embeddings.len(),
            });
        }
        let mut norms = Vec::with_capacity(embeddings.len());
        for (name, table) in names.iter().zip(&embeddings) {
            if table.is_empty() {
                return Err(Error::domain(format!("class `{name}` has no descriptors")));
            }
            let n: Vec<T> = table.iter().map(|z| norm(z)).collect();
            if n.iter().any(|&v| !(v > T::zero()) || !v.is_finite()) {
                return Err(Error::domain(format!("class `{name}` has a zero or non-finite descriptor embedding")));
            }
            norms.push(n);
        }
        Ok(ClassTables {
            names,
            embeddings,
            norms,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Descriptor embeddings of class `c`.
    pub fn class(&self, c: usize) -> Option<&[Vec<T>]> {
        self.embeddings.get(c).map(Vec::as_slice)
    }

    /// Pull the embedded descriptors of `class_names` out of a bank, in that order.
    pub fn from_bank(bank: &DescriptorBank, class_names: &[String]) -> Result<Self> {
        let mut embeddings = Vec::with_capacity(class_names.len());
        for name in class_names {
            let entry = bank.get(name)?;
            let emb = entry.embeddings.as_ref().ok_or_else(|| {
                Error::domain(format!("class `{name}` has no descriptor embeddings"))
            })?;
            embeddings.push(
                emb.iter()
                    .map(|z| z.iter().map(|&x| T::lit(x)).collect())
                    .collect(),
            );
        }
        Self::new(class_names.to_vec(), embeddings)
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchConfig<T> {
    pub k: usize,
    pub alpha_temperature: T,
    pub layers: Vec<usize>,
}

/// Cosine of one layer's visual summary against each of a class's descriptors.
pub fn score_layer<T: Scalar>(x: &[T], descriptors: &[Vec<T>]) -> Result<Vec<T>> {
    descriptors
        .iter()
        .map(|z| cosine_similarity(x, z))
        .collect()
}

pub fn aggregate_topk<T: Scalar>(
    similarities: &[T],
    embeddings: &[Vec<T>],
    k: usize,
    alpha_temperature: T,
) -> Result<(Vec<T>, Selection<T>)> {
    if similarities.is_empty() || embeddings.is_empty() {
        return Err(Error::domain("aggregate_topk needs at least one descriptor"));
    }
    let mut h = vec![T::zero(); embeddings[0].len()];
    let sel = aggregate_into(similarities, embeddings, k, alpha_temperature, &mut h)?;
    Ok((h, sel))
}

/// Top-K selection and softmax weights, accumulating `Σ α z` into `out` (which must start at zero).
fn aggregate_into<T: Scalar>(
    similarities: &[T],
    embeddings: &[Vec<T>],
    k: usize,
    alpha_temperature: T,
    out: &mut [T],
) -> Result<Selection<T>> {
    if similarities.len() != embeddings.len() {
        return Err(Error::DimensionMismatch {
            context: "aggregate_topk similarities vs embeddings",
            expected: embeddings.len(),
            actual: similarities.len(),
        });
    }
    let indices = top_k_indices(similarities, k)?;
    let mut weights: Vec<T> = indices.iter().map(|&i| similarities[i]).collect();
    softmax_in_place(&mut weights, alpha_temperature)?;
    for (&i, &w) in indices.iter().zip(&weights) {
        if embeddings[i].len() != out.len() {
            return Err(Error::DimensionMismatch {
                context: "aggregate_topk embedding",
                expected: out.len(),
                actual: embeddings[i].len(),
            });
        }
        axpy(out, w, &embeddings[i]);
    }
    Ok(Selection { indices, weights })
}

fn softmax_in_place<T: Scalar>(v: &mut [T], temperature: T) -> Result<()> {
    let s = softmax(v, temperature)?;
    v.copy_from_slice(&s);
    Ok(())
}

/// `h_i^b` for every class in `active` and every layer in `config.layers`.
pub fn build_hierarchy<T: Scalar>(
    layers: &[Vec<T>],
    tables: &ClassTables<T>,
    active: &[usize],
    config: &MatchConfig<T>,
) -> Result<HierarchyEmbeddings<T>> {
    if active.is_empty() {
        return Err(Error::domain("build_hierarchy needs at least one active class"));
    }
    let dim = layers.first().map(Vec::len).unwrap_or(0);
    let mut xs = Vec::with_capacity(config.layers.len());
    for &b in &config.layers {
        let x = layers.get(b).ok_or(Error::DimensionMismatch {
            context: "build_hierarchy layer index",
            expected: layers.len(),
            actual: b + 1,
        })?;
        let nx = norm(x);
        if !(nx > T::zero()) {
            return Err(Error::domain(format!("layer {b} feature has zero norm")));
        }
        xs.push((b, x, nx));
    }
    let mut classes = Vec::with_capacity(active.len());
    let mut sims = Vec::new();
    for &c in active {
        let (table, norms) = match (tables.embeddings.get(c), tables.norms.get(c)) {
            (Some(t), Some(n)) => (t, n),
            _ => return Err(Error::domain(format!("class index {c} is not in the descriptor bank"))),
        };
        let mut h = Mat::zeros(config.layers.len(), dim);
        let mut selections = Vec::with_capacity(config.layers.len());
        for (row, &(b, x, nx)) in xs.iter().enumerate() {
            sims.clear();
            for (z, &nz) in table.iter().zip(norms) {
                if z.len() != x.len() {
                    return Err(Error::domain(format!(
                        "class `{}` at layer {b}: descriptor dimension {} vs feature dimension {}",
                        tables.names[c],
                        z.len(),
                        x.len()
                    )));
                }
                // same expression as `cosine_similarity`, with the norms hoisted
                let s = dot(x, z) / (nx * nz);
                sims.push(s.max(-T::one()).min(T::one()));
            }
            let sel = aggregate_into(&sims, table, config.k, config.alpha_temperature, h.row_mut(row))?;
            selections.push(sel);
        }
        classes.push(ClassHierarchy {
            class: c,
            h,
            selections,
        });
    }
    Ok(HierarchyEmbeddings {
        layers: config.layers.clone(),
        classes,
    })
}

/// Hierarchies of frozen training samples, reused across epochs of one task.
///
/// Filled once per task, then sealed; lookups after sealing never recompute.
#[derive(Debug, Default)]
pub struct HierarchyCache<T> {
    entries: HashMap<String, HierarchyEmbeddings<T>>,
    active: Vec<usize>,
    sealed: bool,
}

impl<T: Scalar> HierarchyCache<T> {
    pub fn new(active: Vec<usize>) -> Self {
        HierarchyCache {
            entries: HashMap::new(),
            active,
            sealed: false,
        }
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn insert(&mut self, id: &str, layers: &[Vec<T>], tables: &ClassTables<T>, config: &MatchConfig<T>) -> Result<()> {
        if self.sealed {
            return Err(Error::domain("hierarchy cache is sealed"));
        }
        if !self.entries.contains_key(id) {
            let h = build_hierarchy(layers, tables, &self.active, config)?;
            self.entries.insert(id.to_string(), h);
        }
        Ok(())
    }

    /// Store a hierarchy built elsewhere (e.g. in parallel) for `active`.
    pub fn put(&mut self, id: &str, hierarchy: HierarchyEmbeddings<T>) {
        assert!(!self.sealed, "hierarchy cache is sealed");
        self.entries.entry(id.to_string()).or_insert(hierarchy);
    }

    pub fn seal(&mut self) {
        self.sealed = true;
    }

    pub fn get(&self, id: &str) -> Option<&HierarchyEmbeddings<T>> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub const SELECTION_CSV_HEADER: &str = "sample,class,layer,rank,descriptor,alpha";

/// Append one row per selected descriptor to a diagnostic CSV.
pub fn write_selection_rows<T: Scalar, W: Write>(
    out: &mut W,
    sample_id: &str,
    hierarchy: &HierarchyEmbeddings<T>,
    class_names: &[String],
) -> std::io::Result<()> {
    for ch in &hierarchy.classes {
        let name = class_names.get(ch.class).map(String::as_str).unwrap_or("?");
        for (&b, sel) in hierarchy.layers.iter().zip(&ch.selections) {
            for (rank, (&m, &a)) in sel.indices.iter().zip(&sel.weights).enumerate() {
                writeln!(out, "{sample_id},{name},{b},{rank},{m},{a}")?;
            }
        }
    }
    Ok(())
}
