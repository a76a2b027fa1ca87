//! Sources of multi-layer visual embeddings and text embeddings.

mod ndjson;
mod world;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{is_unit, normalize};

pub use ndjson::{load_embedding_bank, parse_embedding_bank, save_embedding_bank, EmbeddingBankData};
pub use world::{generate_world, synthetic_text_encoder, GroundTruth, World, WorldSpec};

/// One unit-normalized CLS vector per encoder layer, shallowest first.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerEmbeddings {
    layers: Vec<Vec<f64>>,
}

impl LayerEmbeddings {
    /// Wraps layers that are already unit-normalized.
    pub fn new(layers: Vec<Vec<f64>>) -> Result<Self> {
        Self::check_shape(&layers)?;
        if let Some(b) = layers.iter().position(|l| !is_unit(l)) {
            return Err(Error::domain(format!("layer {b} is not unit-normalized")));
        }
        Ok(Self { layers })
    }

    /// Normalizes every layer to unit length.
    pub fn from_raw(layers: Vec<Vec<f64>>) -> Result<Self> {
        Self::check_shape(&layers)?;
        let layers = layers
            .iter()
            .map(|l| normalize(l))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    fn check_shape(layers: &[Vec<f64>]) -> Result<()> {
        let first = layers
            .first()
            .ok_or_else(|| Error::domain("a sample needs at least one layer"))?;
        if first.is_empty() {
            return Err(Error::domain("layer embeddings must have positive dimension"));
        }
        for l in layers {
            if l.len() != first.len() {
                return Err(Error::DimensionMismatch {
                    context: "LayerEmbeddings",
                    expected: first.len(),
                    actual: l.len(),
                });
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].len()
    }

    /// The deepest layer, `x_cls^B`.
    pub fn final_layer(&self) -> &[f64] {
        self.layers.last().expect("at least one layer")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    pub split: Split,
    pub features: LayerEmbeddings,
}

/// Deterministic map from text to a fixed-dimension embedding.
pub trait TextEncoder {
    fn dimension(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Vec<f64>>;
}

/// Encoder backed by a lookup table of precomputed embeddings.
#[derive(Clone, Debug, Default)]
pub struct MapTextEncoder {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

impl MapTextEncoder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            table: HashMap::new(),
        }
    }

    pub fn insert(&mut self, text: impl Into<String>, embedding: Vec<f64>) {
        assert_eq!(embedding.len(), self.dim, "embedding dimension");
        self.table.insert(text.into(), embedding);
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Loads a JSON object mapping each text to its embedding.
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: HashMap<String, Vec<f64>> = serde_json::from_str(&text)?;
        let dim = table.values().next().map(Vec::len).unwrap_or(0);
        if let Some((k, v)) = table.iter().find(|(_, v)| v.len() != dim) {
            return Err(Error::Encoder(format!(
                "embedding for `{k}` has dimension {}, expected {dim}",
                v.len()
            )));
        }
        Ok(Self { dim, table })
    }
}

impl MapTextEncoder {
    /// Writes the table as a JSON object with keys in sorted order.
    pub fn save_json_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let sorted: std::collections::BTreeMap<&String, &Vec<f64>> = self.table.iter().collect();
        let text = serde_json::to_string(&sorted)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

impl TextEncoder for MapTextEncoder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        self.table
            .get(text)
            .cloned()
            .ok_or_else(|| Error::Encoder(format!("no embedding for text `{text}`")))
    }
}
