//! Newline-delimited JSON bank of precomputed multi-layer features, one sample per line:
//! `{"id": str, "label": str, "split": "train"|"test", "layers": [[f, ...], ...]}`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerEmbeddings, Sample, Split};
use crate::error::{Error, Result};
use crate::linalg::norm;

#[derive(Clone, Debug)]
pub struct EmbeddingBankData {
    pub samples: Vec<Sample>,
    pub num_layers: usize,
    pub dim: usize,
    /// Indexed by label, in order of first appearance in the file.
    pub class_names: Vec<String>,
}

#[derive(Deserialize)]
struct Line {
    id: String,
    label: String,
    split: String,
    layers: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct LineOut<'a> {
    id: &'a str,
    label: &'a str,
    split: Split,
    layers: &'a [Vec<f64>],
}

const RENORMALIZE_WARN: f64 = 1e-3;

pub fn parse_embedding_bank(text: &str, source: &str) -> Result<EmbeddingBankData> {
    let err = |line: usize, message: String| Error::Parse {
        path: source.to_string(),
        line,
        message,
    };
    let mut samples = Vec::new();
    let mut class_names: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut shape: Option<(usize, usize)> = None;
    let mut renormalized = 0usize;

    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let line: Line = serde_json::from_str(raw).map_err(|e| err(line_no, e.to_string()))?;
        let split = match line.split.as_str() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(err(line_no, format!("unknown split `{other}`"))),
        };
        let b = line.layers.len();
        let d = line.layers.first().map(Vec::len).unwrap_or(0);
        if b == 0 || d == 0 {
            return Err(err(line_no, "sample has no layer data".into()));
        }
        if let Some(l) = line.layers.iter().position(|l| l.len() != d) {
            return Err(err(
                line_no,
                format!("layer {l} has dimension {}, layer 0 has {d}", line.layers[l].len()),
            ));
        }
        match shape {
            None => shape = Some((b, d)),
            Some((b0, d0)) if (b0, d0) != (b, d) => {
                return Err(err(
                    line_no,
                    format!("sample has {b} layers of dimension {d}, earlier samples have {b0} of {d0}"),
                ))
            }
            _ => {}
        }
        if line.layers.iter().any(|l| (norm(l) - 1.0).abs() > RENORMALIZE_WARN) {
            renormalized += 1;
        }
        let features =
            LayerEmbeddings::from_raw(line.layers).map_err(|e| err(line_no, e.to_string()))?;
        let label = *index.entry(line.label.clone()).or_insert_with(|| {
            class_names.push(line.label.clone());
            class_names.len() - 1
        });
        samples.push(Sample {
            id: line.id,
            label,
            split,
            features,
        });
    }
    if renormalized > 0 {
        log::warn!("{source}: re-normalized {renormalized} samples whose layer norms deviated from 1 by more than {RENORMALIZE_WARN}");
    }
    let (num_layers, dim) = shape.ok_or_else(|| err(0, "no samples".into()))?;
    Ok(EmbeddingBankData {
        samples,
        num_layers,
        dim,
        class_names,
    })
}

pub fn load_embedding_bank(path: impl AsRef<Path>) -> Result<EmbeddingBankData> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embedding_bank(&text, &path.display().to_string())
}

pub fn save_embedding_bank(
    samples: &[Sample],
    class_names: &[String],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for s in samples {
        let label = class_names.get(s.label).ok_or_else(|| {
            Error::domain(format!("sample `{}` has label {} without a class name", s.id, s.label))
        })?;
        let line = LineOut {
            id: &s.id,
            label,
            split: s.split,
            layers: s.features.layers(),
        };
        let _ = writeln!(out, "{}", serde_json::to_string(&line)?);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
