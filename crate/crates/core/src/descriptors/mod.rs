//! Per-class hierarchical descriptors: texts ordered coarse to fine, their
//! embeddings, and the templated class embedding.

mod bank_io;
mod fetch;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::encoders::TextEncoder;
use crate::error::{Error, Result};
use crate::linalg::{is_unit, normalize};

pub use bank_io::{load_bank, parse_bank, save_bank, to_json_string};
pub use fetch::{
    cache_path, fetch_descriptors, parse_bullets, ChatClient, ChatMessage, FetchConfig,
    FetchOutcome, HttpChatClient, API_KEY_ENV, DEFAULT_PROMPT_TEMPLATE,
};

/// Default number of descriptors requested per class.
pub const DEFAULT_DESCRIPTORS_PER_CLASS: usize = 8;

/// Text of the templated class prompt, e.g. `a photo of a golden retriever`.
pub fn template_prompt(class_name: &str) -> String {
    format!("a photo of a {}", class_name.replace('_', " "))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassDescriptors {
    /// Ordered from coarsest to finest.
    pub descriptors: Vec<String>,
    pub embeddings: Option<Vec<Vec<f64>>>,
    pub template_embedding: Option<Vec<f64>>,
}

impl ClassDescriptors {
    pub fn from_texts<S: Into<String>>(texts: impl IntoIterator<Item = S>) -> Self {
        Self {
            descriptors: texts.into_iter().map(Into::into).collect(),
            embeddings: None,
            template_embedding: None,
        }
    }

    pub fn is_embedded(&self) -> bool {
        self.embeddings.is_some() && self.template_embedding.is_some()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    LlmFetched,
    #[default]
    FileLoaded,
    Synthetic,
}

/// The templated-prompt embedding `e_i` of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateEmbedding {
    pub class_name: String,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DescriptorBank {
    pub classes: BTreeMap<String, ClassDescriptors>,
    pub embedding_dim: Option<usize>,
    pub provenance: Provenance,
}

impl DescriptorBank {
    pub fn new(provenance: Provenance) -> Self {
        Self {
            provenance,
            ..Self::default()
        }
    }

    pub fn get(&self, class_name: &str) -> Result<&ClassDescriptors> {
        self.classes
            .get(class_name)
            .ok_or_else(|| Error::domain(format!("class `{class_name}` is not in the descriptor bank")))
    }

    pub fn templates(&self) -> Vec<TemplateEmbedding> {
        self.classes
            .iter()
            .filter_map(|(name, c)| {
                c.template_embedding.as_ref().map(|e| TemplateEmbedding {
                    class_name: name.clone(),
                    embedding: e.clone(),
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    NoDescriptors { class: String },
    EmptyDescriptor { class: String, index: usize },
    DuplicateDescriptor { class: String, index: usize, first: usize },
    EmbeddingCount { class: String, expected: usize, actual: usize },
    Dimension { class: String, index: Option<usize>, expected: usize, actual: usize },
    NotUnitNorm { class: String, index: Option<usize> },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let at = |i: &Option<usize>| match i {
            Some(i) => format!("descriptor {i}"),
            None => "template".to_string(),
        };
        match self {
            Violation::NoDescriptors { class } => write!(f, "{class}: no descriptors"),
            Violation::EmptyDescriptor { class, index } => {
                write!(f, "{class}: descriptor {index} is empty")
            }
            Violation::DuplicateDescriptor { class, index, first } => {
                write!(f, "{class}: descriptor {index} duplicates descriptor {first}")
            }
            Violation::EmbeddingCount { class, expected, actual } => {
                write!(f, "{class}: {actual} embeddings for {expected} descriptors")
            }
            Violation::Dimension { class, index, expected, actual } => write!(
                f,
                "{class}: {} has dimension {actual}, expected {expected}",
                at(index)
            ),
            Violation::NotUnitNorm { class, index } => {
                write!(f, "{class}: {} embedding is not unit-normalized", at(index))
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Lists structural problems in a bank without modifying it.
pub fn validate_bank(bank: &DescriptorBank) -> ValidationReport {
    let mut violations = Vec::new();
    let mut dim = bank.embedding_dim;
    for (name, class) in &bank.classes {
        if class.descriptors.is_empty() {
            violations.push(Violation::NoDescriptors { class: name.clone() });
        }
        let mut seen: Vec<String> = Vec::new();
        for (i, d) in class.descriptors.iter().enumerate() {
            let key = d.trim().to_lowercase();
            if key.is_empty() {
                violations.push(Violation::EmptyDescriptor { class: name.clone(), index: i });
            } else if let Some(first) = seen.iter().position(|s| *s == key) {
                violations.push(Violation::DuplicateDescriptor {
                    class: name.clone(),
                    index: i,
                    first,
                });
            }
            seen.push(key);
        }

        let mut check_vec = |v: &[f64], index: Option<usize>, out: &mut Vec<Violation>| {
            let expected = *dim.get_or_insert(v.len());
            if v.len() != expected {
                out.push(Violation::Dimension {
                    class: name.clone(),
                    index,
                    expected,
                    actual: v.len(),
                });
            } else if !is_unit(v) {
                out.push(Violation::NotUnitNorm { class: name.clone(), index });
            }
        };
        if let Some(embs) = &class.embeddings {
            if embs.len() != class.descriptors.len() {
                violations.push(Violation::EmbeddingCount {
                    class: name.clone(),
                    expected: class.descriptors.len(),
                    actual: embs.len(),
                });
            }
            for (i, e) in embs.iter().enumerate() {
                check_vec(e, Some(i), &mut violations);
            }
        }
        if let Some(t) = &class.template_embedding {
            check_vec(t, None, &mut violations);
        }
    }
    ValidationReport { violations }
}

/// A class that could not be embedded; its partial results were discarded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassFailure {
    pub class: String,
    pub message: String,
}

fn unit_embedding(encoder: &dyn TextEncoder, text: &str) -> Result<Vec<f64>> {
    let v = encoder.encode(text)?;
    if v.len() != encoder.dimension() {
        return Err(Error::Encoder(format!(
            "encoder returned dimension {} for `{text}`, expected {}",
            v.len(),
            encoder.dimension()
        )));
    }
    if is_unit(&v) {
        Ok(v)
    } else {
        normalize(&v).map_err(|_| Error::Encoder(format!("zero embedding for `{text}`")))
    }
}

/// Encodes every descriptor and every class template with `encoder`.
///
/// Classes the encoder fails on keep their previous state and are reported.
/// Re-attaching with the same encoder yields the same bank.
pub fn attach_embeddings(
    bank: &DescriptorBank,
    encoder: &dyn TextEncoder,
) -> (DescriptorBank, Vec<ClassFailure>) {
    let mut out = bank.clone();
    let mut failures = Vec::new();
    for (name, class) in out.classes.iter_mut() {
        let encoded: Result<(Vec<Vec<f64>>, Vec<f64>)> = (|| {
            let embs = class
                .descriptors
                .iter()
                .map(|d| unit_embedding(encoder, d))
                .collect::<Result<Vec<_>>>()?;
            let template = unit_embedding(encoder, &template_prompt(name))?;
            Ok((embs, template))
        })();
        match encoded {
            Ok((embs, template)) => {
                class.embeddings = Some(embs);
                class.template_embedding = Some(template);
            }
            Err(e) => failures.push(ClassFailure {
                class: name.clone(),
                message: e.to_string(),
            }),
        }
    }
    out.embedding_dim = Some(encoder.dimension());
    (out, failures)
}
