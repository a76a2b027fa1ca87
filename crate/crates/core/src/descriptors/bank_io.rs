use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Map, Value};

use super::{ClassDescriptors, DescriptorBank, Provenance};
use crate::error::{Error, Result};

fn schema(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.into(),
        message: message.into(),
    }
}

fn float_array(v: &Value, path: &str) -> Result<Vec<f64>> {
    let arr = v.as_array().ok_or_else(|| schema(path, "expected an array of numbers"))?;
    arr.iter()
        .enumerate()
        .map(|(i, x)| {
            x.as_f64()
                .ok_or_else(|| schema(format!("{path}[{i}]"), "expected a number"))
        })
        .collect()
}

fn optional<'a>(obj: &'a Map<String, Value>, key: &str) -> Option<&'a Value> {
    obj.get(key).filter(|v| !v.is_null())
}

/// Parses a bank document, reporting the JSON path of the first schema violation.
pub fn parse_bank(text: &str) -> Result<DescriptorBank> {
    let root: Value = serde_json::from_str(text)?;
    let root = root.as_object().ok_or_else(|| schema("$", "expected an object"))?;

    let embedding_dim = match optional(root, "embedding_dim") {
        None => None,
        Some(v) => Some(
            v.as_u64()
                .ok_or_else(|| schema("$.embedding_dim", "expected a non-negative integer or null"))?
                as usize,
        ),
    };
    let classes_v = root
        .get("classes")
        .ok_or_else(|| schema("$.classes", "missing key"))?
        .as_object()
        .ok_or_else(|| schema("$.classes", "expected an object"))?;

    let mut classes = BTreeMap::new();
    for (name, entry) in classes_v {
        let base = format!("$.classes[{}]", Value::String(name.clone()));
        let obj = entry
            .as_object()
            .ok_or_else(|| schema(&base, "expected an object"))?;
        let path = format!("{base}.descriptors");
        let descriptors = obj
            .get("descriptors")
            .ok_or_else(|| schema(&path, "missing key"))?
            .as_array()
            .ok_or_else(|| schema(&path, "expected an array of strings"))?
            .iter()
            .enumerate()
            .map(|(i, d)| {
                d.as_str()
                    .map(str::to_owned)
                    .ok_or_else(|| schema(format!("{path}[{i}]"), "expected a string"))
            })
            .collect::<Result<Vec<_>>>()?;
        let embeddings = match optional(obj, "embeddings") {
            None => None,
            Some(v) => {
                let path = format!("{base}.embeddings");
                let rows = v
                    .as_array()
                    .ok_or_else(|| schema(&path, "expected an array of arrays"))?;
                Some(
                    rows.iter()
                        .enumerate()
                        .map(|(i, r)| float_array(r, &format!("{path}[{i}]")))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
        };
        let template_embedding = match optional(obj, "template_embedding") {
            None => None,
            Some(v) => Some(float_array(v, &format!("{base}.template_embedding"))?),
        };
        classes.insert(
            name.clone(),
            ClassDescriptors {
                descriptors,
                embeddings,
                template_embedding,
            },
        );
    }
    Ok(DescriptorBank {
        classes,
        embedding_dim,
        provenance: Provenance::FileLoaded,
    })
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<DescriptorBank> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_bank(&text)
}

/// Serializes a bank. Floats are written in shortest round-trip form, so
/// loading the file reproduces every value bit for bit.
pub fn to_json_string(bank: &DescriptorBank) -> String {
    let classes: Map<String, Value> = bank
        .classes
        .iter()
        .map(|(name, c)| {
            (
                name.clone(),
                json!({
                    "descriptors": c.descriptors,
                    "embeddings": c.embeddings,
                    "template_embedding": c.template_embedding,
                }),
            )
        })
        .collect();
    let doc = json!({
        "embedding_dim": bank.embedding_dim,
        "classes": classes,
    });
    serde_json::to_string_pretty(&doc).expect("bank serializes")
}

pub fn save_bank(bank: &DescriptorBank, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_json_string(bank)).map_err(|e| Error::io(path, e))
}
