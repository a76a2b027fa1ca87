//! `--set dotted.key=value` overrides applied to a TOML config.

use herman::harness::RunConfig;
use toml::{Table, Value};

/// Parses `value` as a TOML literal, falling back to a bare string.
fn literal(value: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()))
}

fn set(table: &mut Table, key: &str, value: Value) -> Result<(), String> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    let mut walked = String::new();
    while let Some(part) = parts.next() {
        if !walked.is_empty() {
            walked.push('.');
        }
        walked.push_str(part);
        let slot = cur.get_mut(part).ok_or_else(|| format!("unknown config key `{walked}`"))?;
        if parts.peek().is_none() {
            if slot.is_table() {
                return Err(format!("`{walked}` is a section; set one of its keys instead"));
            }
            *slot = value;
            return Ok(());
        }
        cur = slot
            .as_table_mut()
            .ok_or_else(|| format!("`{walked}` is not a section"))?;
    }
    Err("empty override key".into())
}

/// Applies `key=value` pairs on top of `base`. Keys must already exist in the
/// resolved configuration; the result is re-validated.
pub fn apply(base: &RunConfig, pairs: &[String]) -> Result<RunConfig, String> {
    if pairs.is_empty() {
        return Ok(base.clone());
    }
    let mut table: Table = toml::from_str(&base.to_toml_string()).map_err(|e| e.to_string())?;
    for pair in pairs {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| format!("override `{pair}` is not of the form key=value"))?;
        set(&mut table, key.trim(), literal(value.trim()))?;
    }
    let text = toml::to_string(&table).map_err(|e| e.to_string())?;
    RunConfig::from_toml_str(&text).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_nested_keys() {
        let c = apply(
            &RunConfig::default(),
            &["scoring.k=7".into(), "method.variant=no_router".into(), "world.noise_std=0.1".into()],
        )
        .unwrap();
        assert_eq!(c.scoring.k, 7);
        assert_eq!(c.method.variant.name(), "no_router");
        assert_eq!(c.world.noise_std, 0.1);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let base = RunConfig::default();
        assert!(apply(&base, &["scoring.kk=1".into()]).unwrap_err().contains("scoring.kk"));
        assert!(apply(&base, &["scoring=1".into()]).is_err());
        assert!(apply(&base, &["scoring.k".into()]).is_err());
        assert!(apply(&base, &["scoring.k=\"five\"".into()]).is_err());
        assert!(apply(&base, &["projection.rho=2.0".into()]).is_err());
    }
}
