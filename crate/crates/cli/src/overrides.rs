//! Dotted `section.field=value` overrides applied to a TOML config document.

use anyhow::{anyhow, bail, Context, Result};
use toml::{Table, Value};

/// Parses `value` as a TOML literal, falling back to a bare string.
fn literal(value: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()))
}

pub fn apply(doc: &mut Table, assignment: &str) -> Result<()> {
    let (path, value) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override {assignment:?} is not key=value"))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("override {assignment:?} has an empty key");
    }
    let (last, parents) = keys.split_last().expect("split yields one key");
    let mut table = doc;
    for k in parents {
        table = table
            .entry(k.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .with_context(|| format!("{k} in {path} is not a section"))?;
    }
    table.insert(last.to_string(), literal(value.trim()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn typed_values_and_nested_sections() {
        let mut doc: Table = toml::from_str("[propagation]\ntimestep = 41\n").unwrap();
        for a in [
            "propagation.timestep=81",
            "propagation.noise=random",
            "backend.diffusion.layers=[\"a\", \"b\"]",
            "run.seed = 7",
            "optimizer.learning_rate=1e-3",
        ] {
            apply(&mut doc, a).unwrap();
        }
        assert_eq!(doc["propagation"]["timestep"].as_integer(), Some(81));
        assert_eq!(doc["propagation"]["noise"].as_str(), Some("random"));
        assert_eq!(doc["backend"]["diffusion"]["layers"].as_array().unwrap().len(), 2);
        assert_eq!(doc["run"]["seed"].as_integer(), Some(7));
        assert_eq!(doc["optimizer"]["learning_rate"].as_float(), Some(1e-3));
    }

    #[test]
    fn malformed_assignments_are_rejected() {
        let mut doc: Table = toml::from_str("x = 1").unwrap();
        assert!(apply(&mut doc, "noequals").is_err());
        assert!(apply(&mut doc, "a..b=1").is_err());
        assert!(apply(&mut doc, "x.y=1").is_err());
    }
}
