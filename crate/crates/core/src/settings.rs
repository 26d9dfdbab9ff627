// SPDX-License-Identifier: Apache-2.0

//! TOML settings shared by config files and run manifests.
//!
//! ```text
//! # comment
//! [train]
//! steps = 2000        # trailing comments are allowed
//! [mixer]
//! space = "W+"
//! ```
//!
//! Tables are flattened to dotted keys and every value to its text form
//! (arrays become `a, b, c`), which is also what `--set key=value` takes.

use toml::{Table, Value};

use crate::error::{Error, Result};

fn flatten(prefix: &str, table: &Table, out: &mut Vec<(String, String)>) -> Result<()> {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out)?,
            Value::Array(items) => {
                let parts = items.iter().map(|x| scalar(&key, x)).collect::<Result<Vec<_>>>()?;
                out.push((key, parts.join(", ")));
            }
            other => {
                let s = scalar(&key, other)?;
                out.push((key, s));
            }
        }
    }
    Ok(())
}

fn scalar(key: &str, v: &Value) -> Result<String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Integer(i) => Ok(i.to_string()),
        Value::Float(f) => Ok(format!("{f:?}")),
        Value::Boolean(b) => Ok(b.to_string()),
        _ => Err(Error::Config(format!("{key}: unsupported value {v}"))),
    }
}

/// Parses settings text into `(dotted key, value)` pairs in file order.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let table: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string().trim_end().to_string()))?;
    let mut out = Vec::new();
    flatten("", &table, &mut out)?;
    Ok(out)
}

/// Typed TOML literal for a text value: numbers, booleans and numeric
/// lists stay bare, anything else is quoted.
fn literal(raw: &str) -> Value {
    let number = |s: &str| -> Option<Value> {
        let s = s.trim();
        if let Ok(i) = s.parse::<i64>() {
            return Some(Value::Integer(i));
        }
        if s.parse::<u64>().is_ok() {
            // Past i64; a float would round it.
            return None;
        }
        s.parse::<f64>().ok().filter(|f| f.is_finite()).map(Value::Float)
    };
    if let Ok(b) = raw.parse::<bool>() {
        return Value::Boolean(b);
    }
    if let Some(v) = number(raw) {
        return v;
    }
    if raw.contains(',') {
        if let Some(items) = raw.split(',').map(number).collect::<Option<Vec<_>>>() {
            return Value::Array(items);
        }
    }
    Value::String(raw.to_string())
}

/// Renders dotted pairs as TOML, one table per key prefix in order of first
/// appearance. `header` lines are emitted as comments. Parsing the result
/// gives back the same pairs.
pub fn render(header: &[String], pairs: &[(String, String)]) -> String {
    let mut out = String::new();
    for h in header {
        out.push_str("# ");
        out.push_str(h);
        out.push('\n');
    }
    let mut sections: Vec<(&str, Vec<(&str, &str)>)> = Vec::new();
    for (k, v) in pairs {
        let (section, key) = k.split_once('.').unwrap_or(("", k.as_str()));
        match sections.iter_mut().find(|(s, _)| *s == section) {
            Some((_, entries)) => entries.push((key, v)),
            None => sections.push((section, vec![(key, v)])),
        }
    }
    // Bare keys must precede the first table header.
    sections.sort_by_key(|(s, _)| !s.is_empty());
    for (section, entries) in sections {
        if !section.is_empty() {
            out.push_str(&format!("\n[{section}]\n"));
        }
        for (k, v) in entries {
            out.push_str(&format!("{k} = {}\n", literal(v)));
        }
    }
    out
}

/// Parses a value with a config error naming the key.
pub fn value<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("invalid value {raw:?} for {key}")))
}

pub fn boolean(key: &str, raw: &str) -> Result<bool> {
    match raw.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {raw:?} for {key}"))),
    }
}
