//! Canonical text form: JSON with lexicographically sorted object keys,
//! two-space indentation and a trailing newline. Event log lines use the
//! compact variant.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::model::config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum ParseError {
    #[error("invalid config document: {0}")]
    Syntax(#[from] serde_json::Error),
}

pub fn canonicalize(config: &ExperimentConfig) -> Vec<u8> {
    to_canonical_pretty(config)
}

pub fn parse_config(bytes: &[u8]) -> Result<ExperimentConfig, ParseError> {
    Ok(serde_json::from_slice(bytes)?)
}

pub fn to_canonical_pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let v = serde_json::to_value(value).expect("domain types serialize to JSON");
    let mut out = String::new();
    write_value(&v, Some(0), &mut out);
    out.push('\n');
    out.into_bytes()
}

/// Single-line canonical form (no trailing newline).
pub fn to_canonical_line<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("domain types serialize to JSON");
    let mut out = String::new();
    write_value(&v, None, &mut out);
    out
}

pub fn from_canonical<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, serde_json::Error> {
    serde_json::from_slice(bytes)
}

fn newline(indent: Option<usize>, out: &mut String) {
    if let Some(n) = indent {
        out.push('\n');
        for _ in 0..n {
            out.push_str("  ");
        }
    }
}

fn write_value(v: &Value, indent: Option<usize>, out: &mut String) {
    let inner = indent.map(|n| n + 1);
    match v {
        Value::Null | Value::Bool(_) | Value::Number(_) | Value::String(_) => {
            out.push_str(&serde_json::to_string(v).expect("scalar serializes"));
        }
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                newline(inner, out);
                write_value(item, inner, out);
            }
            newline(indent, out);
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                newline(inner, out);
                out.push_str(&serde_json::to_string(k).expect("key serializes"));
                out.push(':');
                if indent.is_some() {
                    out.push(' ');
                }
                write_value(&map[*k], inner, out);
            }
            newline(indent, out);
            out.push('}');
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn keys_are_sorted_at_every_level() {
        let v = json!({"b": 1, "a": {"d": [1, {"z": 0, "y": 1}], "c": null}});
        assert_eq!(
            to_canonical_line(&v),
            r#"{"a":{"c":null,"d":[1,{"y":1,"z":0}]},"b":1}"#
        );
    }

    #[test]
    fn pretty_form_is_stable() {
        let v = json!({"x": [], "w": {}, "v": [true]});
        let s = String::from_utf8(to_canonical_pretty(&v)).unwrap();
        assert_eq!(s, "{\n  \"v\": [\n    true\n  ],\n  \"w\": {},\n  \"x\": []\n}\n");
    }
}
