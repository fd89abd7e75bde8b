//! Extraction of the structured record an agent must emit.
//!
//! Model output is free text that should contain one JSON-like object. The
//! scanner tries every `{` in order, accepts strict JSON plus bare identifier
//! keys, and returns the first object that carries the mandatory field names.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::agent::spec::{FieldType, SchemaField, READY_TO_END_CHAT, RESPONSE, SHOULD_RESPOND};

const MAX_DEPTH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldValue {
    Bool(bool),
    Int(i64),
    Real(f64),
    Text(String),
}

impl FieldValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            FieldValue::Int(n) => Some(*n as f64),
            FieldValue::Real(x) => Some(*x),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StructuredOutput {
    pub should_respond: bool,
    pub response: String,
    pub ready_to_end_chat: bool,
    /// Custom schema fields that were present.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, FieldValue>,
}

impl StructuredOutput {
    pub fn field(&self, name: &str) -> Option<FieldValue> {
        match name {
            SHOULD_RESPOND => Some(FieldValue::Bool(self.should_respond)),
            RESPONSE => Some(FieldValue::Text(self.response.clone())),
            READY_TO_END_CHAT => Some(FieldValue::Bool(self.ready_to_end_chat)),
            other => self.extra.get(other).cloned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[serde(rename_all = "camelCase")]
pub struct ParseError {
    /// Byte offset of the offending object (or end of input when none).
    pub offset: usize,
    pub reason: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "at byte {}: {}", self.offset, self.reason)
    }
}

/// Parsed JSON-like value.
#[derive(Debug, Clone, PartialEq)]
enum Json {
    Null,
    Bool(bool),
    Int(i64),
    Real(f64),
    Str(String),
    Array,
    Object(Vec<(String, Json)>),
}

impl Json {
    fn type_name(&self) -> &'static str {
        match self {
            Json::Null => "null",
            Json::Bool(_) => "bool",
            Json::Int(_) => "int",
            Json::Real(_) => "real",
            Json::Str(_) => "text",
            Json::Array => "array",
            Json::Object(_) => "object",
        }
    }
}

struct Scanner<'a> {
    s: &'a [u8],
    pos: usize,
}

impl<'a> Scanner<'a> {
    fn ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.s.get(self.pos).copied()
    }

    fn eat(&mut self, b: u8) -> bool {
        if self.peek() == Some(b) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn literal(&mut self, word: &[u8]) -> bool {
        if self.s[self.pos..].starts_with(word) {
            let after = self.s.get(self.pos + word.len()).copied();
            if after.is_some_and(|c| c.is_ascii_alphanumeric() || c == b'_') {
                return false;
            }
            self.pos += word.len();
            true
        } else {
            false
        }
    }

    fn value(&mut self, depth: usize) -> Option<Json> {
        if depth > MAX_DEPTH {
            return None;
        }
        self.ws();
        match self.peek()? {
            b'{' => self.object(depth),
            b'[' => self.array(depth),
            b'"' => self.string().map(Json::Str),
            b't' if self.literal(b"true") => Some(Json::Bool(true)),
            b'f' if self.literal(b"false") => Some(Json::Bool(false)),
            b'n' if self.literal(b"null") => Some(Json::Null),
            b'-' | b'0'..=b'9' => self.number(),
            _ => None,
        }
    }

    fn object(&mut self, depth: usize) -> Option<Json> {
        self.pos += 1;
        let mut fields = Vec::new();
        self.ws();
        if self.eat(b'}') {
            return Some(Json::Object(fields));
        }
        loop {
            self.ws();
            let key = match self.peek()? {
                b'"' => self.string()?,
                c if c.is_ascii_alphabetic() || c == b'_' => self.identifier(),
                _ => return None,
            };
            self.ws();
            if !self.eat(b':') {
                return None;
            }
            let v = self.value(depth + 1)?;
            fields.push((key, v));
            self.ws();
            if self.eat(b',') {
                continue;
            }
            if self.eat(b'}') {
                return Some(Json::Object(fields));
            }
            return None;
        }
    }

    fn array(&mut self, depth: usize) -> Option<Json> {
        self.pos += 1;
        self.ws();
        if self.eat(b']') {
            return Some(Json::Array);
        }
        loop {
            self.value(depth + 1)?;
            self.ws();
            if self.eat(b',') {
                continue;
            }
            if self.eat(b']') {
                return Some(Json::Array);
            }
            return None;
        }
    }

    fn identifier(&mut self) -> String {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_alphanumeric() || c == b'_') {
            self.pos += 1;
        }
        String::from_utf8_lossy(&self.s[start..self.pos]).into_owned()
    }

    fn string(&mut self) -> Option<String> {
        // Delegate escape handling to serde_json on the exact literal span.
        let start = self.pos;
        self.pos += 1;
        loop {
            match self.peek()? {
                b'"' => {
                    self.pos += 1;
                    break;
                }
                b'\\' => self.pos += 2,
                c if c < 0x20 => return None,
                _ => self.pos += 1,
            }
        }
        let lit = std::str::from_utf8(self.s.get(start..self.pos)?).ok()?;
        serde_json::from_str::<String>(lit).ok()
    }

    fn number(&mut self) -> Option<Json> {
        let start = self.pos;
        self.eat(b'-');
        let digits_start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == digits_start {
            return None;
        }
        let mut integral = true;
        if self.eat(b'.') {
            integral = false;
            let f = self.pos;
            while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                self.pos += 1;
            }
            if self.pos == f {
                return None;
            }
        }
        if matches!(self.peek(), Some(b'e' | b'E')) {
            integral = false;
            self.pos += 1;
            if matches!(self.peek(), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            let e = self.pos;
            while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                self.pos += 1;
            }
            if self.pos == e {
                return None;
            }
        }
        let text = std::str::from_utf8(&self.s[start..self.pos]).ok()?;
        if integral {
            if let Ok(n) = text.parse::<i64>() {
                return Some(Json::Int(n));
            }
        }
        text.parse::<f64>().ok().filter(|x| x.is_finite()).map(Json::Real)
    }
}

/// Well-formed objects in `raw`, in order of their opening brace. Nested
/// objects are visited after their parent.
fn objects(raw: &str) -> impl Iterator<Item = (usize, Vec<(String, Json)>)> + '_ {
    let bytes = raw.as_bytes();
    let mut pos = 0;
    std::iter::from_fn(move || {
        while pos < bytes.len() {
            let start = pos;
            pos += 1;
            if bytes[start] != b'{' {
                continue;
            }
            let mut sc = Scanner { s: bytes, pos: start };
            if let Some(Json::Object(fields)) = sc.object(0) {
                return Some((start, fields));
            }
        }
        None
    })
}

fn has_mandatory(fields: &[(String, Json)]) -> bool {
    [SHOULD_RESPOND, RESPONSE, READY_TO_END_CHAT]
        .iter()
        .all(|m| fields.iter().any(|(k, _)| k == m))
}

fn convert(value: &Json, ty: FieldType) -> Option<FieldValue> {
    match (ty, value) {
        (FieldType::Bool, Json::Bool(b)) => Some(FieldValue::Bool(*b)),
        (FieldType::Int, Json::Int(n)) => Some(FieldValue::Int(*n)),
        (FieldType::Real, Json::Int(n)) => Some(FieldValue::Real(*n as f64)),
        (FieldType::Real, Json::Real(x)) => Some(FieldValue::Real(*x)),
        (FieldType::Text, Json::Str(s)) => Some(FieldValue::Text(s.clone())),
        _ => None,
    }
}

pub fn parse_structured_output(raw: &str, schema: &[SchemaField]) -> Result<StructuredOutput, ParseError> {
    let mut first_incomplete: Option<(usize, Vec<(String, Json)>)> = None;
    for (offset, fields) in objects(raw) {
        if has_mandatory(&fields) {
            return typed(offset, &fields, schema);
        }
        if first_incomplete.is_none() {
            first_incomplete = Some((offset, fields));
        }
    }
    match first_incomplete {
        Some((offset, fields)) => {
            let missing = [SHOULD_RESPOND, RESPONSE, READY_TO_END_CHAT]
                .into_iter()
                .find(|m| !fields.iter().any(|(k, _)| k == m))
                .unwrap_or(SHOULD_RESPOND);
            Err(ParseError {
                offset,
                reason: format!("missing mandatory field '{missing}'"),
            })
        }
        None => Err(ParseError {
            offset: raw.len(),
            reason: "no structured object found".to_string(),
        }),
    }
}

fn typed(offset: usize, fields: &[(String, Json)], schema: &[SchemaField]) -> Result<StructuredOutput, ParseError> {
    let lookup = |name: &str| fields.iter().rev().find(|(k, _)| k == name).map(|(_, v)| v);
    let mandatory_type = |name: &str| match name {
        SHOULD_RESPOND | READY_TO_END_CHAT => Some(FieldType::Bool),
        RESPONSE => Some(FieldType::Text),
        _ => None,
    };
    let mismatch = |name: &str, ty: FieldType, got: &Json| ParseError {
        offset,
        reason: format!("field '{name}' must be {}, got {}", ty.name(), got.type_name()),
    };

    let get_mandatory = |name: &str| -> Result<FieldValue, ParseError> {
        let ty = mandatory_type(name).expect("mandatory");
        let v = lookup(name).expect("presence checked");
        convert(v, ty).ok_or_else(|| mismatch(name, ty, v))
    };
    let FieldValue::Bool(should_respond) = get_mandatory(SHOULD_RESPOND)? else { unreachable!() };
    let FieldValue::Text(response) = get_mandatory(RESPONSE)? else { unreachable!() };
    let FieldValue::Bool(ready_to_end_chat) = get_mandatory(READY_TO_END_CHAT)? else { unreachable!() };

    let mut extra = BTreeMap::new();
    for f in schema {
        if mandatory_type(&f.field_name).is_some() {
            continue;
        }
        match lookup(&f.field_name) {
            None | Some(Json::Null) => {}
            Some(v) => {
                let fv = convert(v, f.field_type).ok_or_else(|| mismatch(&f.field_name, f.field_type, v))?;
                extra.insert(f.field_name.clone(), fv);
            }
        }
    }
    Ok(StructuredOutput {
        should_respond,
        response,
        ready_to_end_chat,
        extra,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::spec::mandatory_fields;

    fn schema() -> Vec<SchemaField> {
        let mut s = mandatory_fields().to_vec();
        s.push(SchemaField::new("severityScore", FieldType::Int, ""));
        s
    }

    #[test]
    fn exact_object() {
        let out = parse_structured_output(
            r#"{"shouldRespond": true, "response": "hello", "readyToEndChat": false}"#,
            &schema(),
        )
        .unwrap();
        assert!(out.should_respond);
        assert_eq!(out.response, "hello");
        assert!(out.extra.is_empty());
    }

    #[test]
    fn bare_keys_and_surrounding_prose() {
        let raw = "Sure! Here you go:\n```json\n{shouldRespond: true, response: \"hi {there}\", readyToEndChat: false, severityScore: 4}\n```\nThanks.";
        let out = parse_structured_output(raw, &schema()).unwrap();
        assert_eq!(out.response, "hi {there}");
        assert_eq!(out.extra["severityScore"], FieldValue::Int(4));
    }

    #[test]
    fn wrong_type_is_reported() {
        let raw = r#"x {"shouldRespond": "yes", "response": "", "readyToEndChat": false}"#;
        let err = parse_structured_output(raw, &schema()).unwrap_err();
        assert_eq!(err.offset, 2);
        assert!(err.reason.contains("shouldRespond"), "{err}");
        assert!(err.reason.contains("bool"), "{err}");
    }

    #[test]
    fn missing_mandatory_field() {
        let err = parse_structured_output(r#"{"shouldRespond": true, "response": "x"}"#, &schema()).unwrap_err();
        assert!(err.reason.contains("readyToEndChat"));
        let err = parse_structured_output("no braces at all", &schema()).unwrap_err();
        assert_eq!(err.offset, 16);
    }

    #[test]
    fn skips_earlier_unrelated_objects() {
        let raw = r#"{"note": 1} then {"shouldRespond": false, "response": "", "readyToEndChat": true}"#;
        let out = parse_structured_output(raw, &schema()).unwrap();
        assert!(out.ready_to_end_chat);
    }

    #[test]
    fn optional_custom_field_type_checked() {
        let raw = r#"{"shouldRespond": true, "response": "r", "readyToEndChat": false, "severityScore": 2.5}"#;
        assert!(parse_structured_output(raw, &schema()).is_err());
    }

    #[test]
    fn deep_nesting_does_not_overflow() {
        let raw = "{a:".repeat(10_000);
        assert!(parse_structured_output(&raw, &schema()).is_err());
    }
}
