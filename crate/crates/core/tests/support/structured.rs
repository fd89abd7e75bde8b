//! Provider-response fuzzing: a generator of messy model output and a
//! reference classifier built on serde_json.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde_json::{json, Map, Value};

pub const CUSTOM_FIELD: &str = "severityScore";

/// What the reference expects: the parsed fields, or an error.
#[derive(Debug, Clone, PartialEq)]
pub enum Expected {
    Parsed {
        should_respond: bool,
        response: String,
        ready_to_end_chat: bool,
        severity: Option<i64>,
    },
    Error,
}

/// Reference classifier. Tries a strict JSON object at every `{`, takes the
/// first one carrying all three mandatory keys and type-checks it.
pub fn oracle(raw: &str) -> Expected {
    for (i, _) in raw.match_indices('{') {
        let mut de = serde_json::Deserializer::from_str(&raw[i..]);
        let Ok(Value::Object(map)) = serde::Deserialize::deserialize(&mut de) else {
            continue;
        };
        if !["shouldRespond", "response", "readyToEndChat"].iter().all(|k| map.contains_key(*k)) {
            continue;
        }
        return classify(&map);
    }
    Expected::Error
}

fn classify(map: &Map<String, Value>) -> Expected {
    let (Some(s), Some(r), Some(e)) = (
        map["shouldRespond"].as_bool(),
        map["response"].as_str(),
        map["readyToEndChat"].as_bool(),
    ) else {
        return Expected::Error;
    };
    let severity = match map.get(CUSTOM_FIELD) {
        None | Some(Value::Null) => None,
        Some(v) => match v.as_i64() {
            Some(n) => Some(n),
            None => return Expected::Error,
        },
    };
    Expected::Parsed {
        should_respond: s,
        response: r.to_string(),
        ready_to_end_chat: e,
        severity,
    }
}

const WORDS: &[&str] = &[
    "sure", "here", "is", "my", "answer", "the", "group", "should", "keep", "mirror", "water", "{", "}", "{}",
    "```json", "```", "\"", ":", ",", "note:", "ok!", "é", "水", "🙂", "\\", "{x}", "{\"a\":", "null", "true",
];

fn prose(rng: &mut ChaCha20Rng) -> String {
    let n = rng.random_range(0..12);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn text(rng: &mut ChaCha20Rng) -> String {
    let n = rng.random_range(0..8);
    let pool = ["hello", "we", "agree", "{braces}", "quote\"d", "tab\tbed", "new\nline", "ünï", "back\\slash", "}"];
    (0..n).map(|_| *pool.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn wrong_value(rng: &mut ChaCha20Rng) -> Value {
    match rng.random_range(0..6) {
        0 => json!("yes"),
        1 => json!(1),
        2 => json!(2.5),
        3 => Value::Null,
        4 => json!([true]),
        _ => json!({"value": true}),
    }
}

fn render(fields: &[(String, Value)], rng: &mut ChaCha20Rng) -> String {
    let sep = [",", ", ", ",\n  "].choose(rng).unwrap().to_string();
    let colon = [":", ": ", " : "].choose(rng).unwrap().to_string();
    let body: Vec<String> = fields
        .iter()
        .map(|(k, v)| format!("{}{colon}{}", Value::String(k.clone()), v))
        .collect();
    let pad = if rng.random_bool(0.5) { " " } else { "" };
    format!("{{{pad}{}{pad}}}", body.join(&sep))
}

/// One generated provider response.
pub fn case(rng: &mut ChaCha20Rng) -> String {
    let mut fields: Vec<(String, Value)> = vec![
        ("shouldRespond".into(), json!(rng.random_bool(0.5))),
        ("response".into(), json!(text(rng))),
        ("readyToEndChat".into(), json!(rng.random_bool(0.5))),
    ];
    if rng.random_bool(0.4) {
        let v = match rng.random_range(0..5) {
            0 => json!(1.5),
            1 => json!("3"),
            2 => Value::Null,
            _ => json!(rng.random_range(-5i64..10)),
        };
        fields.push((CUSTOM_FIELD.into(), v));
    }
    if rng.random_bool(0.3) {
        fields.push(("rationale".into(), json!({"steps": [1, 2, {"k": "v"}]})));
    }
    fields.shuffle(rng);

    // Mutations.
    match rng.random_range(0..10) {
        0 => {
            let i = rng.random_range(0..fields.len());
            fields.remove(i);
        }
        1 => {
            let i = rng.random_range(0..3.min(fields.len()));
            fields[i].1 = wrong_value(rng);
        }
        2 => {
            // Duplicate key; the later value counts.
            let i = rng.random_range(0..fields.len());
            let dup = (fields[i].0.clone(), if rng.random_bool(0.5) { fields[i].1.clone() } else { wrong_value(rng) });
            fields.push(dup);
        }
        _ => {}
    }
    let mut obj = render(&fields, rng);

    match rng.random_range(0..12) {
        0 => {
            let cut = rng.random_range(0..obj.len());
            let cut = (0..=cut).rev().find(|&c| obj.is_char_boundary(c)).unwrap_or(0);
            obj.truncate(cut);
        }
        1 => obj = format!("{{\"data\": {obj}}}"),
        2 => obj = format!("[{obj}]"),
        3 => obj = format!("{{\"shouldRespond\": true, \"response\": \"first\"}} {obj}"),
        4 => obj = format!("{obj} {{\"shouldRespond\": false, \"response\": \"second\", \"readyToEndChat\": true}}"),
        5 => obj = obj.replacen("true", "tru", 1),
        6 => obj = obj.replacen(':', "", 1),
        _ => {}
    }

    let fence = rng.random_bool(0.3);
    let mut out = prose(rng);
    out.push('\n');
    if fence {
        out.push_str("```json\n");
    }
    out.push_str(&obj);
    if fence {
        out.push_str("\n```");
    }
    out.push('\n');
    out.push_str(&prose(rng));
    out
}

/// Outcome counts, to show every class was exercised.
pub fn tally(outcomes: &[Expected]) -> BTreeMap<&'static str, usize> {
    let mut m = BTreeMap::new();
    for o in outcomes {
        *m.entry(match o {
            Expected::Parsed { .. } => "parsed",
            Expected::Error => "parseError",
        })
        .or_insert(0) += 1;
    }
    m
}
