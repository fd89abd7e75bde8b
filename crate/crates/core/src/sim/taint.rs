//! Leak scanning: search exported bytes and participant payloads for
//! secrets that must never appear there.

use crate::ids::PrivateId;
use crate::store::export::{read_archive, ExportError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taint {
    pub kind: &'static str,
    pub needle: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finding {
    pub location: String,
    pub kind: &'static str,
    /// First characters of the leaked value, enough to find it again.
    pub prefix: String,
}

impl Taint {
    pub fn new(kind: &'static str, needle: impl Into<String>) -> Self {
        Taint {
            kind,
            needle: needle.into(),
        }
    }
}

/// A private id and its stored digest.
pub fn private_id_taints(private_ids: &[String]) -> Vec<Taint> {
    private_ids
        .iter()
        .flat_map(|p| {
            [
                Taint::new("privateId", p.clone()),
                Taint::new("privateIdDigest", PrivateId::new(p.clone()).digest().0),
            ]
        })
        .collect()
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

pub fn scan<'a>(items: impl IntoIterator<Item = (String, &'a [u8])>, taints: &[Taint]) -> Vec<Finding> {
    let mut out = Vec::new();
    for (location, bytes) in items {
        for t in taints {
            if contains(bytes, t.needle.as_bytes()) {
                out.push(Finding {
                    location: location.clone(),
                    kind: t.kind,
                    prefix: t.needle.chars().take(6).collect(),
                });
            }
        }
    }
    out
}

/// Scans every entry of an export archive.
pub fn scan_archive(archive: &[u8], taints: &[Taint]) -> Result<Vec<Finding>, ExportError> {
    let entries = read_archive(archive)?;
    Ok(scan(entries.iter().map(|(n, b)| (n.clone(), b.as_slice())), taints))
}
