//! Experimenter allowlist and session identities.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ids::{ExperimentId, ExperimenterId, PublicId};

/// Hex SHA-256 of a bearer token.
pub fn token_hash(token: &str) -> String {
    hex::encode(Sha256::digest(token.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AllowlistEntry {
    pub email: ExperimenterId,
    pub token_sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllowlistFile {
    pub experimenters: Vec<AllowlistEntry>,
}

#[derive(Debug, thiserror::Error)]
pub enum AllowlistError {
    #[error("reading allowlist {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing allowlist {path}: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error("allowlist {path} has no entries")]
    Empty { path: String },
}

/// Email → token hash. Experimenters authenticate with a bearer token whose
/// hash is listed here.
#[derive(Debug, Clone, Default)]
pub struct Allowlist {
    by_hash: BTreeMap<String, ExperimenterId>,
}

impl Allowlist {
    pub fn new(entries: impl IntoIterator<Item = AllowlistEntry>) -> Self {
        Allowlist {
            by_hash: entries
                .into_iter()
                .map(|e| (e.token_sha256.to_ascii_lowercase(), e.email))
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, AllowlistError> {
        let shown = path.display().to_string();
        let bytes = std::fs::read(path).map_err(|source| AllowlistError::Io {
            path: shown.clone(),
            source,
        })?;
        let file: AllowlistFile = serde_json::from_slice(&bytes).map_err(|source| AllowlistError::Parse {
            path: shown.clone(),
            source,
        })?;
        if file.experimenters.is_empty() {
            return Err(AllowlistError::Empty { path: shown });
        }
        Ok(Self::new(file.experimenters))
    }

    /// Adds an experimenter with a plain token (tests and simulation).
    pub fn with_token(mut self, email: &str, token: &str) -> Self {
        self.by_hash.insert(token_hash(token), ExperimenterId::from(email));
        self
    }

    pub fn authenticate(&self, token: &str) -> Option<&ExperimenterId> {
        self.by_hash.get(&token_hash(token))
    }

    pub fn len(&self) -> usize {
        self.by_hash.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_hash.is_empty()
    }
}

/// Who is on the other end of a connection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase", rename_all_fields = "camelCase")]
pub enum Session {
    Experimenter {
        id: ExperimenterId,
    },
    Participant {
        experiment_id: ExperimentId,
        public_id: PublicId,
    },
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_authenticate_by_hash() {
        let list = Allowlist::new([AllowlistEntry {
            email: "a@lab".into(),
            token_sha256: token_hash("secret"),
        }]);
        assert_eq!(list.authenticate("secret").map(|e| e.as_str()), Some("a@lab"));
        assert!(list.authenticate("Secret").is_none());
    }
}
