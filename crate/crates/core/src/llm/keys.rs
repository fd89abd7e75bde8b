//! Per-experimenter API key custody. Keys are encrypted at rest with a
//! server master key and only resolve for the experimenter who stored them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::ids::ExperimenterId;
use crate::llm::types::{ApiKey, AuthKeyRef, LlmError};

pub const MASTER_KEY_ENV: &str = "HUDDLE_MASTER_KEY";

#[derive(Clone)]
pub struct MasterKey([u8; 32]);

#[derive(Debug, thiserror::Error)]
pub enum KeyStoreError {
    #[error("master key must be 64 hex characters")]
    BadMasterKey,
    #[error("caller {caller} cannot register keys for {owner}")]
    PermissionDenied { caller: ExperimenterId, owner: ExperimenterId },
    #[error("key store io at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("key store file is corrupt: {0}")]
    Corrupt(String),
}

impl MasterKey {
    pub fn from_hex(s: &str) -> Result<Self, KeyStoreError> {
        let bytes = hex::decode(s.trim()).map_err(|_| KeyStoreError::BadMasterKey)?;
        let arr: [u8; 32] = bytes.try_into().map_err(|_| KeyStoreError::BadMasterKey)?;
        Ok(MasterKey(arr))
    }

    pub fn from_file(path: &Path) -> Result<Self, KeyStoreError> {
        let s = std::fs::read_to_string(path).map_err(|source| KeyStoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_hex(&s)
    }

    pub fn random() -> Self {
        let mut k = [0u8; 32];
        rand::rng().fill_bytes(&mut k);
        MasterKey(k)
    }

    fn cipher(&self) -> ChaCha20Poly1305 {
        ChaCha20Poly1305::new(Key::from_slice(&self.0))
    }
}

impl std::fmt::Debug for MasterKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("MasterKey(..)")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct Entry {
    owner: ExperimenterId,
    provider_id: String,
    nonce: String,
    ciphertext: String,
}

#[derive(Debug)]
pub struct KeyStore {
    master: MasterKey,
    entries: BTreeMap<AuthKeyRef, Entry>,
    path: Option<PathBuf>,
}

impl KeyStore {
    pub fn in_memory(master: MasterKey) -> Self {
        KeyStore {
            master,
            entries: BTreeMap::new(),
            path: None,
        }
    }

    /// Opens (or starts) a persisted store at `path`.
    pub fn open(master: MasterKey, path: PathBuf) -> Result<Self, KeyStoreError> {
        let entries = match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| KeyStoreError::Corrupt(e.to_string()))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(source) => return Err(KeyStoreError::Io { path, source }),
        };
        Ok(KeyStore {
            master,
            entries,
            path: Some(path),
        })
    }

    fn persist(&self) -> Result<(), KeyStoreError> {
        if let Some(path) = &self.path {
            let bytes = serde_json::to_vec_pretty(&self.entries).expect("entries serialize");
            std::fs::write(path, bytes).map_err(|source| KeyStoreError::Io {
                path: path.clone(),
                source,
            })?;
        }
        Ok(())
    }

    /// Stores `key_material` for `owner`. Only the owner may register their
    /// own keys. A later registration for the same provider replaces it.
    pub fn register_api_key(
        &mut self,
        caller: &ExperimenterId,
        owner: &ExperimenterId,
        provider_id: &str,
        key_material: &str,
    ) -> Result<AuthKeyRef, KeyStoreError> {
        if caller != owner {
            return Err(KeyStoreError::PermissionDenied {
                caller: caller.clone(),
                owner: owner.clone(),
            });
        }
        let mut nonce = [0u8; 12];
        rand::rng().fill_bytes(&mut nonce);
        let ciphertext = self
            .master
            .cipher()
            .encrypt(Nonce::from_slice(&nonce), key_material.as_bytes())
            .expect("chacha20poly1305 encryption does not fail for in-memory buffers");
        let mut id = [0u8; 8];
        rand::rng().fill_bytes(&mut id);
        let key_ref = AuthKeyRef(format!("keyref-{}", hex::encode(id)));

        self.entries.retain(|_, e| !(e.owner == *owner && e.provider_id == provider_id));
        self.entries.insert(
            key_ref.clone(),
            Entry {
                owner: owner.clone(),
                provider_id: provider_id.to_string(),
                nonce: hex::encode(nonce),
                ciphertext: hex::encode(ciphertext),
            },
        );
        self.persist()?;
        Ok(key_ref)
    }

    pub fn key_ref_for(&self, owner: &ExperimenterId, provider_id: &str) -> Option<AuthKeyRef> {
        self.entries
            .iter()
            .find(|(_, e)| &e.owner == owner && e.provider_id == provider_id)
            .map(|(r, _)| r.clone())
    }

    /// Decrypts the key behind `key_ref` when `experiment_creator` owns it.
    pub fn resolve(&self, key_ref: &AuthKeyRef, experiment_creator: &ExperimenterId) -> Result<ApiKey, LlmError> {
        let entry = self
            .entries
            .get(key_ref)
            .ok_or_else(|| LlmError::AuthFailure("unknown key reference".to_string()))?;
        if &entry.owner != experiment_creator {
            return Err(LlmError::AuthFailure("key belongs to a different experimenter".to_string()));
        }
        let nonce = hex::decode(&entry.nonce).map_err(|_| LlmError::AuthFailure("corrupt key entry".into()))?;
        let ct = hex::decode(&entry.ciphertext).map_err(|_| LlmError::AuthFailure("corrupt key entry".into()))?;
        let plain = self
            .master
            .cipher()
            .decrypt(Nonce::from_slice(&nonce), ct.as_ref())
            .map_err(|_| LlmError::AuthFailure("key could not be decrypted".to_string()))?;
        String::from_utf8(plain)
            .map(ApiKey::new)
            .map_err(|_| LlmError::AuthFailure("corrupt key entry".to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn who(s: &str) -> ExperimenterId {
        ExperimenterId::from(s)
    }

    #[test]
    fn register_and_resolve() {
        let mut ks = KeyStore::in_memory(MasterKey::random());
        let r = ks.register_api_key(&who("a@x"), &who("a@x"), "openai", "sk-secret-123").unwrap();
        assert_eq!(ks.resolve(&r, &who("a@x")).unwrap().expose(), "sk-secret-123");
        assert!(matches!(ks.resolve(&r, &who("b@x")), Err(LlmError::AuthFailure(_))));
        assert_eq!(ks.key_ref_for(&who("a@x"), "openai"), Some(r));
    }

    #[test]
    fn cannot_register_for_someone_else() {
        let mut ks = KeyStore::in_memory(MasterKey::random());
        assert!(matches!(
            ks.register_api_key(&who("a@x"), &who("b@x"), "openai", "k"),
            Err(KeyStoreError::PermissionDenied { .. })
        ));
    }

    #[test]
    fn persisted_file_holds_no_plaintext() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("keys.json");
        let master = MasterKey::random();
        let mut ks = KeyStore::open(master.clone(), path.clone()).unwrap();
        let r = ks.register_api_key(&who("a@x"), &who("a@x"), "p", "sk-plaintext-marker").unwrap();
        let raw = std::fs::read_to_string(&path).unwrap();
        assert!(!raw.contains("sk-plaintext-marker"));
        let reopened = KeyStore::open(master, path).unwrap();
        assert_eq!(reopened.resolve(&r, &who("a@x")).unwrap().expose(), "sk-plaintext-marker");
    }
}
