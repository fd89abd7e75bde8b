//! Identifier newtypes and deterministic id/seed generation.

use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

macro_rules! string_id {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                $name(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_string())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                $name(s)
            }
        }
    };
}

string_id!(ExperimentId);
string_id!(StageId);
string_id!(CohortId);
string_id!(
    /// Identifier shown in shared views (chat, tallies, exports).
    PublicId
);
string_id!(AgentId);
string_id!(QuestionId);
string_id!(
    /// An experimenter identity, normally an email address.
    ExperimenterId
);

/// The join-URL secret. Only its digest is ever persisted.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct PrivateId(String);

impl PrivateId {
    pub fn new(s: impl Into<String>) -> Self {
        PrivateId(s.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }

    pub fn digest(&self) -> PrivateIdDigest {
        PrivateIdDigest(hex::encode(Sha256::digest(self.0.as_bytes())))
    }
}

impl fmt::Debug for PrivateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PrivateId(..)")
    }
}

/// SHA-256 of a private id, hex encoded.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PrivateIdDigest(pub String);

/// Stable seed derivation: SHA-256 over the base seed and labelled parts.
pub fn derive_seed(base: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 output is 32 bytes"))
}

pub fn seeded_rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Generates participant and cohort identifiers. Seeded for simulations,
/// OS-seeded for live service.
#[derive(Debug, Clone)]
pub struct IdGen {
    rng: ChaCha20Rng,
}

const PUBLIC_ALPHABET: &[u8] = b"abcdefghjkmnpqrstuvwxyz23456789";

impl IdGen {
    pub fn seeded(seed: u64) -> Self {
        IdGen {
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn from_entropy() -> Self {
        IdGen {
            rng: ChaCha20Rng::from_os_rng(),
        }
    }

    /// 128 random bits rendered as 32 lowercase hex characters.
    pub fn private_id(&mut self) -> PrivateId {
        let mut bytes = [0u8; 16];
        self.rng.fill_bytes(&mut bytes);
        PrivateId(hex::encode(bytes))
    }

    /// Short id such as `p-k3x9m2`. Callers check uniqueness.
    pub fn public_id(&mut self) -> PublicId {
        PublicId(format!("p-{}", self.token(6)))
    }

    pub fn token(&mut self, len: usize) -> String {
        (0..len)
            .map(|_| PUBLIC_ALPHABET[self.rng.random_range(0..PUBLIC_ALPHABET.len())] as char)
            .collect()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn private_and_public_ids_differ_in_shape() {
        let mut g = IdGen::seeded(7);
        let p = g.private_id();
        let q = g.public_id();
        assert_eq!(p.expose().len(), 32);
        assert!(q.as_str().starts_with("p-"));
        assert_ne!(p.expose(), q.as_str());
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let a: Vec<_> = {
            let mut g = IdGen::seeded(1);
            (0..5).map(|_| g.public_id()).collect()
        };
        let b: Vec<_> = {
            let mut g = IdGen::seeded(1);
            (0..5).map(|_| g.public_id()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn derive_seed_separates_parts() {
        assert_ne!(derive_seed(1, &["ab", "c"]), derive_seed(1, &["a", "bc"]));
        assert_eq!(derive_seed(9, &["x"]), derive_seed(9, &["x"]));
    }

    #[test]
    fn debug_never_prints_private_id() {
        let p = PrivateId::new("secret-token");
        assert!(!format!("{p:?}").contains("secret"));
    }
}
