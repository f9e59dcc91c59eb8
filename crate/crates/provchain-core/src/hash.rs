//! Content addressing. Every hash in the system is produced here.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Digest algorithm used for every content address and ledger hash.
pub const HASH_ALGORITHM: &str = "sha-256";

/// A 256-bit content address: the SHA-256 digest of the bytes it names,
/// rendered as 64 lowercase hex characters.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContentRef([u8; 32]);

impl ContentRef {
    /// The all-zero digest, used as the `prev_hash` of a chain's first entry.
    pub const ZERO: ContentRef = ContentRef([0u8; 32]);

    /// Hash `content` and return its address.
    pub fn of(content: &[u8]) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(content);
        ContentRef(hasher.finalize().into())
    }

    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        ContentRef(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// First 8 hex characters, for display labels.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseRefError {
    #[error("content ref must be exactly 64 hex characters, got {0}")]
    BadLength(usize),
    #[error("content ref must be lowercase hex: {0}")]
    BadDigit(String),
}

impl FromStr for ContentRef {
    type Err = ParseRefError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 64 {
            return Err(ParseRefError::BadLength(s.len()));
        }
        if s.bytes().any(|b| !matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return Err(ParseRefError::BadDigit(s.to_string()));
        }
        let mut bytes = [0u8; 32];
        hex::decode_to_slice(s, &mut bytes).map_err(|_| ParseRefError::BadDigit(s.to_string()))?;
        Ok(ContentRef(bytes))
    }
}

impl fmt::Display for ContentRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for ContentRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentRef({})", self.short())
    }
}

impl Serialize for ContentRef {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ContentRef {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
