//! Identifiers derived from ledger entry hashes.
//!
//! BoLs, contracts, and data requests are all born as ledger events, so each
//! gets the entry hash of its creating entry as its identity. The hash is
//! globally unique (two entries never share a hash: sequence numbers differ)
//! and self-certifying: holding an id proves which entry created the object.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::{ContentRef, ParseRefError};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid {what} `{value}`: need 1-128 characters from [A-Za-z0-9._-]")]
pub struct TokenError {
    pub(crate) what: &'static str,
    pub(crate) value: String,
}

/// Identifier grammar shared by node and participant ids.
pub(crate) fn check_token(what: &'static str, value: &str) -> Result<(), TokenError> {
    let ok = !value.is_empty()
        && value.len() <= 128
        && value
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'));
    if ok {
        Ok(())
    } else {
        Err(TokenError { what, value: value.to_string() })
    }
}

macro_rules! entry_hash_id {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(ContentRef);

        impl $name {
            pub fn from_entry_hash(hash: ContentRef) -> Self {
                Self(hash)
            }

            pub fn content_ref(&self) -> ContentRef {
                self.0
            }

            /// First 8 hex characters, for labels and logs.
            pub fn short(&self) -> String {
                self.0.short()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!(stringify!($name), "({})"), self.short())
            }
        }

        impl FromStr for $name {
            type Err = ParseRefError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                s.parse::<ContentRef>().map(Self)
            }
        }
    };
}

entry_hash_id! {
    /// Identity of one BoL: the entry hash of its opening event.
    BolId
}

entry_hash_id! {
    /// Identity of a deployed data contract: the entry hash of its
    /// deployment event.
    ContractAddress
}

entry_hash_id! {
    /// Identity of a data request: the entry hash of its request event.
    RequestId
}
