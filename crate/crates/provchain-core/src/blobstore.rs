//! Content-addressed blob storage.
//!
//! Payloads too large for ledger entries live here, filed under the hash of
//! their content. The layout fans out across two directory levels taken from
//! the first 4 hex characters of the digest, so directories stay small and
//! the same content set always produces the same tree. Blobs are never
//! deleted: the store is part of the audit record.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::hash::ContentRef;

/// Default cap on a single blob, 256 MiB.
pub const MAX_BLOB_BYTES: u64 = 256 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum BlobError {
    #[error("blob of {actual} bytes exceeds the {limit} byte limit")]
    OversizeBlob { actual: u64, limit: u64 },
    #[error("blob {0} not found")]
    NotFound(ContentRef),
    #[error("blob {0} is corrupt: stored bytes no longer match the digest")]
    CorruptBlob(ContentRef),
    #[error("blob store io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug)]
pub struct BlobStore {
    root: PathBuf,
    max_bytes: u64,
}

impl BlobStore {
    /// Open (creating if needed) a store rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<BlobStore, BlobError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(BlobStore { root, max_bytes: MAX_BLOB_BYTES })
    }

    pub fn with_max_bytes(mut self, max_bytes: u64) -> BlobStore {
        self.max_bytes = max_bytes;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn blob_path(&self, content_ref: &ContentRef) -> PathBuf {
        let hex = content_ref.to_hex();
        self.root.join(&hex[0..2]).join(&hex[2..4]).join(&hex)
    }

    /// Store `content` under its digest. Idempotent: identical content maps
    /// to one stored copy.
    pub fn put(&self, content: &[u8]) -> Result<ContentRef, BlobError> {
        if content.len() as u64 > self.max_bytes {
            return Err(BlobError::OversizeBlob {
                actual: content.len() as u64,
                limit: self.max_bytes,
            });
        }
        let content_ref = ContentRef::of(content);
        let path = self.blob_path(&content_ref);
        if path.exists() {
            return Ok(content_ref);
        }
        let dir = path.parent().expect("blob path has a parent");
        fs::create_dir_all(dir)?;
        // Write-to-temp-then-rename keeps a concurrent reader from ever
        // seeing a half-written blob; racing puts of the same content both
        // rename to the same final path, which is harmless.
        let tmp = dir.join(format!(".tmp-{}-{}", std::process::id(), content_ref.short()));
        fs::write(&tmp, content)?;
        fs::rename(&tmp, &path)?;
        Ok(content_ref)
    }

    /// Fetch stored bytes, re-hashing to detect on-disk corruption.
    pub fn get(&self, content_ref: &ContentRef) -> Result<Vec<u8>, BlobError> {
        let path = self.blob_path(content_ref);
        let content = match fs::read(&path) {
            Ok(content) => content,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(BlobError::NotFound(*content_ref))
            }
            Err(e) => return Err(e.into()),
        };
        if ContentRef::of(&content) != *content_ref {
            return Err(BlobError::CorruptBlob(*content_ref));
        }
        Ok(content)
    }

    pub fn contains(&self, content_ref: &ContentRef) -> bool {
        self.blob_path(content_ref).exists()
    }
}
