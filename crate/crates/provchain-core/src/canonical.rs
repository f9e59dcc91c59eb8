//! Deterministic byte encoding for everything that gets hashed or persisted.
//!
//! Entities are lowered to a small value tree and encoded with one-byte type
//! tags, fixed-width big-endian integers and lengths, and map keys in
//! lexicographic order. Structurally equal values encode to identical bytes;
//! distinct values encode to distinct bytes. The decoder is strict: it rejects
//! unsorted or duplicate map keys, non-minimal input, and trailing bytes, so
//! decoding followed by encoding reproduces the original byte sequence.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::hash::ContentRef;

const TAG_UNSIGNED: u8 = 0x01;
const TAG_BYTES: u8 = 0x02;
const TAG_TEXT: u8 = 0x03;
const TAG_LIST: u8 = 0x04;
const TAG_MAP: u8 = 0x05;

/// Canonical value tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Value {
    Unsigned(u64),
    Bytes(Vec<u8>),
    Text(String),
    List(Vec<Value>),
    Map(BTreeMap<String, Value>),
}

impl Value {
    pub fn map<I, K>(entries: I) -> Value
    where
        I: IntoIterator<Item = (K, Value)>,
        K: Into<String>,
    {
        Value::Map(entries.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }

    pub fn text(s: impl Into<String>) -> Value {
        Value::Text(s.into())
    }

    pub fn bytes(b: impl Into<Vec<u8>>) -> Value {
        Value::Bytes(b.into())
    }

    pub fn list(items: impl IntoIterator<Item = Value>) -> Value {
        Value::List(items.into_iter().collect())
    }
}

/// Lower an entity to its canonical value tree.
pub trait ToCanonical {
    fn to_canonical(&self) -> Value;
}

impl ToCanonical for Value {
    fn to_canonical(&self) -> Value {
        self.clone()
    }
}

impl ToCanonical for ContentRef {
    fn to_canonical(&self) -> Value {
        Value::Bytes(self.as_bytes().to_vec())
    }
}

/// Canonical byte encoding of `entity`.
pub fn canonical_encode<T: ToCanonical + ?Sized>(entity: &T) -> Vec<u8> {
    let mut out = Vec::new();
    encode_value(&entity.to_canonical(), &mut out);
    out
}

/// Content address of an entity's canonical encoding.
pub fn canonical_ref<T: ToCanonical + ?Sized>(entity: &T) -> ContentRef {
    ContentRef::of(&canonical_encode(entity))
}

fn encode_value(v: &Value, out: &mut Vec<u8>) {
    match v {
        Value::Unsigned(n) => {
            out.push(TAG_UNSIGNED);
            out.extend_from_slice(&n.to_be_bytes());
        }
        Value::Bytes(b) => {
            out.push(TAG_BYTES);
            out.extend_from_slice(&(b.len() as u64).to_be_bytes());
            out.extend_from_slice(b);
        }
        Value::Text(s) => {
            out.push(TAG_TEXT);
            out.extend_from_slice(&(s.len() as u64).to_be_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        Value::List(items) => {
            out.push(TAG_LIST);
            out.extend_from_slice(&(items.len() as u64).to_be_bytes());
            for item in items {
                encode_value(item, out);
            }
        }
        Value::Map(entries) => {
            // BTreeMap iterates keys in lexicographic order.
            out.push(TAG_MAP);
            out.extend_from_slice(&(entries.len() as u64).to_be_bytes());
            for (k, v) in entries {
                out.push(TAG_TEXT);
                out.extend_from_slice(&(k.len() as u64).to_be_bytes());
                out.extend_from_slice(k.as_bytes());
                encode_value(v, out);
            }
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("truncated input at offset {0}")]
    Truncated(usize),
    #[error("unknown type tag {tag:#04x} at offset {offset}")]
    UnknownTag { tag: u8, offset: usize },
    #[error("invalid utf-8 in text at offset {0}")]
    BadUtf8(usize),
    #[error("map keys out of order or duplicated at offset {0}")]
    UnsortedKeys(usize),
    #[error("length {len} exceeds remaining input at offset {offset}")]
    LengthOverrun { len: u64, offset: usize },
    #[error("trailing bytes after value ({0} left)")]
    Trailing(usize),
    #[error("expected {expected}, found {found}")]
    WrongType {
        expected: &'static str,
        found: &'static str,
    },
    #[error("missing map key `{0}`")]
    MissingKey(String),
    #[error("unexpected map key `{0}`")]
    UnexpectedKey(String),
    #[error("bad field `{field}`: {reason}")]
    BadField { field: String, reason: String },
}

/// Strict decode of a single canonical value covering the whole input.
pub fn canonical_decode(bytes: &[u8]) -> Result<Value, DecodeError> {
    let mut cursor = Cursor { buf: bytes, pos: 0 };
    let value = decode_value(&mut cursor)?;
    if cursor.pos != bytes.len() {
        return Err(DecodeError::Trailing(bytes.len() - cursor.pos));
    }
    Ok(value)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn byte(&mut self) -> Result<u8, DecodeError> {
        let b = *self
            .buf
            .get(self.pos)
            .ok_or(DecodeError::Truncated(self.pos))?;
        self.pos += 1;
        Ok(b)
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        let end = self
            .pos
            .checked_add(8)
            .filter(|&e| e <= self.buf.len())
            .ok_or(DecodeError::Truncated(self.pos))?;
        let mut raw = [0u8; 8];
        raw.copy_from_slice(&self.buf[self.pos..end]);
        self.pos = end;
        Ok(u64::from_be_bytes(raw))
    }

    fn take(&mut self, len: u64) -> Result<&'a [u8], DecodeError> {
        let len_usize =
            usize::try_from(len).map_err(|_| DecodeError::LengthOverrun { len, offset: self.pos })?;
        let end = self
            .pos
            .checked_add(len_usize)
            .filter(|&e| e <= self.buf.len())
            .ok_or(DecodeError::LengthOverrun { len, offset: self.pos })?;
        let slice = &self.buf[self.pos..end];
        self.pos = end;
        Ok(slice)
    }
}

fn decode_text(cursor: &mut Cursor) -> Result<String, DecodeError> {
    let offset = cursor.pos;
    let len = cursor.u64()?;
    let raw = cursor.take(len)?;
    String::from_utf8(raw.to_vec()).map_err(|_| DecodeError::BadUtf8(offset))
}

fn decode_value(cursor: &mut Cursor) -> Result<Value, DecodeError> {
    let offset = cursor.pos;
    let tag = cursor.byte()?;
    match tag {
        TAG_UNSIGNED => Ok(Value::Unsigned(cursor.u64()?)),
        TAG_BYTES => {
            let len = cursor.u64()?;
            Ok(Value::Bytes(cursor.take(len)?.to_vec()))
        }
        TAG_TEXT => Ok(Value::Text(decode_text(cursor)?)),
        TAG_LIST => {
            let count = cursor.u64()?;
            let mut items = Vec::new();
            for _ in 0..count {
                items.push(decode_value(cursor)?);
            }
            Ok(Value::List(items))
        }
        TAG_MAP => {
            let count = cursor.u64()?;
            let mut entries = BTreeMap::new();
            let mut last_key: Option<String> = None;
            for _ in 0..count {
                let key_offset = cursor.pos;
                let key_tag = cursor.byte()?;
                if key_tag != TAG_TEXT {
                    return Err(DecodeError::UnknownTag { tag: key_tag, offset: key_offset });
                }
                let key = decode_text(cursor)?;
                if last_key.as_deref() >= Some(key.as_str()) {
                    return Err(DecodeError::UnsortedKeys(key_offset));
                }
                let value = decode_value(cursor)?;
                last_key = Some(key.clone());
                entries.insert(key, value);
            }
            Ok(Value::Map(entries))
        }
        _ => Err(DecodeError::UnknownTag { tag, offset }),
    }
}

/// Typed access to a decoded map with an exact key-set check.
pub struct MapReader<'a> {
    entries: &'a BTreeMap<String, Value>,
}

impl<'a> MapReader<'a> {
    pub fn new(value: &'a Value) -> Result<Self, DecodeError> {
        match value {
            Value::Map(entries) => Ok(MapReader { entries }),
            other => Err(DecodeError::WrongType { expected: "map", found: kind_name(other) }),
        }
    }

    /// Reject maps missing a required key or carrying one outside
    /// `required` ∪ `optional`.
    pub fn expect_keys(&self, required: &[&str], optional: &[&str]) -> Result<(), DecodeError> {
        for key in self.entries.keys() {
            if !required.contains(&key.as_str()) && !optional.contains(&key.as_str()) {
                return Err(DecodeError::UnexpectedKey(key.clone()));
            }
        }
        for key in required {
            if !self.entries.contains_key(*key) {
                return Err(DecodeError::MissingKey((*key).to_string()));
            }
        }
        Ok(())
    }

    pub fn opt(&self, key: &str) -> Option<&'a Value> {
        self.entries.get(key)
    }

    pub fn get(&self, key: &str) -> Result<&'a Value, DecodeError> {
        self.entries
            .get(key)
            .ok_or_else(|| DecodeError::MissingKey(key.to_string()))
    }

    pub fn u64(&self, key: &str) -> Result<u64, DecodeError> {
        match self.get(key)? {
            Value::Unsigned(n) => Ok(*n),
            other => Err(DecodeError::WrongType { expected: "unsigned", found: kind_name(other) }),
        }
    }

    pub fn text(&self, key: &str) -> Result<&'a str, DecodeError> {
        match self.get(key)? {
            Value::Text(s) => Ok(s),
            other => Err(DecodeError::WrongType { expected: "text", found: kind_name(other) }),
        }
    }

    pub fn bytes(&self, key: &str) -> Result<&'a [u8], DecodeError> {
        match self.get(key)? {
            Value::Bytes(b) => Ok(b),
            other => Err(DecodeError::WrongType { expected: "bytes", found: kind_name(other) }),
        }
    }

    pub fn list(&self, key: &str) -> Result<&'a [Value], DecodeError> {
        match self.get(key)? {
            Value::List(items) => Ok(items),
            other => Err(DecodeError::WrongType { expected: "list", found: kind_name(other) }),
        }
    }

    /// A 32-byte `bytes` field interpreted as a content address.
    pub fn content_ref(&self, key: &str) -> Result<ContentRef, DecodeError> {
        let raw = self.bytes(key)?;
        let arr: [u8; 32] = raw.try_into().map_err(|_| DecodeError::BadField {
            field: key.to_string(),
            reason: format!("expected 32 bytes, got {}", raw.len()),
        })?;
        Ok(ContentRef::from_bytes(arr))
    }
}

pub fn as_list(value: &Value) -> Result<&[Value], DecodeError> {
    match value {
        Value::List(items) => Ok(items),
        other => Err(DecodeError::WrongType { expected: "list", found: kind_name(other) }),
    }
}

pub fn as_text(value: &Value) -> Result<&str, DecodeError> {
    match value {
        Value::Text(s) => Ok(s),
        other => Err(DecodeError::WrongType { expected: "text", found: kind_name(other) }),
    }
}

fn kind_name(v: &Value) -> &'static str {
    match v {
        Value::Unsigned(_) => "unsigned",
        Value::Bytes(_) => "bytes",
        Value::Text(_) => "text",
        Value::List(_) => "list",
        Value::Map(_) => "map",
    }
}
