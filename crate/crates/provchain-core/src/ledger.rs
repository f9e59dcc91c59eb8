//! Append-only, hash-chained, signed event log.
//!
//! Every state change in the engine is one [`LedgerEntry`]: a sequence
//! number, the hash of the previous entry, a timestamp, an author, and the
//! event itself. The entry hash covers all of those, and the author signs the
//! entry hash, so any mutation of a persisted ledger is detectable and no
//! author can repudiate an entry. Participants register their verifying keys
//! through self-signed `ParticipantRegistered` events, making the ledger its
//! own key registry.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{
    self, canonical_encode, DecodeError, MapReader, ToCanonical, Value,
};
use crate::hash::ContentRef;
use crate::ids::{check_token, BolId, ContractAddress, RequestId, TokenError};
use crate::model::{shadow_from_canonical, Provenance, ShadowRecord};

const LEDGER_MAGIC: &[u8; 4] = b"PCL1";

// ---------------------------------------------------------------------------
// Participants

/// Identity of a ledger author.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ParticipantId(String);

impl ParticipantId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for ParticipantId {
    type Error = TokenError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        check_token("participant id", &value)?;
        Ok(ParticipantId(value))
    }
}

impl TryFrom<&str> for ParticipantId {
    type Error = TokenError;

    fn try_from(value: &str) -> Result<Self, Self::Error> {
        ParticipantId::try_from(value.to_string())
    }
}

impl FromStr for ParticipantId {
    type Err = TokenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ParticipantId::try_from(s)
    }
}

impl From<ParticipantId> for String {
    fn from(id: ParticipantId) -> String {
        id.0
    }
}

impl fmt::Display for ParticipantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for ParticipantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ParticipantId({})", self.0)
    }
}

/// Participant id → verifying key, built from registration events.
#[derive(Debug, Clone, Default)]
pub struct KeyRegistry {
    keys: BTreeMap<ParticipantId, VerifyingKey>,
}

impl KeyRegistry {
    pub fn get(&self, id: &ParticipantId) -> Option<&VerifyingKey> {
        self.keys.get(id)
    }

    pub fn contains(&self, id: &ParticipantId) -> bool {
        self.keys.contains_key(id)
    }

    pub fn participants(&self) -> impl Iterator<Item = &ParticipantId> {
        self.keys.keys()
    }
}

// ---------------------------------------------------------------------------
// Events

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LedgerEvent {
    /// Self-signed key registration; must be authored by `participant`.
    ParticipantRegistered {
        participant: ParticipantId,
        verifying_key: [u8; 32],
    },
    AccountFunded {
        participant: ParticipantId,
        amount: u64,
    },
    BomRegistered {
        bom_ref: ContentRef,
    },
    /// The opened BoL's id is this entry's hash.
    BolOpened {
        bom_ref: ContentRef,
    },
    ShadowRecorded {
        bol_id: BolId,
        shadow: ShadowRecord,
    },
    BolSealed {
        bol_id: BolId,
        bol_hash: ContentRef,
    },
    BolAborted {
        bol_id: BolId,
        reason: String,
    },
    /// The contract's address is this entry's hash.
    ContractDeployed {
        provider: ParticipantId,
        price: u64,
        max_response_ms: u64,
        interface_ref: ContentRef,
    },
    /// The request's id is this entry's hash.
    DataRequested {
        contract: ContractAddress,
        requester: ParticipantId,
        params_ref: ContentRef,
        escrow_amount: u64,
    },
    DataDelivered {
        request_id: RequestId,
        payload_ref: ContentRef,
        elapsed_ms: u64,
    },
    PaymentSettled {
        request_id: RequestId,
        from: ParticipantId,
        to: ParticipantId,
        amount: u64,
    },
    PaymentRefunded {
        request_id: RequestId,
        amount: u64,
    },
    QosViolation {
        request_id: RequestId,
        elapsed_ms: u64,
        limit_ms: u64,
    },
}

impl LedgerEvent {
    pub fn label(&self) -> &'static str {
        match self {
            LedgerEvent::ParticipantRegistered { .. } => "participant_registered",
            LedgerEvent::AccountFunded { .. } => "account_funded",
            LedgerEvent::BomRegistered { .. } => "bom_registered",
            LedgerEvent::BolOpened { .. } => "bol_opened",
            LedgerEvent::ShadowRecorded { .. } => "shadow_recorded",
            LedgerEvent::BolSealed { .. } => "bol_sealed",
            LedgerEvent::BolAborted { .. } => "bol_aborted",
            LedgerEvent::ContractDeployed { .. } => "contract_deployed",
            LedgerEvent::DataRequested { .. } => "data_requested",
            LedgerEvent::DataDelivered { .. } => "data_delivered",
            LedgerEvent::PaymentSettled { .. } => "payment_settled",
            LedgerEvent::PaymentRefunded { .. } => "payment_refunded",
            LedgerEvent::QosViolation { .. } => "qos_violation",
        }
    }

    /// The request this event concerns, if any.
    pub fn request_id(&self) -> Option<RequestId> {
        match self {
            LedgerEvent::DataDelivered { request_id, .. }
            | LedgerEvent::PaymentSettled { request_id, .. }
            | LedgerEvent::PaymentRefunded { request_id, .. }
            | LedgerEvent::QosViolation { request_id, .. } => Some(*request_id),
            _ => None,
        }
    }

    /// The BoL this event concerns, if any.
    pub fn bol_id(&self) -> Option<BolId> {
        match self {
            LedgerEvent::ShadowRecorded { bol_id, .. }
            | LedgerEvent::BolSealed { bol_id, .. }
            | LedgerEvent::BolAborted { bol_id, .. } => Some(*bol_id),
            _ => None,
        }
    }
}

impl ToCanonical for LedgerEvent {
    fn to_canonical(&self) -> Value {
        match self {
            LedgerEvent::ParticipantRegistered { participant, verifying_key } => Value::map([
                ("participant", Value::text(participant.as_str())),
                ("type", Value::text("participant_registered")),
                ("verifying_key", Value::bytes(verifying_key.to_vec())),
            ]),
            LedgerEvent::AccountFunded { participant, amount } => Value::map([
                ("amount", Value::Unsigned(*amount)),
                ("participant", Value::text(participant.as_str())),
                ("type", Value::text("account_funded")),
            ]),
            LedgerEvent::BomRegistered { bom_ref } => Value::map([
                ("bom_ref", bom_ref.to_canonical()),
                ("type", Value::text("bom_registered")),
            ]),
            LedgerEvent::BolOpened { bom_ref } => Value::map([
                ("bom_ref", bom_ref.to_canonical()),
                ("type", Value::text("bol_opened")),
            ]),
            LedgerEvent::ShadowRecorded { bol_id, shadow } => Value::map([
                ("bol_id", bol_id.content_ref().to_canonical()),
                ("shadow", shadow.to_canonical()),
                ("type", Value::text("shadow_recorded")),
            ]),
            LedgerEvent::BolSealed { bol_id, bol_hash } => Value::map([
                ("bol_hash", bol_hash.to_canonical()),
                ("bol_id", bol_id.content_ref().to_canonical()),
                ("type", Value::text("bol_sealed")),
            ]),
            LedgerEvent::BolAborted { bol_id, reason } => Value::map([
                ("bol_id", bol_id.content_ref().to_canonical()),
                ("reason", Value::text(reason)),
                ("type", Value::text("bol_aborted")),
            ]),
            LedgerEvent::ContractDeployed { provider, price, max_response_ms, interface_ref } => {
                Value::map([
                    ("interface_ref", interface_ref.to_canonical()),
                    ("max_response_ms", Value::Unsigned(*max_response_ms)),
                    ("price", Value::Unsigned(*price)),
                    ("provider", Value::text(provider.as_str())),
                    ("type", Value::text("contract_deployed")),
                ])
            }
            LedgerEvent::DataRequested { contract, requester, params_ref, escrow_amount } => {
                Value::map([
                    ("contract", contract.content_ref().to_canonical()),
                    ("escrow_amount", Value::Unsigned(*escrow_amount)),
                    ("params_ref", params_ref.to_canonical()),
                    ("requester", Value::text(requester.as_str())),
                    ("type", Value::text("data_requested")),
                ])
            }
            LedgerEvent::DataDelivered { request_id, payload_ref, elapsed_ms } => Value::map([
                ("elapsed_ms", Value::Unsigned(*elapsed_ms)),
                ("payload_ref", payload_ref.to_canonical()),
                ("request_id", request_id.content_ref().to_canonical()),
                ("type", Value::text("data_delivered")),
            ]),
            LedgerEvent::PaymentSettled { request_id, from, to, amount } => Value::map([
                ("amount", Value::Unsigned(*amount)),
                ("from", Value::text(from.as_str())),
                ("request_id", request_id.content_ref().to_canonical()),
                ("to", Value::text(to.as_str())),
                ("type", Value::text("payment_settled")),
            ]),
            LedgerEvent::PaymentRefunded { request_id, amount } => Value::map([
                ("amount", Value::Unsigned(*amount)),
                ("request_id", request_id.content_ref().to_canonical()),
                ("type", Value::text("payment_refunded")),
            ]),
            LedgerEvent::QosViolation { request_id, elapsed_ms, limit_ms } => Value::map([
                ("elapsed_ms", Value::Unsigned(*elapsed_ms)),
                ("limit_ms", Value::Unsigned(*limit_ms)),
                ("request_id", request_id.content_ref().to_canonical()),
                ("type", Value::text("qos_violation")),
            ]),
        }
    }
}

fn participant_field(map: &MapReader, key: &str) -> Result<ParticipantId, DecodeError> {
    ParticipantId::try_from(map.text(key)?).map_err(|e| DecodeError::BadField {
        field: key.to_string(),
        reason: e.to_string(),
    })
}

fn event_from_canonical(value: &Value) -> Result<LedgerEvent, DecodeError> {
    let map = MapReader::new(value)?;
    match map.text("type")? {
        "participant_registered" => {
            map.expect_keys(&["participant", "type", "verifying_key"], &[])?;
            let raw = map.bytes("verifying_key")?;
            let verifying_key: [u8; 32] = raw.try_into().map_err(|_| DecodeError::BadField {
                field: "verifying_key".to_string(),
                reason: format!("expected 32 bytes, got {}", raw.len()),
            })?;
            Ok(LedgerEvent::ParticipantRegistered {
                participant: participant_field(&map, "participant")?,
                verifying_key,
            })
        }
        "account_funded" => {
            map.expect_keys(&["amount", "participant", "type"], &[])?;
            Ok(LedgerEvent::AccountFunded {
                participant: participant_field(&map, "participant")?,
                amount: map.u64("amount")?,
            })
        }
        "bom_registered" => {
            map.expect_keys(&["bom_ref", "type"], &[])?;
            Ok(LedgerEvent::BomRegistered { bom_ref: map.content_ref("bom_ref")? })
        }
        "bol_opened" => {
            map.expect_keys(&["bom_ref", "type"], &[])?;
            Ok(LedgerEvent::BolOpened { bom_ref: map.content_ref("bom_ref")? })
        }
        "shadow_recorded" => {
            map.expect_keys(&["bol_id", "shadow", "type"], &[])?;
            Ok(LedgerEvent::ShadowRecorded {
                bol_id: BolId::from_entry_hash(map.content_ref("bol_id")?),
                shadow: shadow_from_canonical(map.get("shadow")?)?,
            })
        }
        "bol_sealed" => {
            map.expect_keys(&["bol_hash", "bol_id", "type"], &[])?;
            Ok(LedgerEvent::BolSealed {
                bol_id: BolId::from_entry_hash(map.content_ref("bol_id")?),
                bol_hash: map.content_ref("bol_hash")?,
            })
        }
        "bol_aborted" => {
            map.expect_keys(&["bol_id", "reason", "type"], &[])?;
            Ok(LedgerEvent::BolAborted {
                bol_id: BolId::from_entry_hash(map.content_ref("bol_id")?),
                reason: map.text("reason")?.to_string(),
            })
        }
        "contract_deployed" => {
            map.expect_keys(&["interface_ref", "max_response_ms", "price", "provider", "type"], &[])?;
            Ok(LedgerEvent::ContractDeployed {
                provider: participant_field(&map, "provider")?,
                price: map.u64("price")?,
                max_response_ms: map.u64("max_response_ms")?,
                interface_ref: map.content_ref("interface_ref")?,
            })
        }
        "data_requested" => {
            map.expect_keys(&["contract", "escrow_amount", "params_ref", "requester", "type"], &[])?;
            Ok(LedgerEvent::DataRequested {
                contract: ContractAddress::from_entry_hash(map.content_ref("contract")?),
                requester: participant_field(&map, "requester")?,
                params_ref: map.content_ref("params_ref")?,
                escrow_amount: map.u64("escrow_amount")?,
            })
        }
        "data_delivered" => {
            map.expect_keys(&["elapsed_ms", "payload_ref", "request_id", "type"], &[])?;
            Ok(LedgerEvent::DataDelivered {
                request_id: RequestId::from_entry_hash(map.content_ref("request_id")?),
                payload_ref: map.content_ref("payload_ref")?,
                elapsed_ms: map.u64("elapsed_ms")?,
            })
        }
        "payment_settled" => {
            map.expect_keys(&["amount", "from", "request_id", "to", "type"], &[])?;
            Ok(LedgerEvent::PaymentSettled {
                request_id: RequestId::from_entry_hash(map.content_ref("request_id")?),
                from: participant_field(&map, "from")?,
                to: participant_field(&map, "to")?,
                amount: map.u64("amount")?,
            })
        }
        "payment_refunded" => {
            map.expect_keys(&["amount", "request_id", "type"], &[])?;
            Ok(LedgerEvent::PaymentRefunded {
                request_id: RequestId::from_entry_hash(map.content_ref("request_id")?),
                amount: map.u64("amount")?,
            })
        }
        "qos_violation" => {
            map.expect_keys(&["elapsed_ms", "limit_ms", "request_id", "type"], &[])?;
            Ok(LedgerEvent::QosViolation {
                request_id: RequestId::from_entry_hash(map.content_ref("request_id")?),
                elapsed_ms: map.u64("elapsed_ms")?,
                limit_ms: map.u64("limit_ms")?,
            })
        }
        other => Err(DecodeError::BadField {
            field: "type".to_string(),
            reason: format!("unknown event type `{other}`"),
        }),
    }
}

// ---------------------------------------------------------------------------
// Entries

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEntry {
    pub seq: u64,
    pub prev_hash: ContentRef,
    pub timestamp: u64,
    pub author: ParticipantId,
    pub event: LedgerEvent,
    pub entry_hash: ContentRef,
    pub signature: Signature,
}

fn preimage_value(
    seq: u64,
    prev_hash: ContentRef,
    timestamp: u64,
    author: &ParticipantId,
    event: &LedgerEvent,
) -> Value {
    Value::map([
        ("author", Value::text(author.as_str())),
        ("event", event.to_canonical()),
        ("prev_hash", prev_hash.to_canonical()),
        ("seq", Value::Unsigned(seq)),
        ("timestamp", Value::Unsigned(timestamp)),
    ])
}

impl LedgerEntry {
    /// Hash over the entry's signed content.
    pub fn computed_hash(&self) -> ContentRef {
        ContentRef::of(&canonical_encode(&preimage_value(
            self.seq,
            self.prev_hash,
            self.timestamp,
            &self.author,
            &self.event,
        )))
    }

    pub fn to_record_bytes(&self) -> Vec<u8> {
        canonical_encode(&self.to_canonical())
    }

    pub fn from_record_bytes(bytes: &[u8]) -> Result<LedgerEntry, DecodeError> {
        let value = canonical::canonical_decode(bytes)?;
        let map = MapReader::new(&value)?;
        map.expect_keys(
            &["author", "entry_hash", "event", "prev_hash", "seq", "signature", "timestamp"],
            &[],
        )?;
        let raw_sig = map.bytes("signature")?;
        let sig_bytes: [u8; 64] = raw_sig.try_into().map_err(|_| DecodeError::BadField {
            field: "signature".to_string(),
            reason: format!("expected 64 bytes, got {}", raw_sig.len()),
        })?;
        Ok(LedgerEntry {
            seq: map.u64("seq")?,
            prev_hash: map.content_ref("prev_hash")?,
            timestamp: map.u64("timestamp")?,
            author: participant_field(&map, "author")?,
            event: event_from_canonical(map.get("event")?)?,
            entry_hash: map.content_ref("entry_hash")?,
            signature: Signature::from_bytes(&sig_bytes),
        })
    }
}

impl ToCanonical for LedgerEntry {
    fn to_canonical(&self) -> Value {
        Value::map([
            ("author", Value::text(self.author.as_str())),
            ("entry_hash", self.entry_hash.to_canonical()),
            ("event", self.event.to_canonical()),
            ("prev_hash", self.prev_hash.to_canonical()),
            ("seq", Value::Unsigned(self.seq)),
            ("signature", Value::bytes(self.signature.to_bytes().to_vec())),
            ("timestamp", Value::Unsigned(self.timestamp)),
        ])
    }
}

// ---------------------------------------------------------------------------
// The ledger

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AppendError {
    #[error("participant `{0}` is not registered")]
    UnknownParticipant(ParticipantId),
    #[error("participant `{0}` is already registered")]
    AlreadyRegistered(ParticipantId),
    #[error("registration for `{participant}` must be authored by that participant, not `{author}`")]
    ForeignRegistration { author: ParticipantId, participant: ParticipantId },
    #[error("timestamp {at} precedes ledger tip {tip}")]
    NonMonotoneTimestamp { at: u64, tip: u64 },
    #[error("signing key for `{0}` does not match its registered verifying key")]
    KeyMismatch(ParticipantId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationCause {
    HashMismatch,
    BrokenChain,
    BadSignature,
    NonMonotoneTimestamp,
}

impl fmt::Display for ViolationCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ViolationCause::HashMismatch => "HashMismatch",
            ViolationCause::BrokenChain => "BrokenChain",
            ViolationCause::BadSignature => "BadSignature",
            ViolationCause::NonMonotoneTimestamp => "NonMonotoneTimestamp",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerificationReport {
    Ok,
    Violation { seq: u64, cause: ViolationCause },
}

#[derive(Debug, Error)]
pub enum LedgerFileError {
    #[error("not a ledger file: bad magic")]
    BadMagic,
    #[error("undecodable ledger record at seq {seq}: {reason}")]
    Undecodable { seq: u64, reason: String },
    #[error("ledger io: {0}")]
    Io(#[from] io::Error),
}

/// In-memory ledger: the entry chain plus the key registry folded from it.
#[derive(Debug, Default)]
pub struct Ledger {
    entries: Vec<LedgerEntry>,
    registry: KeyRegistry,
}

impl Ledger {
    pub fn new() -> Ledger {
        Ledger::default()
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn tip(&self) -> Option<&LedgerEntry> {
        self.entries.last()
    }

    pub fn registry(&self) -> &KeyRegistry {
        &self.registry
    }

    pub fn entry_by_hash(&self, hash: ContentRef) -> Option<&LedgerEntry> {
        self.entries.iter().find(|e| e.entry_hash == hash)
    }

    /// Append `event` as a new signed entry and return it.
    ///
    /// `ParticipantRegistered` events must be self-authored and first for
    /// their participant; every other event requires an already-registered
    /// author whose registered key matches `signer`.
    pub fn append(
        &mut self,
        event: LedgerEvent,
        author: &ParticipantId,
        at: u64,
        signer: &SigningKey,
    ) -> Result<&LedgerEntry, AppendError> {
        if let Some(tip) = self.tip() {
            if at < tip.timestamp {
                return Err(AppendError::NonMonotoneTimestamp { at, tip: tip.timestamp });
            }
        }

        match &event {
            LedgerEvent::ParticipantRegistered { participant, verifying_key } => {
                if participant != author {
                    return Err(AppendError::ForeignRegistration {
                        author: author.clone(),
                        participant: participant.clone(),
                    });
                }
                if self.registry.contains(participant) {
                    return Err(AppendError::AlreadyRegistered(participant.clone()));
                }
                if signer.verifying_key().to_bytes() != *verifying_key {
                    return Err(AppendError::KeyMismatch(participant.clone()));
                }
            }
            _ => match self.registry.get(author) {
                None => return Err(AppendError::UnknownParticipant(author.clone())),
                Some(registered) => {
                    if signer.verifying_key() != *registered {
                        return Err(AppendError::KeyMismatch(author.clone()));
                    }
                }
            },
        }

        let seq = self.entries.len() as u64;
        let prev_hash = self.tip().map(|e| e.entry_hash).unwrap_or(ContentRef::ZERO);
        let entry_hash = ContentRef::of(&canonical_encode(&preimage_value(
            seq, prev_hash, at, author, &event,
        )));
        let signature = signer.sign(entry_hash.as_bytes());

        if let LedgerEvent::ParticipantRegistered { participant, verifying_key } = &event {
            let key = VerifyingKey::from_bytes(verifying_key)
                .map_err(|_| AppendError::KeyMismatch(participant.clone()))?;
            self.registry.keys.insert(participant.clone(), key);
        }

        self.entries.push(LedgerEntry {
            seq,
            prev_hash,
            timestamp: at,
            author: author.clone(),
            event,
            entry_hash,
            signature,
        });
        Ok(self.entries.last().expect("entry just pushed"))
    }

    /// Check the whole chain: sequence and hash linkage, recomputed entry
    /// hashes, timestamp monotonicity, and signatures against the registry
    /// as it stood when each entry was appended.
    pub fn verify(&self) -> VerificationReport {
        let mut registry = KeyRegistry::default();
        let mut prev_hash = ContentRef::ZERO;
        let mut prev_timestamp = 0u64;

        for (i, entry) in self.entries.iter().enumerate() {
            let violation = |cause| VerificationReport::Violation { seq: i as u64, cause };

            if entry.seq != i as u64 || entry.prev_hash != prev_hash {
                return violation(ViolationCause::BrokenChain);
            }
            if entry.computed_hash() != entry.entry_hash {
                return violation(ViolationCause::HashMismatch);
            }
            if i > 0 && entry.timestamp < prev_timestamp {
                return violation(ViolationCause::NonMonotoneTimestamp);
            }

            let key = match &entry.event {
                LedgerEvent::ParticipantRegistered { participant, verifying_key }
                    if participant == &entry.author && !registry.contains(participant) =>
                {
                    match VerifyingKey::from_bytes(verifying_key) {
                        Ok(key) => Some(key),
                        Err(_) => return violation(ViolationCause::BadSignature),
                    }
                }
                _ => registry.get(&entry.author).copied(),
            };
            let Some(key) = key else {
                return violation(ViolationCause::BadSignature);
            };
            if key
                .verify_strict(entry.entry_hash.as_bytes(), &entry.signature)
                .is_err()
            {
                return violation(ViolationCause::BadSignature);
            }
            if let LedgerEvent::ParticipantRegistered { participant, .. } = &entry.event {
                if !registry.contains(participant) {
                    registry.keys.insert(participant.clone(), key);
                }
            }

            prev_hash = entry.entry_hash;
            prev_timestamp = entry.timestamp;
        }
        VerificationReport::Ok
    }

    /// All entries touching `bol_id`: its opening entry, its shadow and
    /// seal/abort events, and the contract events of every data request
    /// recorded in its Delivered shadows.
    pub fn events_for_bol(&self, bol_id: BolId) -> Vec<&LedgerEntry> {
        let mut requests = Vec::new();
        for entry in &self.entries {
            if let LedgerEvent::ShadowRecorded { bol_id: b, shadow } = &entry.event {
                if *b == bol_id {
                    if let Provenance::Delivered { request_id } = &shadow.provenance {
                        requests.push(*request_id);
                    }
                }
            }
        }

        self.entries
            .iter()
            .filter(|entry| {
                entry.entry_hash == bol_id.content_ref()
                    || entry.event.bol_id() == Some(bol_id)
                    || entry
                        .event
                        .request_id()
                        .is_some_and(|r| requests.contains(&r))
                    || matches!(&entry.event, LedgerEvent::DataRequested { .. }
                        if requests.contains(&RequestId::from_entry_hash(entry.entry_hash)))
            })
            .collect()
    }

    // -----------------------------------------------------------------------
    // Persistence

    /// Write the whole ledger file: magic, then length-prefixed canonical
    /// records.
    pub fn save(&self, path: &Path) -> Result<(), LedgerFileError> {
        let mut out = Vec::with_capacity(4 + self.entries.len() * 256);
        out.extend_from_slice(LEDGER_MAGIC);
        for entry in &self.entries {
            let record = entry.to_record_bytes();
            out.extend_from_slice(&(record.len() as u32).to_be_bytes());
            out.extend_from_slice(&record);
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &out)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Append one entry's record to an existing ledger file.
    pub fn append_to_file(path: &Path, entry: &LedgerEntry) -> Result<(), LedgerFileError> {
        let record = entry.to_record_bytes();
        let mut file = fs::OpenOptions::new().append(true).open(path)?;
        file.write_all(&(record.len() as u32).to_be_bytes())?;
        file.write_all(&record)?;
        file.flush()?;
        Ok(())
    }

    /// Load a ledger file. Decoding is strict: every record must re-encode
    /// to its exact stored bytes. Chain integrity is checked separately by
    /// [`Ledger::verify`].
    pub fn load(path: &Path) -> Result<Ledger, LedgerFileError> {
        let bytes = fs::read(path)?;
        if bytes.len() < 4 || &bytes[0..4] != LEDGER_MAGIC {
            return Err(LedgerFileError::BadMagic);
        }
        let mut entries = Vec::new();
        let mut registry = KeyRegistry::default();
        let mut pos = 4usize;
        let mut seq = 0u64;
        while pos < bytes.len() {
            let undecodable = |reason: String| LedgerFileError::Undecodable { seq, reason };
            if pos + 4 > bytes.len() {
                return Err(undecodable("truncated record length".to_string()));
            }
            let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
            pos += 4;
            if pos + len > bytes.len() {
                return Err(undecodable("record extends past end of file".to_string()));
            }
            let record = &bytes[pos..pos + len];
            let entry =
                LedgerEntry::from_record_bytes(record).map_err(|e| undecodable(e.to_string()))?;
            if entry.to_record_bytes() != record {
                return Err(undecodable("record is not in canonical form".to_string()));
            }
            if let LedgerEvent::ParticipantRegistered { participant, verifying_key } = &entry.event
            {
                if !registry.contains(participant) {
                    if let Ok(key) = VerifyingKey::from_bytes(verifying_key) {
                        registry.keys.insert(participant.clone(), key);
                    }
                }
            }
            entries.push(entry);
            pos += len;
            seq += 1;
        }
        Ok(Ledger { entries, registry })
    }
}

/// Deterministic signing key for a participant, derived from a fixed
/// project-wide seed prefix. Keeps fixture ledgers byte-stable.
pub fn deterministic_signing_key(participant: &ParticipantId) -> SigningKey {
    let seed = ContentRef::of(format!("provchain:participant:{participant}").as_bytes());
    SigningKey::from_bytes(seed.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ShadowValue;
    use rand::{Rng, SeedableRng};

    fn participant(id: &str) -> ParticipantId {
        id.parse().unwrap()
    }

    fn register(ledger: &mut Ledger, id: &str, at: u64) -> SigningKey {
        let p = participant(id);
        let key = deterministic_signing_key(&p);
        ledger
            .append(
                LedgerEvent::ParticipantRegistered {
                    participant: p.clone(),
                    verifying_key: key.verifying_key().to_bytes(),
                },
                &p,
                at,
                &key,
            )
            .unwrap();
        key
    }

    fn fund_event(id: &str, amount: u64) -> LedgerEvent {
        LedgerEvent::AccountFunded { participant: participant(id), amount }
    }

    #[test]
    fn genesis_entry_links_to_zero() {
        let mut ledger = Ledger::new();
        register(&mut ledger, "operator", 1_000);
        let genesis = &ledger.entries()[0];
        assert_eq!(genesis.seq, 0);
        assert_eq!(genesis.prev_hash, ContentRef::ZERO);
        assert_eq!(ledger.verify(), VerificationReport::Ok);
    }

    #[test]
    fn unregistered_author_rejected() {
        let mut ledger = Ledger::new();
        let p = participant("ghost");
        let key = deterministic_signing_key(&p);
        let err = ledger.append(fund_event("ghost", 5), &p, 1_000, &key);
        assert_eq!(err.unwrap_err(), AppendError::UnknownParticipant(p));
    }

    #[test]
    fn hundred_appends_chain_correctly() {
        let mut ledger = Ledger::new();
        let key = register(&mut ledger, "operator", 0);
        let p = participant("operator");
        for i in 1..100u64 {
            ledger.append(fund_event("operator", i), &p, i * 10, &key).unwrap();
        }

        // Recompute the whole chain from scratch with the raw primitives.
        let mut expected_prev = ContentRef::ZERO;
        for (i, entry) in ledger.entries().iter().enumerate() {
            assert_eq!(entry.seq, i as u64);
            assert_eq!(entry.prev_hash, expected_prev);
            let recomputed = ContentRef::of(&canonical_encode(&preimage_value(
                entry.seq,
                entry.prev_hash,
                entry.timestamp,
                &entry.author,
                &entry.event,
            )));
            assert_eq!(recomputed, entry.entry_hash);
            expected_prev = entry.entry_hash;
        }
        assert_eq!(ledger.verify(), VerificationReport::Ok);
    }

    #[test]
    fn timestamps_must_not_regress() {
        let mut ledger = Ledger::new();
        let key = register(&mut ledger, "operator", 1_000);
        let p = participant("operator");
        let err = ledger.append(fund_event("operator", 1), &p, 999, &key);
        assert_eq!(
            err.unwrap_err(),
            AppendError::NonMonotoneTimestamp { at: 999, tip: 1_000 }
        );
        // Equal timestamps are fine.
        ledger.append(fund_event("operator", 1), &p, 1_000, &key).unwrap();
    }

    #[test]
    fn registration_rules() {
        let mut ledger = Ledger::new();
        register(&mut ledger, "operator", 0);

        let p = participant("operator");
        let key = deterministic_signing_key(&p);
        let again = ledger.append(
            LedgerEvent::ParticipantRegistered {
                participant: p.clone(),
                verifying_key: key.verifying_key().to_bytes(),
            },
            &p,
            1,
            &key,
        );
        assert_eq!(again.unwrap_err(), AppendError::AlreadyRegistered(p.clone()));

        let other = participant("intruder");
        let other_key = deterministic_signing_key(&other);
        let foreign = ledger.append(
            LedgerEvent::ParticipantRegistered {
                participant: other.clone(),
                verifying_key: other_key.verifying_key().to_bytes(),
            },
            &p,
            2,
            &key,
        );
        assert_eq!(
            foreign.unwrap_err(),
            AppendError::ForeignRegistration { author: p, participant: other }
        );
    }

    #[test]
    fn wrong_signing_key_rejected_at_append() {
        let mut ledger = Ledger::new();
        register(&mut ledger, "operator", 0);
        let p = participant("operator");
        let wrong = deterministic_signing_key(&participant("someone-else"));
        let err = ledger.append(fund_event("operator", 1), &p, 1, &wrong);
        assert_eq!(err.unwrap_err(), AppendError::KeyMismatch(p));
    }

    #[test]
    fn entry_signed_by_second_key_fails_verification() {
        let mut ledger = Ledger::new();
        let key = register(&mut ledger, "operator", 0);
        let p = participant("operator");
        ledger.append(fund_event("operator", 1), &p, 1, &key).unwrap();

        // Re-sign the funding entry with a different key, as an attacker
        // without the author's key would have to.
        let attacker = deterministic_signing_key(&participant("attacker"));
        let forged_sig = attacker.sign(ledger.entries[1].entry_hash.as_bytes());
        ledger.entries[1].signature = forged_sig;
        assert_eq!(
            ledger.verify(),
            VerificationReport::Violation { seq: 1, cause: ViolationCause::BadSignature }
        );
    }

    #[test]
    fn tampered_event_detected() {
        let mut ledger = Ledger::new();
        let key = register(&mut ledger, "operator", 0);
        let p = participant("operator");
        for i in 0..10u64 {
            ledger.append(fund_event("operator", i), &p, i, &key).unwrap();
        }
        if let LedgerEvent::AccountFunded { amount, .. } = &mut ledger.entries[5].event {
            *amount += 1;
        }
        assert_eq!(
            ledger.verify(),
            VerificationReport::Violation { seq: 5, cause: ViolationCause::HashMismatch }
        );
    }

    #[test]
    fn reordered_entries_break_the_chain() {
        let mut ledger = Ledger::new();
        let key = register(&mut ledger, "operator", 0);
        let p = participant("operator");
        for i in 0..5u64 {
            ledger.append(fund_event("operator", i), &p, i, &key).unwrap();
        }
        ledger.entries.swap(2, 3);
        assert_eq!(
            ledger.verify(),
            VerificationReport::Violation { seq: 2, cause: ViolationCause::BrokenChain }
        );
    }

    #[test]
    fn save_load_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.pcl");

        let mut ledger = Ledger::new();
        let key = register(&mut ledger, "operator", 0);
        let p = participant("operator");
        ledger
            .append(
                LedgerEvent::ShadowRecorded {
                    bol_id: BolId::from_entry_hash(ContentRef::of(b"bol")),
                    shadow: ShadowRecord {
                        node: "location-photo".parse().unwrap(),
                        value: ShadowValue::Blob { content_ref: ContentRef::of(b"photo") },
                        recorded_at: 5,
                        provenance: Provenance::Fetched { origin: "camera".into() },
                    },
                },
                &p,
                5,
                &key,
            )
            .unwrap();
        ledger.save(&path).unwrap();

        let loaded = Ledger::load(&path).unwrap();
        assert_eq!(loaded.entries(), ledger.entries());
        assert_eq!(loaded.verify(), VerificationReport::Ok);
        assert!(loaded.registry().contains(&p));

        let original = fs::read(&path).unwrap();
        loaded.save(&path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), original);
    }

    #[test]
    fn incremental_file_append_matches_full_save() {
        let dir = tempfile::tempdir().unwrap();
        let full = dir.path().join("full.pcl");
        let incremental = dir.path().join("incremental.pcl");

        let mut ledger = Ledger::new();
        Ledger::new().save(&incremental).unwrap();
        let key = register(&mut ledger, "operator", 0);
        Ledger::append_to_file(&incremental, &ledger.entries()[0]).unwrap();
        let p = participant("operator");
        for i in 0..5u64 {
            ledger.append(fund_event("operator", i), &p, i, &key).unwrap();
            Ledger::append_to_file(&incremental, ledger.tip().unwrap()).unwrap();
        }
        ledger.save(&full).unwrap();
        assert_eq!(fs::read(&full).unwrap(), fs::read(&incremental).unwrap());
    }

    #[test]
    fn bad_magic_and_truncation_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.pcl");

        fs::write(&path, b"nope").unwrap();
        assert!(matches!(Ledger::load(&path), Err(LedgerFileError::BadMagic)));

        let mut ledger = Ledger::new();
        register(&mut ledger, "operator", 0);
        ledger.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            Ledger::load(&path),
            Err(LedgerFileError::Undecodable { seq: 0, .. })
        ));
    }

    #[test]
    fn events_for_bol_collects_related_entries() {
        let mut ledger = Ledger::new();
        let key = register(&mut ledger, "operator", 0);
        let p = participant("operator");

        let bom_ref = ContentRef::of(b"bom");
        ledger.append(LedgerEvent::BomRegistered { bom_ref }, &p, 1, &key).unwrap();
        ledger.append(LedgerEvent::BolOpened { bom_ref }, &p, 2, &key).unwrap();
        let bol_id = BolId::from_entry_hash(ledger.tip().unwrap().entry_hash);
        ledger.append(LedgerEvent::BolOpened { bom_ref }, &p, 2, &key).unwrap();
        let other_bol = BolId::from_entry_hash(ledger.tip().unwrap().entry_hash);

        let contract = ContractAddress::from_entry_hash(ContentRef::of(b"contract"));
        ledger
            .append(
                LedgerEvent::DataRequested {
                    contract,
                    requester: p.clone(),
                    params_ref: ContentRef::of(b"params"),
                    escrow_amount: 10,
                },
                &p,
                3,
                &key,
            )
            .unwrap();
        let request_id = RequestId::from_entry_hash(ledger.tip().unwrap().entry_hash);
        ledger
            .append(
                LedgerEvent::DataDelivered {
                    request_id,
                    payload_ref: ContentRef::of(b"payload"),
                    elapsed_ms: 100,
                },
                &p,
                4,
                &key,
            )
            .unwrap();
        ledger
            .append(
                LedgerEvent::PaymentSettled {
                    request_id,
                    from: p.clone(),
                    to: p.clone(),
                    amount: 10,
                },
                &p,
                4,
                &key,
            )
            .unwrap();

        let shadow = ShadowRecord {
            node: "location-photo".parse().unwrap(),
            value: ShadowValue::Blob { content_ref: ContentRef::of(b"payload") },
            recorded_at: 5,
            provenance: Provenance::Delivered { request_id },
        };
        ledger
            .append(LedgerEvent::ShadowRecorded { bol_id, shadow }, &p, 5, &key)
            .unwrap();
        ledger
            .append(
                LedgerEvent::BolSealed { bol_id, bol_hash: ContentRef::of(b"hash") },
                &p,
                6,
                &key,
            )
            .unwrap();
        ledger
            .append(
                LedgerEvent::BolAborted { bol_id: other_bol, reason: "x".into() },
                &p,
                7,
                &key,
            )
            .unwrap();

        let related = ledger.events_for_bol(bol_id);
        let labels: Vec<&str> = related.iter().map(|e| e.event.label()).collect();
        assert_eq!(
            labels,
            [
                "bol_opened",
                "data_requested",
                "data_delivered",
                "payment_settled",
                "shadow_recorded",
                "bol_sealed",
            ]
        );
        assert!(ledger
            .events_for_bol(BolId::from_entry_hash(ContentRef::of(b"unknown")))
            .is_empty());
    }

    #[test]
    fn random_byte_flips_are_detected_at_or_before_the_mutated_entry() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.pcl");

        let mut ledger = Ledger::new();
        let key = register(&mut ledger, "operator", 0);
        let p = participant("operator");
        for i in 0..50u64 {
            ledger.append(fund_event("operator", i % 7), &p, i, &key).unwrap();
        }
        ledger.save(&path).unwrap();
        let pristine = fs::read(&path).unwrap();

        // Record byte ranges per seq so each flip maps to a known entry.
        let mut ranges = Vec::new();
        let mut pos = 4usize;
        while pos < pristine.len() {
            let len =
                u32::from_be_bytes(pristine[pos..pos + 4].try_into().unwrap()) as usize;
            ranges.push(pos..pos + 4 + len);
            pos += 4 + len;
        }

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let mut mutated = pristine.clone();
            let offset = rng.gen_range(4..mutated.len());
            let bit = 1u8 << rng.gen_range(0..8);
            mutated[offset] ^= bit;
            fs::write(&path, &mutated).unwrap();

            let mutated_seq = ranges
                .iter()
                .position(|r| r.contains(&offset))
                .expect("offset inside some record") as u64;

            let first_bad = match Ledger::load(&path) {
                Err(LedgerFileError::Undecodable { seq, .. }) => seq,
                Err(other) => panic!("unexpected load error: {other}"),
                Ok(loaded) => match loaded.verify() {
                    VerificationReport::Violation { seq, .. } => seq,
                    VerificationReport::Ok => {
                        panic!("flip at offset {offset} went undetected")
                    }
                },
            };
            assert!(
                first_bad <= mutated_seq,
                "flip in seq {mutated_seq} first reported at {first_bad}"
            );
        }
    }
}
