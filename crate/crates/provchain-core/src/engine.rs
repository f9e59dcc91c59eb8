//! The engine: one data directory holding a ledger, a blob store, and a key
//! store, with every operation validated against in-memory state and then
//! written through the ledger.
//!
//! In-memory state (registered BoMs, live BoLs, the contract book) is a pure
//! fold over ledger entries, so opening a data directory replays the ledger
//! and reconstructs exactly the state that produced it. The chain is verified
//! on every open; a directory whose ledger fails verification is refused.
//!
//! This is a single-process simulation of a multi-party system: the key
//! store holds every participant's signing key, derived deterministically
//! from the participant id so that fixture runs are byte-reproducible.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ed25519_dalek::SigningKey;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blobstore::{BlobError, BlobStore};
use crate::clock::ClockMode;
use crate::contracts::{
    ApplyError, ContractBook, ContractError, DeliveryOutcome, Money,
};
use crate::hash::{ContentRef, HASH_ALGORITHM};
use crate::ids::{BolId, ContractAddress, RequestId};
use crate::ledger::{
    deterministic_signing_key, AppendError, Ledger, LedgerEntry, LedgerEvent, LedgerFileError,
    ParticipantId, VerificationReport, ViolationCause,
};
use crate::model::{
    validate_bom, BolError, BolRecord, BomDef, BomError, NodeId, Provenance, ShadowValue,
    ShadowRecord, ValidatedBom,
};

pub const SIGNATURE_ALGORITHM: &str = "ed25519";
pub const LAYOUT_VERSION: u32 = 1;

/// Author used when no participant is named explicitly.
pub const DEFAULT_AUTHOR: &str = "operator";

const CONFIG_FILE: &str = "config.json";
const KEYS_FILE: &str = "keys.json";
const LEDGER_FILE: &str = "ledger.pcl";
const BLOBS_DIR: &str = "blobs";

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub data_dir: PathBuf,
    /// Clock used if the directory has to be initialised; an existing
    /// directory keeps its persisted clock.
    pub clock: ClockMode,
}

impl EngineConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> EngineConfig {
        EngineConfig { data_dir: data_dir.into(), clock: ClockMode::System }
    }

    pub fn with_clock(mut self, clock: ClockMode) -> EngineConfig {
        self.clock = clock;
        self
    }
}

/// Layout marker persisted as `config.json` in the data directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredConfig {
    layout_version: u32,
    hash_algorithm: String,
    signature_algorithm: String,
    clock: ClockMode,
}

#[derive(Debug, Error)]
pub struct ReplayError {
    pub seq: u64,
    pub detail: String,
}

impl std::fmt::Display for ReplayError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "replay failed at seq {}: {}", self.seq, self.detail)
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Bom(#[from] BomError),
    #[error(transparent)]
    Bol(#[from] BolError),
    #[error(transparent)]
    Contract(#[from] ContractError),
    #[error(transparent)]
    Append(#[from] AppendError),
    #[error(transparent)]
    Blob(#[from] BlobError),
    #[error(transparent)]
    LedgerFile(#[from] LedgerFileError),
    #[error("ledger verification failed: violation at seq={seq} cause={cause}")]
    Integrity { seq: u64, cause: ViolationCause },
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("no BoM registered under {0}")]
    UnknownBom(ContentRef),
    #[error("no BoL {0}")]
    UnknownBol(BolId),
    #[error("participant `{0}` is not registered")]
    UnknownParticipant(ParticipantId),
    #[error("BoM {0} is already registered")]
    BomAlreadyRegistered(ContentRef),
    #[error("data directory layout version {found}, this build expects {expected}")]
    Layout { found: u32, expected: u32 },
    #[error("data directory uses {found} for {field}, this build expects {expected}")]
    AlgorithmMismatch { field: &'static str, found: String, expected: &'static str },
    #[error("refusing to initialise non-empty directory {0} that is not a data directory")]
    ForeignDataDir(PathBuf),
    #[error("bad data directory: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

impl EngineError {
    /// True for failures that mean stored data has been corrupted or
    /// tampered with, as opposed to a rejected operation.
    pub fn is_integrity_violation(&self) -> bool {
        matches!(
            self,
            EngineError::Integrity { .. }
                | EngineError::Replay(_)
                | EngineError::LedgerFile(_)
                | EngineError::Blob(BlobError::CorruptBlob(_))
        )
    }
}

// ---------------------------------------------------------------------------
// Replayed state

/// Everything the ledger implies: registered BoMs, all BoLs, and the
/// contract book.
#[derive(Debug, Default)]
pub struct EcosystemState {
    pub boms: BTreeMap<ContentRef, ValidatedBom>,
    pub bols: BTreeMap<BolId, BolRecord>,
    pub book: ContractBook,
}

impl EcosystemState {
    /// Fold a verified ledger into engine state. `blobs` must be the blob
    /// store the ledger was written against (BoM definitions live there).
    pub fn replay(ledger: &Ledger, blobs: &BlobStore) -> Result<EcosystemState, ReplayError> {
        let mut state = EcosystemState::default();
        for entry in ledger.entries() {
            state.apply(entry, blobs).map_err(|detail| ReplayError { seq: entry.seq, detail })?;
        }
        Ok(state)
    }

    fn apply(&mut self, entry: &LedgerEntry, blobs: &BlobStore) -> Result<(), String> {
        self.book.apply(entry).map_err(|e: ApplyError| e.to_string())?;
        match &entry.event {
            LedgerEvent::BomRegistered { bom_ref } => {
                let bytes = blobs.get(bom_ref).map_err(|e| e.to_string())?;
                let def = BomDef::from_canonical_bytes(&bytes).map_err(|e| e.to_string())?;
                let bom = validate_bom(def).map_err(|e| e.to_string())?;
                if bom.content_ref() != *bom_ref {
                    return Err(format!(
                        "stored BoM hashes to {}, event says {}",
                        bom.content_ref(),
                        bom_ref
                    ));
                }
                self.boms.insert(*bom_ref, bom);
            }
            LedgerEvent::BolOpened { bom_ref } => {
                let bom = self
                    .boms
                    .get(bom_ref)
                    .ok_or_else(|| format!("BoL opened for unregistered BoM {bom_ref}"))?;
                let id = BolId::from_entry_hash(entry.entry_hash);
                self.bols.insert(id, BolRecord::open(id, bom, entry.timestamp));
            }
            LedgerEvent::ShadowRecorded { bol_id, shadow } => {
                let bol = self
                    .bols
                    .get_mut(bol_id)
                    .ok_or_else(|| format!("shadow for unknown BoL {bol_id}"))?;
                let bom = self
                    .boms
                    .get(&bol.bom_ref)
                    .ok_or_else(|| format!("BoL {bol_id} references unknown BoM"))?;
                bol.record_shadow(bom, shadow.clone()).map_err(|e| e.to_string())?;
            }
            LedgerEvent::BolSealed { bol_id, bol_hash } => {
                let bol = self
                    .bols
                    .get_mut(bol_id)
                    .ok_or_else(|| format!("seal of unknown BoL {bol_id}"))?;
                let bom = self
                    .boms
                    .get(&bol.bom_ref)
                    .ok_or_else(|| format!("BoL {bol_id} references unknown BoM"))?;
                let computed = bol.seal(bom, entry.timestamp).map_err(|e| e.to_string())?;
                if computed != *bol_hash {
                    return Err(format!(
                        "sealed BoL hashes to {computed}, event says {bol_hash}"
                    ));
                }
            }
            LedgerEvent::BolAborted { bol_id, reason } => {
                let bol = self
                    .bols
                    .get_mut(bol_id)
                    .ok_or_else(|| format!("abort of unknown BoL {bol_id}"))?;
                bol.abort(entry.timestamp, reason.clone()).map_err(|e| e.to_string())?;
            }
            _ => {}
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// The engine

#[derive(Debug)]
pub struct Engine {
    root: PathBuf,
    config: StoredConfig,
    keys: BTreeMap<ParticipantId, SigningKey>,
    ledger: Ledger,
    blobs: BlobStore,
    state: EcosystemState,
}

impl Engine {
    /// Open `config.data_dir`, initialising the layout (and registering the
    /// default author) if the directory is new.
    pub fn open(config: EngineConfig) -> Result<Engine, EngineError> {
        let root = config.data_dir.clone();
        if !root.join(CONFIG_FILE).exists() {
            Engine::init(&root, config.clock)?;
        }

        let stored: StoredConfig = read_json(&root.join(CONFIG_FILE))?;
        if stored.layout_version != LAYOUT_VERSION {
            return Err(EngineError::Layout {
                found: stored.layout_version,
                expected: LAYOUT_VERSION,
            });
        }
        if stored.hash_algorithm != HASH_ALGORITHM {
            return Err(EngineError::AlgorithmMismatch {
                field: "hashing",
                found: stored.hash_algorithm,
                expected: HASH_ALGORITHM,
            });
        }
        if stored.signature_algorithm != SIGNATURE_ALGORITHM {
            return Err(EngineError::AlgorithmMismatch {
                field: "signatures",
                found: stored.signature_algorithm,
                expected: SIGNATURE_ALGORITHM,
            });
        }

        let seeds: BTreeMap<String, String> = read_json(&root.join(KEYS_FILE))?;
        let mut keys = BTreeMap::new();
        for (id, seed_hex) in seeds {
            let id: ParticipantId = id
                .parse()
                .map_err(|e| EngineError::Config(format!("bad key store entry: {e}")))?;
            let seed = hex::decode(&seed_hex)
                .ok()
                .and_then(|b| <[u8; 32]>::try_from(b).ok())
                .ok_or_else(|| {
                    EngineError::Config(format!("bad key seed for `{id}`: expected 32 hex bytes"))
                })?;
            keys.insert(id, SigningKey::from_bytes(&seed));
        }

        let blobs = BlobStore::open(root.join(BLOBS_DIR))?;
        let ledger = Ledger::load(&root.join(LEDGER_FILE))?;
        if let VerificationReport::Violation { seq, cause } = ledger.verify() {
            return Err(EngineError::Integrity { seq, cause });
        }
        let state = EcosystemState::replay(&ledger, &blobs)?;

        let mut engine = Engine { root, config: stored, keys, ledger, blobs, state };
        if engine.keys.is_empty() {
            // Directory initialised by an older interrupted run; make sure
            // the default author exists.
            let operator: ParticipantId = DEFAULT_AUTHOR.parse().expect("valid id");
            if !engine.ledger.registry().contains(&operator) {
                engine.register_participant(&operator)?;
            }
        }
        Ok(engine)
    }

    fn init(root: &Path, clock: ClockMode) -> Result<(), EngineError> {
        if root.exists() {
            // Dotfiles are tolerated so callers may place a lock file in the
            // directory before the first open.
            let occupied = fs::read_dir(root)?
                .filter_map(|entry| entry.ok())
                .any(|entry| !entry.file_name().to_string_lossy().starts_with('.'));
            if occupied {
                return Err(EngineError::ForeignDataDir(root.to_path_buf()));
            }
        }
        fs::create_dir_all(root)?;
        let stored = StoredConfig {
            layout_version: LAYOUT_VERSION,
            hash_algorithm: HASH_ALGORITHM.to_string(),
            signature_algorithm: SIGNATURE_ALGORITHM.to_string(),
            clock,
        };
        write_json(&root.join(CONFIG_FILE), &stored)?;
        write_json(&root.join(KEYS_FILE), &BTreeMap::<String, String>::new())?;
        fs::create_dir_all(root.join(BLOBS_DIR))?;
        Ledger::new().save(&root.join(LEDGER_FILE))?;
        Ok(())
    }

    /// True when `dir` carries a data directory layout marker.
    pub fn exists(dir: &Path) -> bool {
        dir.join(CONFIG_FILE).is_file()
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn blobs(&self) -> &BlobStore {
        &self.blobs
    }

    pub fn state(&self) -> &EcosystemState {
        &self.state
    }

    pub fn book(&self) -> &ContractBook {
        &self.state.book
    }

    pub fn bom(&self, bom_ref: &ContentRef) -> Option<&ValidatedBom> {
        self.state.boms.get(bom_ref)
    }

    pub fn bol(&self, bol_id: &BolId) -> Option<&BolRecord> {
        self.state.bols.get(bol_id)
    }

    pub fn clock_mode(&self) -> ClockMode {
        self.config.clock
    }

    /// Next timestamp under the directory's clock policy, clamped so the
    /// ledger stays monotone. A fixed clock advances one step per entry,
    /// which keeps reruns byte-identical.
    pub fn now_ms(&self) -> u64 {
        let tip = self.ledger.tip().map(|e| e.timestamp);
        match self.config.clock {
            ClockMode::System => {
                let now = std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_millis() as u64)
                    .unwrap_or(0);
                now.max(tip.unwrap_or(0))
            }
            ClockMode::Fixed { start_ms, step_ms } => match tip {
                None => start_ms,
                Some(t) => start_ms.max(t.saturating_add(step_ms)),
            },
        }
    }

    fn signing_key(&self, id: &ParticipantId) -> Result<&SigningKey, EngineError> {
        self.keys
            .get(id)
            .ok_or_else(|| EngineError::UnknownParticipant(id.clone()))
    }

    /// Append `event` signed by `author` and persist it, then fold it into
    /// in-memory state. All operation-specific validation happens before
    /// this point.
    fn commit(
        &mut self,
        event: LedgerEvent,
        author: &ParticipantId,
        at: u64,
    ) -> Result<ContentRef, EngineError> {
        let key = self
            .keys
            .get(author)
            .ok_or_else(|| EngineError::UnknownParticipant(author.clone()))?;
        let entry = self.ledger.append(event, author, at, key)?.clone();
        Ledger::append_to_file(&self.root.join(LEDGER_FILE), &entry)?;
        self.state
            .apply(&entry, &self.blobs)
            .map_err(|detail| ReplayError { seq: entry.seq, detail })?;
        Ok(entry.entry_hash)
    }

    // -----------------------------------------------------------------------
    // Participants and accounts

    /// Register `id` with a deterministic signing key and an empty account.
    pub fn register_participant(&mut self, id: &ParticipantId) -> Result<(), EngineError> {
        if self.ledger.registry().contains(id) {
            return Err(AppendError::AlreadyRegistered(id.clone()).into());
        }
        let key = deterministic_signing_key(id);
        let at = self.now_ms();
        self.keys.insert(id.clone(), key.clone());
        let event = LedgerEvent::ParticipantRegistered {
            participant: id.clone(),
            verifying_key: key.verifying_key().to_bytes(),
        };
        match self.commit(event, id, at) {
            Ok(_) => {
                let mut seeds: BTreeMap<String, String> = read_json(&self.root.join(KEYS_FILE))?;
                seeds.insert(id.to_string(), hex::encode(key.to_bytes()));
                write_json(&self.root.join(KEYS_FILE), &seeds)?;
                Ok(())
            }
            Err(e) => {
                self.keys.remove(id);
                Err(e)
            }
        }
    }

    pub fn fund_account(&mut self, id: &ParticipantId, amount: Money) -> Result<Money, EngineError> {
        if !self.ledger.registry().contains(id) {
            return Err(EngineError::UnknownParticipant(id.clone()));
        }
        let at = self.now_ms();
        self.commit(LedgerEvent::AccountFunded { participant: id.clone(), amount }, id, at)?;
        Ok(self.state.book.balance(id).expect("funded account exists"))
    }

    // -----------------------------------------------------------------------
    // BoMs and BoLs

    /// Validate and register a BoM: its canonical bytes go to the blob
    /// store, its content address onto the ledger.
    pub fn register_bom(
        &mut self,
        def: BomDef,
        author: &ParticipantId,
    ) -> Result<ContentRef, EngineError> {
        let bom = validate_bom(def)?;
        let bom_ref = bom.content_ref();
        if self.state.boms.contains_key(&bom_ref) {
            return Err(EngineError::BomAlreadyRegistered(bom_ref));
        }
        self.signing_key(author)?;
        self.blobs.put(&bom.def().to_canonical_bytes())?;
        let at = self.now_ms();
        self.commit(LedgerEvent::BomRegistered { bom_ref }, author, at)?;
        Ok(bom_ref)
    }

    /// Open a new BoL for a registered BoM. Its id is the opening entry's
    /// hash.
    pub fn open_bol(
        &mut self,
        bom_ref: ContentRef,
        author: &ParticipantId,
        at: u64,
    ) -> Result<BolId, EngineError> {
        if !self.state.boms.contains_key(&bom_ref) {
            return Err(EngineError::UnknownBom(bom_ref));
        }
        self.signing_key(author)?;
        let hash = self.commit(LedgerEvent::BolOpened { bom_ref }, author, at)?;
        Ok(BolId::from_entry_hash(hash))
    }

    pub fn record_shadow(
        &mut self,
        bol_id: BolId,
        node: NodeId,
        value: ShadowValue,
        provenance: Provenance,
        author: &ParticipantId,
        at: u64,
    ) -> Result<(), EngineError> {
        self.signing_key(author)?;
        let bol = self
            .state
            .bols
            .get(&bol_id)
            .ok_or(EngineError::UnknownBol(bol_id))?;
        let bom = self
            .state
            .boms
            .get(&bol.bom_ref)
            .ok_or(EngineError::UnknownBom(bol.bom_ref))?;

        if let ShadowValue::Blob { content_ref } = &value {
            if !self.blobs.contains(content_ref) {
                return Err(BolError::MissingBlob(*content_ref).into());
            }
        }

        let shadow = ShadowRecord { node, value, recorded_at: at, provenance };
        // Validate against a copy so a rejected write leaves no trace.
        let mut probe = bol.clone();
        probe.record_shadow(bom, shadow.clone())?;

        // A data source may declare a response-time bound stricter than the
        // contract it was fetched through; exceeding it is recorded as an
        // advisory violation with no financial effect.
        let advisory = match &shadow.provenance {
            Provenance::Delivered { request_id } => {
                let declared = bom
                    .data_source(&shadow.node)
                    .and_then(|ds| ds.qos.as_ref())
                    .map(|qos| qos.max_response_ms.get());
                let elapsed = self
                    .state
                    .book
                    .request(request_id)
                    .and_then(|r| r.delivered)
                    .map(|(_, elapsed_ms)| elapsed_ms);
                match (declared, elapsed) {
                    (Some(limit_ms), Some(elapsed_ms)) if elapsed_ms > limit_ms => {
                        Some(LedgerEvent::QosViolation {
                            request_id: *request_id,
                            elapsed_ms,
                            limit_ms,
                        })
                    }
                    _ => None,
                }
            }
            _ => None,
        };

        self.commit(LedgerEvent::ShadowRecorded { bol_id, shadow }, author, at)?;
        if let Some(event) = advisory {
            self.commit(event, author, at)?;
        }
        Ok(())
    }

    pub fn seal_bol(
        &mut self,
        bol_id: BolId,
        author: &ParticipantId,
        at: u64,
    ) -> Result<ContentRef, EngineError> {
        self.signing_key(author)?;
        let bol = self
            .state
            .bols
            .get(&bol_id)
            .ok_or(EngineError::UnknownBol(bol_id))?;
        let bom = self
            .state
            .boms
            .get(&bol.bom_ref)
            .ok_or(EngineError::UnknownBom(bol.bom_ref))?;
        let mut probe = bol.clone();
        let bol_hash = probe.seal(bom, at)?;
        self.commit(LedgerEvent::BolSealed { bol_id, bol_hash }, author, at)?;
        Ok(bol_hash)
    }

    pub fn abort_bol(
        &mut self,
        bol_id: BolId,
        reason: String,
        author: &ParticipantId,
        at: u64,
    ) -> Result<(), EngineError> {
        self.signing_key(author)?;
        let bol = self
            .state
            .bols
            .get(&bol_id)
            .ok_or(EngineError::UnknownBol(bol_id))?;
        let mut probe = bol.clone();
        probe.abort(at, reason.clone())?;
        self.commit(LedgerEvent::BolAborted { bol_id, reason }, author, at)?;
        Ok(())
    }

    // -----------------------------------------------------------------------
    // Contracts

    pub fn deploy_contract(
        &mut self,
        provider: &ParticipantId,
        price: Money,
        max_response_ms: u64,
        interface: &[u8],
        at: u64,
    ) -> Result<ContractAddress, EngineError> {
        if max_response_ms == 0 {
            return Err(ContractError::BadTerms.into());
        }
        if !self.ledger.registry().contains(provider) {
            return Err(EngineError::UnknownParticipant(provider.clone()));
        }
        let interface_ref = self.blobs.put(interface)?;
        let hash = self.commit(
            LedgerEvent::ContractDeployed {
                provider: provider.clone(),
                price,
                max_response_ms,
                interface_ref,
            },
            provider,
            at,
        )?;
        Ok(ContractAddress::from_entry_hash(hash))
    }

    /// Escrow the contract price and record the request.
    pub fn request_data(
        &mut self,
        requester: &ParticipantId,
        address: ContractAddress,
        params: &[u8],
        at: u64,
    ) -> Result<RequestId, EngineError> {
        self.signing_key(requester)?;
        let escrow_amount = self.state.book.check_request(&address, requester)?;
        let params_ref = self.blobs.put(params)?;
        let hash = self.commit(
            LedgerEvent::DataRequested {
                contract: address,
                requester: requester.clone(),
                params_ref,
                escrow_amount,
            },
            requester,
            at,
        )?;
        Ok(RequestId::from_entry_hash(hash))
    }

    /// Deliver a payload for a pending request. On time, the escrow settles
    /// to the provider; late, the requester is refunded and a violation is
    /// recorded. The payload is archived either way.
    pub fn deliver_data(
        &mut self,
        request_id: RequestId,
        payload: &[u8],
        at: u64,
    ) -> Result<DeliveryOutcome, EngineError> {
        let decision = self.state.book.decide_delivery(&request_id, at)?;
        let provider = decision.provider.clone();
        self.signing_key(&provider)?;
        let payload_ref = self.blobs.put(payload)?;
        self.commit(
            LedgerEvent::DataDelivered {
                request_id,
                payload_ref,
                elapsed_ms: decision.elapsed_ms,
            },
            &provider,
            at,
        )?;
        if decision.on_time {
            self.commit(
                LedgerEvent::PaymentSettled {
                    request_id,
                    from: decision.requester.clone(),
                    to: provider.clone(),
                    amount: decision.amount,
                },
                &provider,
                at,
            )?;
            Ok(DeliveryOutcome::Accepted { payload_ref })
        } else {
            self.commit(
                LedgerEvent::QosViolation {
                    request_id,
                    elapsed_ms: decision.elapsed_ms,
                    limit_ms: decision.limit_ms,
                },
                &provider,
                at,
            )?;
            self.commit(
                LedgerEvent::PaymentRefunded { request_id, amount: decision.amount },
                &provider,
                at,
            )?;
            Ok(DeliveryOutcome::RejectedLate {
                elapsed_ms: decision.elapsed_ms,
                limit_ms: decision.limit_ms,
            })
        }
    }

    /// Give up on a pending request once its response limit has strictly
    /// passed, refunding the escrow.
    pub fn expire_request(
        &mut self,
        request_id: RequestId,
        at: u64,
    ) -> Result<DeliveryOutcome, EngineError> {
        let decision = self.state.book.decide_expiry(&request_id, at)?;
        let requester = decision.requester.clone();
        self.signing_key(&requester)?;
        self.commit(
            LedgerEvent::QosViolation {
                request_id,
                elapsed_ms: decision.elapsed_ms,
                limit_ms: decision.limit_ms,
            },
            &requester,
            at,
        )?;
        self.commit(
            LedgerEvent::PaymentRefunded { request_id, amount: decision.amount },
            &requester,
            at,
        )?;
        Ok(DeliveryOutcome::RejectedLate {
            elapsed_ms: decision.elapsed_ms,
            limit_ms: decision.limit_ms,
        })
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, EngineError> {
    let bytes = fs::read(path)
        .map_err(|e| EngineError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| EngineError::Config(format!("cannot parse {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), EngineError> {
    let mut text = serde_json::to_string_pretty(value).expect("serialisable config");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AccessSpec, ArtifactDef, ArtifactKind, AssemblyDef, DataSourceDef, QosSpec};
    use std::collections::BTreeSet;
    use std::num::NonZeroU64;

    fn fixed_engine(dir: &Path) -> Engine {
        Engine::open(
            EngineConfig::new(dir)
                .with_clock(ClockMode::Fixed { start_ms: 1_000, step_ms: 1_000 }),
        )
        .unwrap()
    }

    fn operator() -> ParticipantId {
        DEFAULT_AUTHOR.parse().unwrap()
    }

    fn congestion_bom() -> BomDef {
        BomDef {
            name: "hpc-cs".into(),
            version: "1".into(),
            assemblies: vec![AssemblyDef {
                id: "traffic-scene-analysis".parse().unwrap(),
                name: "Traffic Scene Analysis".into(),
                inputs: vec!["location-photo".parse().unwrap()],
                artifacts: vec!["congestion-model".parse().unwrap()],
                outputs: vec!["congestion-score".parse().unwrap()],
            }],
            data_sources: vec![
                DataSourceDef {
                    id: "location-photo".parse().unwrap(),
                    name: "Location photo".into(),
                    access: AccessSpec::StaticUrl { url: "https://example.org/camera".into() },
                    qos: None,
                },
                DataSourceDef {
                    id: "congestion-score".parse().unwrap(),
                    name: "Congestion score".into(),
                    access: AccessSpec::Internal,
                    qos: None,
                },
            ],
            artifacts: vec![ArtifactDef {
                id: "congestion-model".parse().unwrap(),
                name: "Congestion model".into(),
                kind: ArtifactKind::Model,
                content_ref: None,
            }],
        }
    }

    fn run_one_bol(engine: &mut Engine) -> BolId {
        let op = operator();
        let bom_ref = engine.register_bom(congestion_bom(), &op).unwrap();
        let at = engine.now_ms();
        let bol = engine.open_bol(bom_ref, &op, at).unwrap();
        for (node, bytes) in [("location-photo", b"photo".as_slice()), ("congestion-model", b"model")] {
            let at = engine.now_ms();
            engine
                .record_shadow(
                    bol,
                    node.parse().unwrap(),
                    ShadowValue::Inline { bytes: bytes.to_vec() },
                    Provenance::Fetched { origin: "fixture".into() },
                    &op,
                    at,
                )
                .unwrap();
        }
        let at = engine.now_ms();
        engine
            .record_shadow(
                bol,
                "congestion-score".parse().unwrap(),
                ShadowValue::Inline { bytes: b"7".to_vec() },
                Provenance::Computed { assembly: "traffic-scene-analysis".parse().unwrap() },
                &op,
                at,
            )
            .unwrap();
        let at = engine.now_ms();
        engine.seal_bol(bol, &op, at).unwrap();
        bol
    }

    #[test]
    fn init_creates_layout_and_default_author() {
        let dir = tempfile::tempdir().unwrap();
        let engine = fixed_engine(dir.path());
        assert!(dir.path().join("config.json").is_file());
        assert!(dir.path().join("ledger.pcl").is_file());
        assert!(dir.path().join("keys.json").is_file());
        assert!(dir.path().join("blobs").is_dir());
        assert!(engine.ledger().registry().contains(&operator()));
        assert_eq!(engine.book().balance(&operator()), Some(0));
    }

    #[test]
    fn refuses_foreign_directory() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("unrelated.txt"), "hello").unwrap();
        let err = Engine::open(EngineConfig::new(dir.path())).unwrap_err();
        assert!(matches!(err, EngineError::ForeignDataDir(_)));
    }

    #[test]
    fn refuses_future_layout_version() {
        let dir = tempfile::tempdir().unwrap();
        drop(fixed_engine(dir.path()));
        let marker = dir.path().join("config.json");
        let text = fs::read_to_string(&marker)
            .unwrap()
            .replace("\"layout_version\": 1", "\"layout_version\": 2");
        fs::write(&marker, text).unwrap();
        let err = Engine::open(EngineConfig::new(dir.path())).unwrap_err();
        assert!(matches!(err, EngineError::Layout { found: 2, expected: 1 }));
    }

    #[test]
    fn sealed_bol_produces_the_expected_event_trail() {
        let dir = tempfile::tempdir().unwrap();
        let mut engine = fixed_engine(dir.path());
        let bol = run_one_bol(&mut engine);

        let labels: Vec<&str> = engine
            .ledger()
            .events_for_bol(bol)
            .iter()
            .map(|e| e.event.label())
            .collect();
        assert_eq!(
            labels,
            ["bol_opened", "shadow_recorded", "shadow_recorded", "shadow_recorded", "bol_sealed"]
        );
        let record = engine.bol(&bol).unwrap();
        assert_eq!(record.shadows.len(), 3);
        assert_eq!(record.status.label(), "sealed");
    }

    #[test]
    fn reopening_replays_identical_state() {
        let dir = tempfile::tempdir().unwrap();
        let mut engine = fixed_engine(dir.path());
        let bol = run_one_bol(&mut engine);
        let before_bols = engine.state().bols.clone();
        let before_entries = engine.ledger().entries().to_vec();
        drop(engine);

        let engine = Engine::open(EngineConfig::new(dir.path())).unwrap();
        assert_eq!(engine.state().bols, before_bols);
        assert_eq!(engine.ledger().entries(), before_entries);
        assert!(engine.bol(&bol).is_some());
    }

    #[test]
    fn unregistered_bom_cannot_be_instantiated() {
        let dir = tempfile::tempdir().unwrap();
        let mut engine = fixed_engine(dir.path());
        let missing = ContentRef::of(b"never registered");
        let at = engine.now_ms();
        let err = engine.open_bol(missing, &operator(), at).unwrap_err();
        assert!(matches!(err, EngineError::UnknownBom(r) if r == missing));
    }

    #[test]
    fn thousand_instantiations_get_distinct_ids() {
        let dir = tempfile::tempdir().unwrap();
        let mut engine = Engine::open(
            EngineConfig::new(dir.path())
                .with_clock(ClockMode::Fixed { start_ms: 1_000, step_ms: 0 }),
        )
        .unwrap();
        let op = operator();
        let bom_ref = engine.register_bom(congestion_bom(), &op).unwrap();
        let at = engine.now_ms();
        let ids: BTreeSet<BolId> = (0..1_000)
            .map(|_| engine.open_bol(bom_ref, &op, at).unwrap())
            .collect();
        assert_eq!(ids.len(), 1_000);
        // All opened at one timestamp: distinctness comes from the seq.
        let stamps: BTreeSet<u64> = engine
            .ledger()
            .entries()
            .iter()
            .skip(2)
            .map(|e| e.timestamp)
            .collect();
        assert_eq!(stamps.len(), 1);
    }

    #[test]
    fn blob_shadow_requires_stored_blob() {
        let dir = tempfile::tempdir().unwrap();
        let mut engine = fixed_engine(dir.path());
        let op = operator();
        let bom_ref = engine.register_bom(congestion_bom(), &op).unwrap();
        let at = engine.now_ms();
        let bol = engine.open_bol(bom_ref, &op, at).unwrap();

        let missing = ContentRef::of(b"not stored");
        let at = engine.now_ms();
        let err = engine
            .record_shadow(
                bol,
                "location-photo".parse().unwrap(),
                ShadowValue::Blob { content_ref: missing },
                Provenance::Fetched { origin: "x".into() },
                &op,
                at,
            )
            .unwrap_err();
        assert!(matches!(err, EngineError::Bol(BolError::MissingBlob(r)) if r == missing));

        let stored = engine.blobs().put(b"big payload").unwrap();
        let at = engine.now_ms();
        engine
            .record_shadow(
                bol,
                "location-photo".parse().unwrap(),
                ShadowValue::Blob { content_ref: stored },
                Provenance::Fetched { origin: "x".into() },
                &op,
                at,
            )
            .unwrap();
    }

    #[test]
    fn tampered_ledger_refuses_to_open() {
        let dir = tempfile::tempdir().unwrap();
        let mut engine = fixed_engine(dir.path());
        run_one_bol(&mut engine);
        drop(engine);

        let path = dir.path().join("ledger.pcl");
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        fs::write(&path, bytes).unwrap();

        let err = Engine::open(EngineConfig::new(dir.path())).unwrap_err();
        assert!(err.is_integrity_violation());
    }

    #[test]
    fn full_contract_cycle_with_advisory_qos() {
        let dir = tempfile::tempdir().unwrap();
        let mut engine = fixed_engine(dir.path());
        let op = operator();
        let provider: ParticipantId = "hpc-cs".parse().unwrap();
        engine.register_participant(&provider).unwrap();
        engine.fund_account(&op, 100).unwrap();

        // Data source demands 200 ms, the contract only 500 ms.
        let mut def = congestion_bom();
        def.data_sources[0].qos = Some(QosSpec {
            max_response_ms: NonZeroU64::new(200).unwrap(),
            thresholds: vec![],
        });
        let bom_ref = engine.register_bom(def, &op).unwrap();

        let at = engine.now_ms();
        let address = engine.deploy_contract(&provider, 10, 500, b"{}", at).unwrap();
        let at = engine.now_ms();
        let bol = engine.open_bol(bom_ref, &op, at).unwrap();

        let requested_at = engine.now_ms();
        let rid = engine.request_data(&op, address, b"{}", requested_at).unwrap();
        let outcome = engine
            .deliver_data(rid, b"payload bytes", requested_at + 300)
            .unwrap();
        let payload_ref = match outcome {
            DeliveryOutcome::Accepted { payload_ref } => payload_ref,
            other => panic!("expected acceptance, got {other:?}"),
        };
        assert_eq!(engine.book().balance(&provider), Some(10));
        assert_eq!(engine.book().balance(&op), Some(90));

        // Recording the delivered shadow trips the stricter declared bound.
        let at = engine.now_ms();
        engine
            .record_shadow(
                bol,
                "location-photo".parse().unwrap(),
                ShadowValue::Blob { content_ref: payload_ref },
                Provenance::Delivered { request_id: rid },
                &op,
                at,
            )
            .unwrap();
        let advisory: Vec<_> = engine
            .ledger()
            .entries()
            .iter()
            .filter_map(|e| match &e.event {
                LedgerEvent::QosViolation { request_id, elapsed_ms, limit_ms }
                    if *request_id == rid =>
                {
                    Some((*elapsed_ms, *limit_ms))
                }
                _ => None,
            })
            .collect();
        assert_eq!(advisory, [(300, 200)]);
        assert!(engine.book().conserves_supply());
    }

    #[test]
    fn expiry_refunds_after_the_limit() {
        let dir = tempfile::tempdir().unwrap();
        let mut engine = fixed_engine(dir.path());
        let op = operator();
        let provider: ParticipantId = "hpc-cs".parse().unwrap();
        engine.register_participant(&provider).unwrap();
        engine.fund_account(&op, 50).unwrap();
        let at = engine.now_ms();
        let address = engine.deploy_contract(&provider, 10, 500, b"{}", at).unwrap();

        let requested_at = engine.now_ms();
        let rid = engine.request_data(&op, address, b"{}", requested_at).unwrap();
        assert_eq!(engine.book().balance(&op), Some(40));

        let err = engine.expire_request(rid, requested_at + 500).unwrap_err();
        assert!(matches!(
            err,
            EngineError::Contract(ContractError::NotYetExpired { elapsed_ms: 500, limit_ms: 500 })
        ));
        let outcome = engine.expire_request(rid, requested_at + 501).unwrap();
        assert_eq!(outcome, DeliveryOutcome::RejectedLate { elapsed_ms: 501, limit_ms: 500 });
        assert_eq!(engine.book().balance(&op), Some(50));
        assert!(engine.book().conserves_supply());

        // Late delivery after expiry hits a terminated request.
        let err = engine.deliver_data(rid, b"too late", requested_at + 600).unwrap_err();
        assert!(matches!(
            err,
            EngineError::Contract(ContractError::RequestNotPending(r)) if r == rid
        ));
    }

    #[test]
    fn identical_runs_write_identical_ledgers() {
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            let mut engine = fixed_engine(dir.path());
            run_one_bol(&mut engine);
            drop(engine);
            fs::read(dir.path().join("ledger.pcl")).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn replay_summation_matches_book_balances() {
        let dir = tempfile::tempdir().unwrap();
        let mut engine = fixed_engine(dir.path());
        let op = operator();
        let provider: ParticipantId = "hpc-cs".parse().unwrap();
        engine.register_participant(&provider).unwrap();
        for amount in [100u64, 3, 57, 12, 9] {
            engine.fund_account(&op, amount).unwrap();
        }
        let at = engine.now_ms();
        let address = engine.deploy_contract(&provider, 7, 500, b"{}", at).unwrap();
        let r1_at = engine.now_ms();
        let r1 = engine.request_data(&op, address, b"{}", r1_at).unwrap();
        engine.deliver_data(r1, b"a", r1_at + 100).unwrap();
        let r2_at = engine.now_ms();
        let r2 = engine.request_data(&op, address, b"{}", r2_at).unwrap();
        engine.deliver_data(r2, b"b", r2_at + 900).unwrap();

        // Independent summation straight off the ledger events.
        let mut balances: BTreeMap<ParticipantId, i128> = BTreeMap::new();
        let mut requesters: BTreeMap<RequestId, ParticipantId> = BTreeMap::new();
        for entry in engine.ledger().entries() {
            match &entry.event {
                LedgerEvent::AccountFunded { participant, amount } => {
                    *balances.entry(participant.clone()).or_default() += *amount as i128;
                }
                LedgerEvent::DataRequested { requester, escrow_amount, .. } => {
                    *balances.entry(requester.clone()).or_default() -= *escrow_amount as i128;
                    requesters.insert(RequestId::from_entry_hash(entry.entry_hash), requester.clone());
                }
                LedgerEvent::PaymentSettled { to, amount, .. } => {
                    *balances.entry(to.clone()).or_default() += *amount as i128;
                }
                LedgerEvent::PaymentRefunded { request_id, amount } => {
                    let requester = requesters[request_id].clone();
                    *balances.entry(requester).or_default() += *amount as i128;
                }
                _ => {}
            }
        }
        for account in engine.book().accounts() {
            assert_eq!(
                balances.get(&account.id).copied().unwrap_or(0),
                account.balance as i128,
                "balance mismatch for {}",
                account.id
            );
        }
    }
}
