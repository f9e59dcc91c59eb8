//! Simulated payable data contracts with escrow and response-time
//! enforcement.
//!
//! All contract state is a fold over ledger entries ([`ContractBook::apply`]),
//! so replaying a ledger reconstructs accounts, contracts, and requests
//! exactly. A request moves the contract price from the requester's balance
//! into escrow; delivery within the contract's response limit settles the
//! escrow to the provider, delivery after it (or explicit expiry) refunds the
//! requester. The boundary is inclusive: elapsed equal to the limit still
//! settles.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::ContentRef;
use crate::ids::{ContractAddress, RequestId};
use crate::ledger::{LedgerEntry, LedgerEvent, ParticipantId};

/// Currency in integer minor units.
pub type Money = u64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Account {
    pub id: ParticipantId,
    pub balance: Money,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DataContract {
    pub address: ContractAddress,
    pub provider: ParticipantId,
    pub price: Money,
    pub max_response_ms: u64,
    pub interface_ref: ContentRef,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestState {
    Pending,
    Settled,
    Refunded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DataRequest {
    pub id: RequestId,
    pub contract: ContractAddress,
    pub requester: ParticipantId,
    pub params_ref: ContentRef,
    pub requested_at: u64,
    pub escrow: Money,
    pub state: RequestState,
    /// Payload ref and elapsed milliseconds, once a delivery arrived.
    pub delivered: Option<(ContentRef, u64)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeliveryOutcome {
    Accepted { payload_ref: ContentRef },
    RejectedLate { elapsed_ms: u64, limit_ms: u64 },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContractError {
    #[error("participant `{0}` is not registered")]
    UnknownParticipant(ParticipantId),
    #[error("bad contract terms: max_response_ms must be positive")]
    BadTerms,
    #[error("unknown contract {0}")]
    UnknownContract(ContractAddress),
    #[error("insufficient funds: need {needed}, have {available}")]
    InsufficientFunds { needed: Money, available: Money },
    #[error("unknown request {0}")]
    UnknownRequest(RequestId),
    #[error("request {0} is not pending")]
    RequestNotPending(RequestId),
    #[error("delivery time {at} precedes request time {requested_at}")]
    TimeBeforeRequest { at: u64, requested_at: u64 },
    #[error("request not yet expired: elapsed {elapsed_ms} ms within limit {limit_ms} ms")]
    NotYetExpired { elapsed_ms: u64, limit_ms: u64 },
}

/// A ledger that hash-verifies can still be economically inconsistent if it
/// was not produced by the engine; replay surfaces that as one of these.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ApplyError {
    #[error("account `{0}` does not exist")]
    UnknownAccount(ParticipantId),
    #[error("unknown contract {0}")]
    UnknownContract(ContractAddress),
    #[error("unknown request {0}")]
    UnknownRequest(RequestId),
    #[error("request {0} already terminated")]
    NotPending(RequestId),
    #[error("balance arithmetic overflow for `{0}`")]
    Overflow(ParticipantId),
    #[error("account `{id}` cannot cover {needed} (has {available})")]
    Overdraft { id: ParticipantId, needed: Money, available: Money },
    #[error("transfer of {actual} does not match escrow {expected} for request {request}")]
    AmountMismatch { request: RequestId, expected: Money, actual: Money },
}

/// What a delivery or expiry will do, decided before any event is written.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveryDecision {
    pub request_id: RequestId,
    pub requester: ParticipantId,
    pub provider: ParticipantId,
    pub amount: Money,
    pub elapsed_ms: u64,
    pub limit_ms: u64,
    pub on_time: bool,
}

/// Accounts, contracts, and requests folded from the ledger.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContractBook {
    accounts: BTreeMap<ParticipantId, Money>,
    contracts: BTreeMap<ContractAddress, DataContract>,
    requests: BTreeMap<RequestId, DataRequest>,
    total_supply: Money,
}

impl ContractBook {
    pub fn new() -> ContractBook {
        ContractBook::default()
    }

    pub fn balance(&self, id: &ParticipantId) -> Option<Money> {
        self.accounts.get(id).copied()
    }

    pub fn accounts(&self) -> impl Iterator<Item = Account> + '_ {
        self.accounts
            .iter()
            .map(|(id, balance)| Account { id: id.clone(), balance: *balance })
    }

    pub fn contract(&self, address: &ContractAddress) -> Option<&DataContract> {
        self.contracts.get(address)
    }

    pub fn request(&self, id: &RequestId) -> Option<&DataRequest> {
        self.requests.get(id)
    }

    pub fn requests(&self) -> impl Iterator<Item = &DataRequest> {
        self.requests.values()
    }

    pub fn total_supply(&self) -> Money {
        self.total_supply
    }

    /// Σ balances.
    pub fn balances_total(&self) -> Money {
        self.accounts.values().sum()
    }

    /// Σ escrows still held by pending requests.
    pub fn escrow_total(&self) -> Money {
        self.requests
            .values()
            .filter(|r| r.state == RequestState::Pending)
            .map(|r| r.escrow)
            .sum()
    }

    /// Conservation invariant: balances plus held escrow equal everything
    /// ever funded.
    pub fn conserves_supply(&self) -> bool {
        self.balances_total() + self.escrow_total() == self.total_supply
    }

    // -----------------------------------------------------------------------
    // Operation preconditions

    /// Escrow a request will need, after checking the requester can pay.
    pub fn check_request(
        &self,
        contract: &ContractAddress,
        requester: &ParticipantId,
    ) -> Result<Money, ContractError> {
        let terms = self
            .contracts
            .get(contract)
            .ok_or(ContractError::UnknownContract(*contract))?;
        let available = self
            .accounts
            .get(requester)
            .copied()
            .ok_or_else(|| ContractError::UnknownParticipant(requester.clone()))?;
        if available < terms.price {
            return Err(ContractError::InsufficientFunds {
                needed: terms.price,
                available,
            });
        }
        Ok(terms.price)
    }

    /// Decide a delivery arriving at `at`.
    pub fn decide_delivery(
        &self,
        request_id: &RequestId,
        at: u64,
    ) -> Result<DeliveryDecision, ContractError> {
        let (request, terms) = self.pending_request(request_id)?;
        if at < request.requested_at {
            return Err(ContractError::TimeBeforeRequest {
                at,
                requested_at: request.requested_at,
            });
        }
        let elapsed_ms = at - request.requested_at;
        Ok(DeliveryDecision {
            request_id: *request_id,
            requester: request.requester.clone(),
            provider: terms.provider.clone(),
            amount: request.escrow,
            elapsed_ms,
            limit_ms: terms.max_response_ms,
            on_time: elapsed_ms <= terms.max_response_ms,
        })
    }

    /// Decide an expiry at `at`: only allowed strictly after the response
    /// limit, since a delivery at exactly the limit still settles.
    pub fn decide_expiry(
        &self,
        request_id: &RequestId,
        at: u64,
    ) -> Result<DeliveryDecision, ContractError> {
        let decision = self.decide_delivery(request_id, at)?;
        if decision.elapsed_ms <= decision.limit_ms {
            return Err(ContractError::NotYetExpired {
                elapsed_ms: decision.elapsed_ms,
                limit_ms: decision.limit_ms,
            });
        }
        Ok(decision)
    }

    fn pending_request(
        &self,
        request_id: &RequestId,
    ) -> Result<(&DataRequest, &DataContract), ContractError> {
        let request = self
            .requests
            .get(request_id)
            .ok_or(ContractError::UnknownRequest(*request_id))?;
        if request.state != RequestState::Pending {
            return Err(ContractError::RequestNotPending(*request_id));
        }
        let terms = self
            .contracts
            .get(&request.contract)
            .ok_or(ContractError::UnknownContract(request.contract))?;
        Ok((request, terms))
    }

    // -----------------------------------------------------------------------
    // Event fold

    /// Fold one ledger entry into the book. Non-contract events are no-ops.
    pub fn apply(&mut self, entry: &LedgerEntry) -> Result<(), ApplyError> {
        match &entry.event {
            LedgerEvent::ParticipantRegistered { participant, .. } => {
                self.accounts.entry(participant.clone()).or_insert(0);
            }
            LedgerEvent::AccountFunded { participant, amount } => {
                let balance = self
                    .accounts
                    .get_mut(participant)
                    .ok_or_else(|| ApplyError::UnknownAccount(participant.clone()))?;
                *balance = balance
                    .checked_add(*amount)
                    .ok_or_else(|| ApplyError::Overflow(participant.clone()))?;
                self.total_supply = self
                    .total_supply
                    .checked_add(*amount)
                    .ok_or_else(|| ApplyError::Overflow(participant.clone()))?;
            }
            LedgerEvent::ContractDeployed { provider, price, max_response_ms, interface_ref } => {
                let address = ContractAddress::from_entry_hash(entry.entry_hash);
                self.contracts.insert(
                    address,
                    DataContract {
                        address,
                        provider: provider.clone(),
                        price: *price,
                        max_response_ms: *max_response_ms,
                        interface_ref: *interface_ref,
                    },
                );
            }
            LedgerEvent::DataRequested { contract, requester, params_ref, escrow_amount } => {
                if !self.contracts.contains_key(contract) {
                    return Err(ApplyError::UnknownContract(*contract));
                }
                let balance = self
                    .accounts
                    .get_mut(requester)
                    .ok_or_else(|| ApplyError::UnknownAccount(requester.clone()))?;
                let available = *balance;
                *balance = balance.checked_sub(*escrow_amount).ok_or_else(|| {
                    ApplyError::Overdraft {
                        id: requester.clone(),
                        needed: *escrow_amount,
                        available,
                    }
                })?;
                let id = RequestId::from_entry_hash(entry.entry_hash);
                self.requests.insert(
                    id,
                    DataRequest {
                        id,
                        contract: *contract,
                        requester: requester.clone(),
                        params_ref: *params_ref,
                        requested_at: entry.timestamp,
                        escrow: *escrow_amount,
                        state: RequestState::Pending,
                        delivered: None,
                    },
                );
            }
            LedgerEvent::DataDelivered { request_id, payload_ref, elapsed_ms } => {
                let request = self
                    .requests
                    .get_mut(request_id)
                    .ok_or(ApplyError::UnknownRequest(*request_id))?;
                request.delivered = Some((*payload_ref, *elapsed_ms));
            }
            LedgerEvent::PaymentSettled { request_id, to, amount, .. } => {
                self.terminate(request_id, *amount, RequestState::Settled)?;
                let balance = self
                    .accounts
                    .get_mut(to)
                    .ok_or_else(|| ApplyError::UnknownAccount(to.clone()))?;
                *balance = balance
                    .checked_add(*amount)
                    .ok_or_else(|| ApplyError::Overflow(to.clone()))?;
            }
            LedgerEvent::PaymentRefunded { request_id, amount } => {
                let requester = self.terminate(request_id, *amount, RequestState::Refunded)?;
                let balance = self
                    .accounts
                    .get_mut(&requester)
                    .ok_or_else(|| ApplyError::UnknownAccount(requester.clone()))?;
                *balance = balance
                    .checked_add(*amount)
                    .ok_or(ApplyError::Overflow(requester))?;
            }
            // QoS violations and all BoM/BoL events carry no money.
            _ => {}
        }
        Ok(())
    }

    fn terminate(
        &mut self,
        request_id: &RequestId,
        amount: Money,
        state: RequestState,
    ) -> Result<ParticipantId, ApplyError> {
        let request = self
            .requests
            .get_mut(request_id)
            .ok_or(ApplyError::UnknownRequest(*request_id))?;
        if request.state != RequestState::Pending {
            return Err(ApplyError::NotPending(*request_id));
        }
        if request.escrow != amount {
            return Err(ApplyError::AmountMismatch {
                request: *request_id,
                expected: request.escrow,
                actual: amount,
            });
        }
        request.state = state;
        Ok(request.requester.clone())
    }
}
