//! Traceability engine for data ecosystems.
//!
//! Every run of a data-producing process is recorded as an immutable Bill of
//! Lots instantiated from a declared Bill of Materials. All state changes
//! flow through an append-only, hash-chained, signed ledger; payloads live in
//! a content-addressed blob store; provenance queries (backward tracing,
//! forward tracking, cost rollup) run over a graph assembled from the ledger.
//! Inter-party data provision is mediated by simulated payable contracts with
//! escrow and response-time enforcement.

pub mod blobstore;
pub mod bomfile;
pub mod canonical;
pub mod clock;
pub mod contracts;
pub mod engine;
pub mod hash;
pub mod ids;
pub mod ledger;
pub mod model;
pub mod scenarios;
pub mod trace;
