//! provchain: a single binary over one data directory.
//!
//! Exit codes: 0 success, 1 usage error, 2 integrity violation (tampered or
//! corrupt stored data), 3 domain error (a rejected operation). Mutating
//! commands take an exclusive lock on the data directory, read-only
//! commands a shared one, so concurrent invocations cannot interleave
//! ledger writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{ArgGroup, Args, Parser, Subcommand};
use fs2::FileExt;
use serde_json::{json, Value as Json};

use provchain_core::bomfile;
use provchain_core::clock::ClockMode;
use provchain_core::contracts::{DeliveryOutcome, Money};
use provchain_core::engine::{Engine, EngineConfig, EngineError, DEFAULT_AUTHOR};
use provchain_core::hash::ContentRef;
use provchain_core::ids::{BolId, ContractAddress, RequestId};
use provchain_core::ledger::{
    Ledger, LedgerEntry, LedgerEvent, LedgerFileError, ParticipantId, VerificationReport,
};
use provchain_core::model::{
    validate_bom, BolRecord, BolStatus, NodeId, Provenance, ShadowValue,
};
use provchain_core::scenarios::{self, ScenarioName};
use provchain_core::trace::{
    AncestryTree, DotScope, ProvEdge, ProvNode, ProvNodeId, ProvenanceGraph, TraceError,
};

const LEDGER_FILE: &str = "ledger.pcl";
const LOCK_FILE: &str = ".lock";

#[derive(Parser)]
#[command(name = "provchain", version, about = "Traceable data ecosystems: BoMs, BoLs, and a signed provenance ledger")]
struct Cli {
    /// Data directory holding the ledger, blob store, and keys.
    #[arg(long, global = true, env = "PROVCHAIN_DATA_DIR", default_value = "provchain-data")]
    data_dir: PathBuf,

    /// Clock for newly initialised directories: `system` or
    /// `fixed:<start_ms>:<step_ms>`.
    #[arg(long, global = true, value_parser = parse_clock)]
    clock: Option<ClockMode>,

    /// Author of ledger entries written by this invocation.
    #[arg(long, global = true, default_value = DEFAULT_AUTHOR)]
    author: ParticipantId,

    #[command(subcommand)]
    command: Command,
}

fn parse_clock(s: &str) -> Result<ClockMode, String> {
    if s == "system" {
        return Ok(ClockMode::System);
    }
    if let Some(rest) = s.strip_prefix("fixed:") {
        if let Some((start, step)) = rest.split_once(':') {
            let start_ms = start.parse().map_err(|_| "bad start_ms".to_string())?;
            let step_ms = step.parse().map_err(|_| "bad step_ms".to_string())?;
            return Ok(ClockMode::Fixed { start_ms, step_ms });
        }
    }
    Err("expected `system` or `fixed:<start_ms>:<step_ms>`".to_string())
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum TraceFormat {
    Tree,
    Json,
    Dot,
}

#[derive(Args)]
struct FormatArg {
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Validate or register a BoM definition file.
    Bom {
        #[command(subcommand)]
        command: BomCommand,
    },
    /// Open, fill, and close Bills of Lots.
    Bol {
        #[command(subcommand)]
        command: BolCommand,
    },
    /// Where-from: the ancestry of one recorded instance.
    Trace {
        bol_id: BolId,
        node_id: NodeId,
        /// Traversal depth limit.
        #[arg(long)]
        depth: Option<u32>,
        #[arg(long, value_enum, default_value = "tree")]
        format: TraceFormat,
    },
    /// Where-used: everything derived from one recorded instance.
    Track {
        bol_id: BolId,
        node_id: NodeId,
        #[arg(long)]
        depth: Option<u32>,
        #[arg(long, value_enum, default_value = "tree")]
        format: TraceFormat,
    },
    /// Total settled data payments behind one BoL.
    Cost {
        bol_id: BolId,
        #[command(flatten)]
        format: FormatArg,
    },
    /// Inspect or check the ledger.
    Ledger {
        #[command(subcommand)]
        command: LedgerCommand,
    },
    /// Raw content-addressed storage.
    Blob {
        #[command(subcommand)]
        command: BlobCommand,
    },
    /// Participants and their balances.
    Account {
        #[command(subcommand)]
        command: AccountCommand,
    },
    /// Payable data contracts with escrow.
    Contract {
        #[command(subcommand)]
        command: ContractCommand,
    },
    /// Run a built-in end-to-end scenario.
    Scenario {
        #[command(subcommand)]
        command: ScenarioCommand,
    },
    /// Export the provenance graph.
    Export {
        #[command(subcommand)]
        command: ExportCommand,
    },
}

#[derive(Subcommand)]
enum BomCommand {
    /// Parse and validate a BoM file; prints its content address.
    Validate {
        file: PathBuf,
        #[command(flatten)]
        format: FormatArg,
    },
    /// Validate a BoM file and record it on the ledger.
    Register {
        file: PathBuf,
        #[command(flatten)]
        format: FormatArg,
    },
}

#[derive(Subcommand)]
enum BolCommand {
    /// Open a new BoL for a registered BoM.
    Open {
        bom_ref: ContentRef,
        #[command(flatten)]
        format: FormatArg,
    },
    /// Record a runtime shadow for one node.
    #[command(group(ArgGroup::new("value").required(true)))]
    #[command(group(ArgGroup::new("prov").required(true)))]
    Record {
        bol_id: BolId,
        node_id: NodeId,
        /// Inline value from the command line.
        #[arg(long, group = "value")]
        text: Option<String>,
        /// Value from a file; large files land in the blob store.
        #[arg(long, group = "value")]
        file: Option<PathBuf>,
        /// Reference an already stored blob.
        #[arg(long, group = "value")]
        blob: Option<ContentRef>,
        /// Provenance: fetched from an external origin.
        #[arg(long, group = "prov")]
        origin: Option<String>,
        /// Provenance: computed by this assembly.
        #[arg(long, group = "prov")]
        computed: Option<NodeId>,
        /// Provenance: delivered under this data request.
        #[arg(long, group = "prov")]
        delivered: Option<RequestId>,
    },
    /// Seal a complete BoL; prints its content hash.
    Seal {
        bol_id: BolId,
        #[command(flatten)]
        format: FormatArg,
    },
    /// Abort an open BoL, keeping its partial shadows.
    Abort {
        bol_id: BolId,
        #[arg(long)]
        reason: String,
    },
    /// Print one BoL with its shadows.
    Show {
        bol_id: BolId,
        #[command(flatten)]
        format: FormatArg,
    },
}

#[derive(Subcommand)]
enum LedgerCommand {
    /// Re-verify the whole chain: hashes, links, signatures, timestamps.
    Verify {
        #[command(flatten)]
        format: FormatArg,
    },
    /// List every entry.
    Dump {
        #[command(flatten)]
        format: FormatArg,
    },
}

#[derive(Subcommand)]
enum BlobCommand {
    /// Store a file; prints its content address.
    Put {
        file: PathBuf,
        #[command(flatten)]
        format: FormatArg,
    },
    /// Retrieve a blob to stdout or a file.
    Get {
        content_ref: ContentRef,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum AccountCommand {
    /// Register a participant and its signing key.
    Register { id: ParticipantId },
    /// Credit an account; prints the new balance.
    Fund {
        id: ParticipantId,
        amount: Money,
        #[command(flatten)]
        format: FormatArg,
    },
    /// Print an account balance.
    Balance {
        id: ParticipantId,
        #[command(flatten)]
        format: FormatArg,
    },
}

#[derive(Subcommand)]
enum ContractCommand {
    /// Deploy a payable data contract; prints its address.
    Deploy {
        #[arg(long)]
        provider: ParticipantId,
        #[arg(long)]
        price: Money,
        #[arg(long)]
        max_response_ms: u64,
        /// Interface descriptor file (JSON naming the request parameters).
        #[arg(long)]
        interface: PathBuf,
        #[command(flatten)]
        format: FormatArg,
    },
    /// Escrow the price and request data; prints the request id.
    Request {
        #[arg(long)]
        requester: ParticipantId,
        #[arg(long)]
        contract: ContractAddress,
        /// Request parameter file.
        #[arg(long)]
        params: PathBuf,
        #[command(flatten)]
        format: FormatArg,
    },
    /// Deliver a payload for a pending request.
    Deliver {
        #[arg(long)]
        request: RequestId,
        #[arg(long)]
        payload: PathBuf,
        #[command(flatten)]
        format: FormatArg,
    },
    /// Expire an overdue request and refund its escrow.
    Expire {
        #[arg(long)]
        request: RequestId,
        #[command(flatten)]
        format: FormatArg,
    },
}

#[derive(Subcommand)]
enum ScenarioCommand {
    /// Execute a scenario and write a DOT export next to the ledger.
    Run {
        /// hpc-cs, ltc-cs-training, or fusion-ai.
        #[arg(value_parser = ScenarioName::from_str)]
        name: ScenarioName,
        /// Repetitions, where the scenario supports them.
        #[arg(long, default_value_t = 1)]
        runs: u32,
        /// Data directory to run against (defaults to --data-dir).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        format: FormatArg,
    },
}

#[derive(Subcommand)]
enum ExportCommand {
    /// DOT rendering of the provenance graph.
    Dot {
        /// Restrict to one BoL (plus its cross-BoL edges).
        #[arg(long)]
        bol: Option<BolId>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

// ---------------------------------------------------------------------------
// Failure mapping

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn domain(message: impl Into<String>) -> Failure {
        Failure { code: 3, message: message.into() }
    }

    fn integrity(message: impl Into<String>) -> Failure {
        Failure { code: 2, message: message.into() }
    }

    /// The caller already printed the diagnostic.
    fn silent(code: u8) -> Failure {
        Failure { code, message: String::new() }
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Failure {
        let code = if e.is_integrity_violation() { 2 } else { 3 };
        Failure { code, message: e.to_string() }
    }
}

impl From<TraceError> for Failure {
    fn from(e: TraceError) -> Failure {
        let code = match e {
            TraceError::UnknownProvNode(_) | TraceError::UnknownBol(_) => 3,
            _ => 2,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<bomfile::BomFileError> for Failure {
    fn from(e: bomfile::BomFileError) -> Failure {
        Failure::domain(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Failure {
        Failure::domain(e.to_string())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| Failure::domain(format!("cannot read {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Data-dir access

struct Dir {
    path: PathBuf,
    _lock: fs::File,
}

impl Dir {
    /// Lock the directory; exclusive for writers, shared for readers. The
    /// lock outlives every engine touch in the command.
    fn lock(path: &Path, exclusive: bool) -> Result<Dir, Failure> {
        fs::create_dir_all(path)?;
        let lock = fs::File::create(path.join(LOCK_FILE))?;
        if exclusive {
            lock.lock_exclusive()?;
        } else {
            lock.lock_shared()?;
        }
        Ok(Dir { path: path.to_path_buf(), _lock: lock })
    }

    /// Writers may initialise a fresh directory.
    fn writable(path: &Path, clock: Option<ClockMode>) -> Result<(Dir, Engine), Failure> {
        let dir = Dir::lock(path, true)?;
        let mut config = EngineConfig::new(path);
        if let Some(clock) = clock {
            config = config.with_clock(clock);
        }
        let engine = Engine::open(config)?;
        Ok((dir, engine))
    }

    /// Readers require an existing directory.
    fn readable(path: &Path) -> Result<(Dir, Engine), Failure> {
        if !Engine::exists(path) {
            return Err(Failure::domain(format!(
                "no data directory at {} (run a mutating command first)",
                path.display()
            )));
        }
        let dir = Dir::lock(path, false)?;
        let engine = Engine::open(EngineConfig::new(path))?;
        Ok((dir, engine))
    }

    fn ledger_path(&self) -> PathBuf {
        self.path.join(LEDGER_FILE)
    }
}

fn graph_of(engine: &Engine) -> Result<ProvenanceGraph, Failure> {
    Ok(ProvenanceGraph::build(engine.ledger(), engine.blobs())?)
}

// ---------------------------------------------------------------------------
// Rendering

fn emit_json(value: Json) {
    println!("{}", serde_json::to_string_pretty(&value).expect("valid JSON"));
}

/// Single-reference results share one shape so one schema covers them.
fn emit_ref(format: Format, kind: &str, value: impl std::fmt::Display) {
    match format {
        Format::Text => println!("{value}"),
        Format::Json => emit_json(json!({
            "schema": "provchain.ref.v1",
            "kind": kind,
            "value": value.to_string(),
        })),
    }
}

fn provenance_json(p: &Provenance) -> Json {
    match p {
        Provenance::Fetched { origin } => json!({"fetched": {"origin": origin}}),
        Provenance::Computed { assembly } => json!({"computed": {"assembly": assembly}}),
        Provenance::Delivered { request_id } => {
            json!({"delivered": {"request_id": request_id.to_string()}})
        }
    }
}

fn provenance_text(p: &Provenance) -> String {
    match p {
        Provenance::Fetched { origin } => format!("fetched {origin}"),
        Provenance::Computed { assembly } => format!("computed {assembly}"),
        Provenance::Delivered { request_id } => format!("delivered {request_id}"),
    }
}

fn show_bol(record: &BolRecord, format: Format) {
    match format {
        Format::Json => {
            emit_json(json!({
                "schema": "provchain.bol.v1",
                "bol": record,
            }));
        }
        Format::Text => {
            println!("bol {}", record.id);
            println!("bom {}", record.bom_ref);
            println!("opened_at {}", record.opened_at);
            match &record.status {
                BolStatus::Open => println!("status open"),
                BolStatus::Sealed { sealed_at, bol_hash } => {
                    println!("status sealed at {sealed_at} hash {bol_hash}")
                }
                BolStatus::Aborted { aborted_at, reason } => {
                    println!("status aborted at {aborted_at} reason {reason}")
                }
            }
            for (node, shadow) in &record.shadows {
                let value = match &shadow.value {
                    ShadowValue::Inline { bytes } => format!("inline {} bytes", bytes.len()),
                    ShadowValue::Blob { content_ref } => format!("blob {content_ref}"),
                };
                println!(
                    "shadow {node} {value} ref {} at {} via {}",
                    shadow.value.effective_ref(),
                    shadow.recorded_at,
                    provenance_text(&shadow.provenance)
                );
            }
        }
    }
}

fn tree_lines(tree: &AncestryTree, indent: usize, out: &mut String) {
    let marker = if tree.revisited { " (revisited)" } else { "" };
    out.push_str(&format!("{}{}{}\n", "  ".repeat(indent), tree.root, marker));
    for child in &tree.children {
        tree_lines(child, indent + 1, out);
    }
}

/// DOT of just the subgraph `keep`, reusing the deterministic exporter.
fn induced_dot(graph: &ProvenanceGraph, keep: &std::collections::BTreeSet<ProvNodeId>) -> String {
    let nodes: Vec<ProvNode> =
        graph.nodes().filter(|n| keep.contains(&n.id)).cloned().collect();
    let edges: Vec<ProvEdge> = graph
        .edges()
        .iter()
        .filter(|e| keep.contains(&e.from) && keep.contains(&e.to))
        .cloned()
        .collect();
    ProvenanceGraph::from_parts(nodes, edges)
        .expect("subgraph of a DAG is a DAG")
        .export_dot(DotScope::Whole)
        .expect("whole scope always resolves")
}

fn event_json(event: &LedgerEvent) -> Json {
    let mut value = match event {
        LedgerEvent::ParticipantRegistered { participant, verifying_key } => json!({
            "participant": participant,
            "verifying_key": hex::encode(verifying_key),
        }),
        LedgerEvent::AccountFunded { participant, amount } => json!({
            "participant": participant,
            "amount": amount,
        }),
        LedgerEvent::BomRegistered { bom_ref } => json!({ "bom_ref": bom_ref }),
        LedgerEvent::BolOpened { bom_ref } => json!({ "bom_ref": bom_ref }),
        LedgerEvent::ShadowRecorded { bol_id, shadow } => json!({
            "bol_id": bol_id.to_string(),
            "node": shadow.node,
            "value_ref": shadow.value.effective_ref(),
            "recorded_at": shadow.recorded_at,
            "provenance": provenance_json(&shadow.provenance),
        }),
        LedgerEvent::BolSealed { bol_id, bol_hash } => json!({
            "bol_id": bol_id.to_string(),
            "bol_hash": bol_hash,
        }),
        LedgerEvent::BolAborted { bol_id, reason } => json!({
            "bol_id": bol_id.to_string(),
            "reason": reason,
        }),
        LedgerEvent::ContractDeployed { provider, price, max_response_ms, interface_ref } => {
            json!({
                "provider": provider,
                "price": price,
                "max_response_ms": max_response_ms,
                "interface_ref": interface_ref,
            })
        }
        LedgerEvent::DataRequested { contract, requester, params_ref, escrow_amount } => json!({
            "contract": contract.to_string(),
            "requester": requester,
            "params_ref": params_ref,
            "escrow_amount": escrow_amount,
        }),
        LedgerEvent::DataDelivered { request_id, payload_ref, elapsed_ms } => json!({
            "request_id": request_id.to_string(),
            "payload_ref": payload_ref,
            "elapsed_ms": elapsed_ms,
        }),
        LedgerEvent::PaymentSettled { request_id, from, to, amount } => json!({
            "request_id": request_id.to_string(),
            "from": from,
            "to": to,
            "amount": amount,
        }),
        LedgerEvent::PaymentRefunded { request_id, amount } => json!({
            "request_id": request_id.to_string(),
            "amount": amount,
        }),
        LedgerEvent::QosViolation { request_id, elapsed_ms, limit_ms } => json!({
            "request_id": request_id.to_string(),
            "elapsed_ms": elapsed_ms,
            "limit_ms": limit_ms,
        }),
    };
    value
        .as_object_mut()
        .expect("event views are objects")
        .insert("type".into(), json!(event.label()));
    value
}

fn entry_json(entry: &LedgerEntry) -> Json {
    json!({
        "seq": entry.seq,
        "timestamp": entry.timestamp,
        "author": entry.author,
        "event": event_json(&entry.event),
        "prev_hash": entry.prev_hash,
        "entry_hash": entry.entry_hash,
        "signature": hex::encode(entry.signature.to_bytes()),
    })
}

fn outcome_report(format: Format, outcome: &DeliveryOutcome, amount: Money) {
    match format {
        Format::Text => match outcome {
            DeliveryOutcome::Accepted { payload_ref } => {
                println!("settled amount={amount} payload={payload_ref}")
            }
            DeliveryOutcome::RejectedLate { elapsed_ms, limit_ms } => {
                println!("refunded amount={amount} elapsed_ms={elapsed_ms} limit_ms={limit_ms}")
            }
        },
        Format::Json => {
            let value = match outcome {
                DeliveryOutcome::Accepted { payload_ref } => json!({
                    "schema": "provchain.delivery.v1",
                    "status": "settled",
                    "amount": amount,
                    "payload_ref": payload_ref,
                }),
                DeliveryOutcome::RejectedLate { elapsed_ms, limit_ms } => json!({
                    "schema": "provchain.delivery.v1",
                    "status": "refunded",
                    "amount": amount,
                    "elapsed_ms": elapsed_ms,
                    "limit_ms": limit_ms,
                }),
            };
            emit_json(value);
        }
    }
}

// ---------------------------------------------------------------------------
// Dispatch

fn main() -> ExitCode {
    // Die quietly when a downstream pipe closes instead of panicking on
    // EPIPE.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            if !failure.message.is_empty() {
                eprintln!("error: {}", failure.message);
            }
            ExitCode::from(failure.code)
        }
    }
}

/// Per-invocation settings the subcommand handlers need.
struct Ctx {
    clock: Option<ClockMode>,
    author: ParticipantId,
}

fn run(cli: Cli) -> Result<(), Failure> {
    let Cli { data_dir, clock, author, command } = cli;
    let ctx = Ctx { clock, author };
    match command {
        Command::Bom { command } => bom_command(&ctx, &data_dir, command),
        Command::Bol { command } => bol_command(&ctx, &data_dir, command),
        Command::Trace { bol_id, node_id, depth, format } => {
            query_command(&data_dir, bol_id, node_id, depth, format, true)
        }
        Command::Track { bol_id, node_id, depth, format } => {
            query_command(&data_dir, bol_id, node_id, depth, format, false)
        }
        Command::Cost { bol_id, format } => {
            let (_dir, engine) = Dir::readable(&data_dir)?;
            let graph = graph_of(&engine)?;
            let total = graph.cost_rollup(engine.ledger(), bol_id)?;
            match format.format {
                Format::Text => println!("{total}"),
                Format::Json => emit_json(json!({
                    "schema": "provchain.cost.v1",
                    "bol_id": bol_id.to_string(),
                    "total": total,
                })),
            }
            Ok(())
        }
        Command::Ledger { command } => ledger_command(&data_dir, command),
        Command::Blob { command } => blob_command(&ctx, &data_dir, command),
        Command::Account { command } => account_command(&ctx, &data_dir, command),
        Command::Contract { command } => contract_command(&ctx, &data_dir, command),
        Command::Scenario { command } => scenario_command(&ctx, &data_dir, command),
        Command::Export { command } => export_command(&data_dir, command),
    }
}

fn bom_command(cli: &Ctx, data_dir: &Path, command: BomCommand) -> Result<(), Failure> {
    match command {
        BomCommand::Validate { file, format } => {
            let text = String::from_utf8_lossy(&read_file(&file)?).into_owned();
            let def = bomfile::parse_bom_file(&text)?;
            let bom = validate_bom(def).map_err(|e| Failure::domain(e.to_string()))?;
            emit_ref(format.format, "bom", bom.content_ref());
            Ok(())
        }
        BomCommand::Register { file, format } => {
            let text = String::from_utf8_lossy(&read_file(&file)?).into_owned();
            let def = bomfile::parse_bom_file(&text)?;
            let (_dir, mut engine) = Dir::writable(data_dir, cli.clock)?;
            let bom_ref = engine.register_bom(def, &cli.author)?;
            emit_ref(format.format, "bom", bom_ref);
            Ok(())
        }
    }
}

fn bol_command(cli: &Ctx, data_dir: &Path, command: BolCommand) -> Result<(), Failure> {
    match command {
        BolCommand::Open { bom_ref, format } => {
            let (_dir, mut engine) = Dir::writable(data_dir, cli.clock)?;
            let at = engine.now_ms();
            let bol = engine.open_bol(bom_ref, &cli.author, at)?;
            emit_ref(format.format, "bol", bol);
            Ok(())
        }
        BolCommand::Record { bol_id, node_id, text, file, blob, origin, computed, delivered } => {
            let (_dir, mut engine) = Dir::writable(data_dir, cli.clock)?;
            let value = if let Some(text) = text {
                ShadowValue::Inline { bytes: text.into_bytes() }
            } else if let Some(path) = file {
                let bytes = read_file(&path)?;
                if bytes.len() <= provchain_core::model::INLINE_THRESHOLD {
                    ShadowValue::Inline { bytes }
                } else {
                    ShadowValue::Blob { content_ref: engine.blobs().put(&bytes).map_err(EngineError::from)? }
                }
            } else {
                ShadowValue::Blob { content_ref: blob.expect("clap enforces the value group") }
            };
            let provenance = if let Some(origin) = origin {
                Provenance::Fetched { origin }
            } else if let Some(assembly) = computed {
                Provenance::Computed { assembly }
            } else {
                Provenance::Delivered {
                    request_id: delivered.expect("clap enforces the provenance group"),
                }
            };
            let at = engine.now_ms();
            engine.record_shadow(bol_id, node_id, value, provenance, &cli.author, at)?;
            Ok(())
        }
        BolCommand::Seal { bol_id, format } => {
            let (_dir, mut engine) = Dir::writable(data_dir, cli.clock)?;
            let at = engine.now_ms();
            let bol_hash = engine.seal_bol(bol_id, &cli.author, at)?;
            emit_ref(format.format, "bol-hash", bol_hash);
            Ok(())
        }
        BolCommand::Abort { bol_id, reason } => {
            let (_dir, mut engine) = Dir::writable(data_dir, cli.clock)?;
            let at = engine.now_ms();
            engine.abort_bol(bol_id, reason, &cli.author, at)?;
            Ok(())
        }
        BolCommand::Show { bol_id, format } => {
            let (_dir, engine) = Dir::readable(data_dir)?;
            let record = engine
                .bol(&bol_id)
                .ok_or_else(|| Failure::domain(format!("no BoL {bol_id}")))?;
            show_bol(record, format.format);
            Ok(())
        }
    }
}

fn query_command(
    data_dir: &Path,
    bol_id: BolId,
    node_id: NodeId,
    depth: Option<u32>,
    format: TraceFormat,
    backwards: bool,
) -> Result<(), Failure> {
    let (_dir, engine) = Dir::readable(data_dir)?;
    let graph = graph_of(&engine)?;
    let id = ProvNodeId::new(bol_id, node_id);
    if backwards {
        let tree = graph.trace(&id, depth)?;
        match format {
            TraceFormat::Tree => {
                let mut out = String::new();
                tree_lines(&tree, 0, &mut out);
                print!("{out}");
            }
            TraceFormat::Json => emit_json(json!({
                "schema": "provchain.trace.v1",
                "root": id,
                "max_depth": depth,
                "tree": tree,
                "ancestors": tree.node_ids().iter().filter(|n| **n != id).collect::<Vec<_>>(),
            })),
            TraceFormat::Dot => print!("{}", induced_dot(&graph, &tree.node_ids())),
        }
    } else {
        let set = graph.track(&id, depth)?;
        match format {
            TraceFormat::Tree => {
                println!("{id}");
                for member in &set.members {
                    println!("  {member}");
                }
            }
            TraceFormat::Json => emit_json(json!({
                "schema": "provchain.track.v1",
                "root": id,
                "max_depth": depth,
                "descendants": set.members,
            })),
            TraceFormat::Dot => {
                let mut keep = set.members.clone();
                keep.insert(id);
                print!("{}", induced_dot(&graph, &keep));
            }
        }
    }
    Ok(())
}

fn ledger_command(data_dir: &Path, command: LedgerCommand) -> Result<(), Failure> {
    let (dir, _engine) = match command {
        // Verification must reach the raw file even when replay would
        // refuse the directory, so it bypasses the engine.
        LedgerCommand::Verify { format } => {
            if !Engine::exists(data_dir) {
                return Err(Failure::domain(format!(
                    "no data directory at {} (run a mutating command first)",
                    data_dir.display()
                )));
            }
            let dir = Dir::lock(data_dir, false)?;
            return verify_ledger(&dir, format.format);
        }
        LedgerCommand::Dump { format } => {
            let (dir, engine) = Dir::readable(data_dir)?;
            match format.format {
                Format::Json => {
                    let entries: Vec<Json> =
                        engine.ledger().entries().iter().map(entry_json).collect();
                    emit_json(json!({
                        "schema": "provchain.ledger-dump.v1",
                        "entries": entries,
                    }));
                }
                Format::Text => {
                    for entry in engine.ledger().entries() {
                        println!(
                            "seq={} ts={} author={} event={} hash={}",
                            entry.seq,
                            entry.timestamp,
                            entry.author,
                            entry.event.label(),
                            entry.entry_hash.short(),
                        );
                    }
                }
            }
            (dir, engine)
        }
    };
    drop(dir);
    Ok(())
}

fn verify_ledger(dir: &Dir, format: Format) -> Result<(), Failure> {
    let report = match Ledger::load(&dir.ledger_path()) {
        Ok(ledger) => match ledger.verify() {
            VerificationReport::Ok => {
                match format {
                    Format::Text => println!("ok entries={}", ledger.entries().len()),
                    Format::Json => emit_json(json!({
                        "schema": "provchain.verify.v1",
                        "status": "ok",
                        "entries": ledger.entries().len(),
                    })),
                }
                return Ok(());
            }
            VerificationReport::Violation { seq, cause } => (seq, cause.to_string()),
        },
        // A record that no longer decodes or re-encodes to the same bytes
        // was tampered with just like one whose hash broke.
        Err(LedgerFileError::Undecodable { seq, .. }) => (seq, "HashMismatch".to_string()),
        Err(LedgerFileError::BadMagic) => (0, "HashMismatch".to_string()),
        Err(e) => return Err(Failure::integrity(e.to_string())),
    };
    let (seq, cause) = report;
    match format {
        Format::Text => println!("violation at seq={seq} cause={cause}"),
        Format::Json => emit_json(json!({
            "schema": "provchain.verify.v1",
            "status": "violation",
            "seq": seq,
            "cause": cause,
        })),
    }
    Err(Failure::silent(2))
}

fn blob_command(cli: &Ctx, data_dir: &Path, command: BlobCommand) -> Result<(), Failure> {
    match command {
        BlobCommand::Put { file, format } => {
            let bytes = read_file(&file)?;
            let (_dir, engine) = Dir::writable(data_dir, cli.clock)?;
            let content_ref = engine.blobs().put(&bytes).map_err(EngineError::from)?;
            emit_ref(format.format, "blob", content_ref);
            Ok(())
        }
        BlobCommand::Get { content_ref, out } => {
            let (_dir, engine) = Dir::readable(data_dir)?;
            let bytes = engine.blobs().get(&content_ref).map_err(EngineError::from)?;
            match out {
                Some(path) => fs::write(path, bytes)?,
                None => std::io::stdout().write_all(&bytes)?,
            }
            Ok(())
        }
    }
}

fn account_command(cli: &Ctx, data_dir: &Path, command: AccountCommand) -> Result<(), Failure> {
    match command {
        AccountCommand::Register { id } => {
            let (_dir, mut engine) = Dir::writable(data_dir, cli.clock)?;
            engine.register_participant(&id)?;
            Ok(())
        }
        AccountCommand::Fund { id, amount, format } => {
            let (_dir, mut engine) = Dir::writable(data_dir, cli.clock)?;
            let balance = engine.fund_account(&id, amount)?;
            report_balance(format.format, &id, balance);
            Ok(())
        }
        AccountCommand::Balance { id, format } => {
            let (_dir, engine) = Dir::readable(data_dir)?;
            let balance = engine
                .book()
                .balance(&id)
                .ok_or_else(|| Failure::domain(format!("participant `{id}` is not registered")))?;
            report_balance(format.format, &id, balance);
            Ok(())
        }
    }
}

fn report_balance(format: Format, id: &ParticipantId, balance: Money) {
    match format {
        Format::Text => println!("{balance}"),
        Format::Json => emit_json(json!({
            "schema": "provchain.balance.v1",
            "participant": id,
            "balance": balance,
        })),
    }
}

fn contract_command(cli: &Ctx, data_dir: &Path, command: ContractCommand) -> Result<(), Failure> {
    match command {
        ContractCommand::Deploy { provider, price, max_response_ms, interface, format } => {
            let bytes = read_file(&interface)?;
            let (_dir, mut engine) = Dir::writable(data_dir, cli.clock)?;
            let at = engine.now_ms();
            let address = engine.deploy_contract(&provider, price, max_response_ms, &bytes, at)?;
            emit_ref(format.format, "contract", address);
            Ok(())
        }
        ContractCommand::Request { requester, contract, params, format } => {
            let bytes = read_file(&params)?;
            let (_dir, mut engine) = Dir::writable(data_dir, cli.clock)?;
            let at = engine.now_ms();
            let request_id = engine.request_data(&requester, contract, &bytes, at)?;
            emit_ref(format.format, "request", request_id);
            Ok(())
        }
        ContractCommand::Deliver { request, payload, format } => {
            let bytes = read_file(&payload)?;
            let (_dir, mut engine) = Dir::writable(data_dir, cli.clock)?;
            let amount = engine
                .book()
                .request(&request)
                .map(|r| r.escrow)
                .unwrap_or_default();
            let at = engine.now_ms();
            let outcome = engine.deliver_data(request, &bytes, at)?;
            outcome_report(format.format, &outcome, amount);
            Ok(())
        }
        ContractCommand::Expire { request, format } => {
            let (_dir, mut engine) = Dir::writable(data_dir, cli.clock)?;
            let amount = engine
                .book()
                .request(&request)
                .map(|r| r.escrow)
                .unwrap_or_default();
            let at = engine.now_ms();
            let outcome = engine.expire_request(request, at)?;
            outcome_report(format.format, &outcome, amount);
            Ok(())
        }
    }
}

fn scenario_command(cli: &Ctx, data_dir: &Path, command: ScenarioCommand) -> Result<(), Failure> {
    let ScenarioCommand::Run { name, runs, out, format } = command;
    let target = out.unwrap_or_else(|| data_dir.to_path_buf());
    // Scenario directories default to a fixed clock so two clean runs are
    // byte-identical.
    let clock = cli.clock.unwrap_or(ClockMode::Fixed { start_ms: 1_000, step_ms: 1_000 });
    let (dir, mut engine) = Dir::writable(&target, Some(clock))?;
    let bols = scenarios::run(&mut engine, name, runs)?;

    let graph = graph_of(&engine)?;
    let dot_path = dir.path.join("provenance.dot");
    fs::write(&dot_path, graph.export_dot(DotScope::Whole)?)?;

    match format.format {
        Format::Text => {
            println!("scenario {name}");
            for bol in &bols {
                println!("bol {bol}");
            }
            println!("entries {}", engine.ledger().entries().len());
            println!("dot {}", dot_path.display());
        }
        Format::Json => emit_json(json!({
            "schema": "provchain.scenario.v1",
            "name": name.label(),
            "bols": bols.iter().map(|b| b.to_string()).collect::<Vec<_>>(),
            "entries": engine.ledger().entries().len(),
            "dot": dot_path.display().to_string(),
        })),
    }
    Ok(())
}

fn export_command(data_dir: &Path, command: ExportCommand) -> Result<(), Failure> {
    let ExportCommand::Dot { bol, out } = command;
    let (_dir, engine) = Dir::readable(data_dir)?;
    let graph = graph_of(&engine)?;
    let scope = match bol {
        Some(bol_id) => DotScope::Bol(bol_id),
        None => DotScope::Whole,
    };
    let dot = graph.export_dot(scope)?;
    match out {
        Some(path) => fs::write(path, dot)?,
        None => print!("{dot}"),
    }
    Ok(())
}
