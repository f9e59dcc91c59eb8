//! Acceptance suite: one test per release criterion. Each prints a
//! `[acceptance] ... PASS` line with the measured figures (visible with
//! `cargo test -- --nocapture`); a failed criterion fails its test.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use provchain_core::blobstore::{BlobError, BlobStore};
use provchain_core::clock::ClockMode;
use provchain_core::contracts::{ContractError, DeliveryOutcome, Money, RequestState};
use provchain_core::engine::{Engine, EngineConfig, EngineError};
use provchain_core::hash::ContentRef;
use provchain_core::ids::{BolId, RequestId};
use provchain_core::ledger::{Ledger, LedgerEvent, LedgerFileError, ParticipantId, VerificationReport};
use provchain_core::model::{
    AccessSpec, ArtifactDef, ArtifactKind, AssemblyDef, BomDef, DataSourceDef, NodeId, Provenance,
    ShadowValue,
};
use provchain_core::scenarios::{self, ScenarioName};
use provchain_core::trace::{EdgeKind, ProvEdge, ProvKind, ProvNode, ProvNodeId, ProvenanceGraph};

fn provchain(dir: &Path, args: &[&str]) -> (i32, String) {
    let output = Command::new(env!("CARGO_BIN_EXE_provchain"))
        .env_remove("PROVCHAIN_DATA_DIR")
        .arg("--data-dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs");
    (
        output.status.code().expect("exit code"),
        String::from_utf8_lossy(&output.stdout).into_owned(),
    )
}

fn participant(id: &str) -> ParticipantId {
    id.parse().expect("valid participant id")
}

fn node(id: &str) -> NodeId {
    id.parse().expect("valid node id")
}

fn fixed_engine(dir: &Path) -> Engine {
    Engine::open(
        EngineConfig::new(dir).with_clock(ClockMode::Fixed { start_ms: 1_000, step_ms: 1_000 }),
    )
    .expect("engine opens")
}

// ---------------------------------------------------------------------------
// Criterion 1: tamper evidence

/// Which entry owns the byte at `offset`, counting each record's length
/// prefix as part of it. The magic belongs to seq 0.
fn seq_of_offset(bytes: &[u8], offset: usize) -> u64 {
    if offset < 4 {
        return 0;
    }
    let mut pos = 4usize;
    let mut seq = 0u64;
    loop {
        let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        let end = pos + 4 + len;
        if offset < end {
            return seq;
        }
        pos = end;
        seq += 1;
    }
}

/// First violated seq, however the failure surfaces: a record that no
/// longer loads counts the same as one whose chain breaks.
fn first_bad_seq(path: &Path) -> Option<u64> {
    match Ledger::load(path) {
        Err(LedgerFileError::BadMagic) => Some(0),
        Err(LedgerFileError::Undecodable { seq, .. }) => Some(seq),
        Err(e) => panic!("unexpected io failure: {e}"),
        Ok(ledger) => match ledger.verify() {
            VerificationReport::Ok => None,
            VerificationReport::Violation { seq, .. } => Some(seq),
        },
    }
}

#[test]
fn acceptance_1_tamper_evidence() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let budget = Duration::from_secs(30);

    // Base ledgers of 54..494 entries (6 + 8 per scenario run).
    let mut bases = Vec::new();
    for runs in [6u32, 12, 24, 37, 50, 61] {
        let tmp = TempDir::new().unwrap();
        let mut engine = fixed_engine(tmp.path());
        scenarios::run(&mut engine, ScenarioName::HpcCs, runs).unwrap();
        let entries = engine.ledger().entries().len();
        assert!((50..=500).contains(&entries), "base size {entries}");
        let pristine = fs::read(tmp.path().join("ledger.pcl")).unwrap();
        assert_eq!(first_bad_seq(&tmp.path().join("ledger.pcl")), None, "untampered must verify");
        bases.push((tmp, pristine));
    }

    let scratch = TempDir::new().unwrap();
    let mutated_path = scratch.path().join("mutated.pcl");
    let mut detected = 0u32;
    let total = 1_002u32;
    for i in 0..total {
        let (_, pristine) = &bases[(i as usize) % bases.len()];
        let offset = rng.gen_range(0..pristine.len());
        let mut copy = pristine.clone();
        copy[offset] ^= rng.gen_range(1..=255u8);
        fs::write(&mutated_path, &copy).unwrap();
        let mutated_seq = seq_of_offset(pristine, offset);
        match first_bad_seq(&mutated_path) {
            Some(seq) => {
                assert!(
                    seq <= mutated_seq,
                    "first bad seq {seq} past mutated seq {mutated_seq} (offset {offset})"
                );
                detected += 1;
            }
            None => panic!("mutation at offset {offset} went undetected"),
        }
    }
    assert_eq!(detected, total, "every mutation must be detected");

    // The same detection through the actual subcommand.
    for (tmp, pristine) in &bases[..3] {
        let ledger = tmp.path().join("ledger.pcl");
        let offset = rng.gen_range(0..pristine.len());
        let mut copy = pristine.clone();
        copy[offset] ^= 0x01;
        fs::write(&ledger, &copy).unwrap();
        let (code, stdout) = provchain(tmp.path(), &["ledger", "verify"]);
        assert_eq!(code, 2);
        let line = stdout.trim_end();
        let seq: u64 = line
            .strip_prefix("violation at seq=")
            .and_then(|rest| rest.split_whitespace().next())
            .and_then(|s| s.parse().ok())
            .unwrap_or_else(|| panic!("unexpected verify output: {line}"));
        assert!(seq <= seq_of_offset(pristine, offset));
        fs::write(&ledger, pristine).unwrap();
        let (code, stdout) = provchain(tmp.path(), &["ledger", "verify"]);
        assert_eq!((code, stdout.starts_with("ok entries=")), (0, true));
    }

    let elapsed = started.elapsed();
    assert!(elapsed < budget, "took {elapsed:?}, budget {budget:?}");
    println!(
        "[acceptance] criterion 1 (tamper evidence): PASS - {detected}/{total} mutations detected in {elapsed:?}"
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: trace/track duality

fn synth_bol(i: usize) -> BolId {
    BolId::from_entry_hash(ContentRef::of(format!("synthetic-bol-{i}").as_bytes()))
}

#[test]
fn acceptance_2_duality_against_closure_oracle() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let budget = Duration::from_secs(60);
    let graphs = 100;

    for round in 0..graphs {
        let n = rng.gen_range(10..=100usize);
        let bols: Vec<BolId> = (0..rng.gen_range(2..=5usize)).map(synth_bol).collect();
        let ids: Vec<ProvNodeId> = (0..n)
            .map(|i| ProvNodeId::new(bols[i % bols.len()], node(&format!("n{i}"))))
            .collect();
        let nodes: Vec<ProvNode> = ids
            .iter()
            .enumerate()
            .map(|(i, id)| ProvNode {
                id: id.clone(),
                kind: match i % 3 {
                    0 => ProvKind::DataSourceInstance,
                    1 => ProvKind::ArtifactInstance,
                    _ => ProvKind::AssemblyInstance,
                },
                content: None,
                aborted: false,
            })
            .collect();

        // Forward-only edges keep the graph acyclic by construction.
        let density = 3.0 / n as f64;
        let mut edges = Vec::new();
        let mut adjacency = vec![vec![false; n]; n];
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.gen_bool(density) {
                    let kind = if ids[i].bol_id == ids[j].bol_id {
                        EdgeKind::FeedsAssembly
                    } else {
                        EdgeKind::CrossBolContentMatch
                    };
                    edges.push(ProvEdge { from: ids[i].clone(), to: ids[j].clone(), kind });
                    adjacency[i][j] = true;
                }
            }
        }
        let graph = ProvenanceGraph::from_parts(nodes, edges).expect("synthetic DAG");

        // Dumb closure oracle: Floyd-Warshall over the adjacency matrix.
        // Index loops keep the matrix arithmetic recognisable.
        #[allow(clippy::needless_range_loop)]
        let reach = {
            let mut reach = adjacency;
            for k in 0..n {
                for i in 0..n {
                    if reach[i][k] {
                        for j in 0..n {
                            if reach[k][j] {
                                reach[i][j] = true;
                            }
                        }
                    }
                }
            }
            reach
        };

        let ancestor_sets: Vec<BTreeSet<ProvNodeId>> =
            ids.iter().map(|id| graph.ancestors(id).unwrap()).collect();
        let descendant_sets: Vec<BTreeSet<ProvNodeId>> =
            ids.iter().map(|id| graph.descendants(id).unwrap()).collect();

        for i in 0..n {
            let oracle_anc: BTreeSet<ProvNodeId> =
                (0..n).filter(|&j| reach[j][i]).map(|j| ids[j].clone()).collect();
            let oracle_desc: BTreeSet<ProvNodeId> =
                (0..n).filter(|&j| reach[i][j]).map(|j| ids[j].clone()).collect();
            assert_eq!(ancestor_sets[i], oracle_anc, "round {round} ancestors of {}", ids[i]);
            assert_eq!(descendant_sets[i], oracle_desc, "round {round} descendants of {}", ids[i]);
        }
        for i in 0..n {
            for j in 0..n {
                assert_eq!(
                    ancestor_sets[j].contains(&ids[i]),
                    descendant_sets[i].contains(&ids[j]),
                    "duality broken between {} and {}",
                    ids[i],
                    ids[j]
                );
            }
        }
    }

    let elapsed = started.elapsed();
    assert!(elapsed < budget, "took {elapsed:?}, budget {budget:?}");
    println!(
        "[acceptance] criterion 2 (trace/track duality): PASS - {graphs} graphs matched the closure oracle in {elapsed:?}"
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: congestion-scoring golden scenario

#[test]
fn acceptance_3_hpc_cs_golden_scenario() {
    let run = |dir: &Path| -> Vec<String> {
        let (code, stdout) = provchain(dir, &["scenario", "run", "hpc-cs", "--runs", "10"]);
        assert_eq!(code, 0, "scenario failed: {stdout}");
        stdout.lines().filter_map(|l| l.strip_prefix("bol ").map(str::to_string)).collect()
    };
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let bols = run(a.path());
    let bols_b = run(b.path());
    assert_eq!(bols.len(), 10);
    assert_eq!(bols, bols_b, "two clean executions must name the same BoLs");
    assert_eq!(
        fs::read(a.path().join("ledger.pcl")).unwrap(),
        fs::read(b.path().join("ledger.pcl")).unwrap(),
        "two clean executions must write byte-identical ledgers"
    );

    let engine = Engine::open(EngineConfig::new(a.path())).unwrap();
    let graph = ProvenanceGraph::build(engine.ledger(), engine.blobs()).unwrap();
    let shadow_names: BTreeSet<&str> =
        ["location-photo", "congestion-model", "congestion-score"].into();
    for bol in &bols {
        let bol_id: BolId = bol.parse().unwrap();
        let record = engine.bol(&bol_id).expect("scenario BoL exists");
        assert!(
            matches!(record.status, provchain_core::model::BolStatus::Sealed { .. }),
            "{bol} not sealed"
        );
        let recorded: BTreeSet<&str> =
            record.shadows.keys().map(|n| n.as_str()).collect();
        assert_eq!(recorded, shadow_names, "{bol} shadows");

        let ancestors = graph
            .ancestors(&ProvNodeId::new(bol_id, node("congestion-score")))
            .unwrap();
        let expected: BTreeSet<ProvNodeId> =
            ["location-photo", "congestion-model", "traffic-scene-analysis"]
                .into_iter()
                .map(|n| ProvNodeId::new(bol_id, node(n)))
                .collect();
        assert_eq!(ancestors, expected, "{bol} ancestry");
    }

    println!(
        "[acceptance] criterion 3 (hpc-cs golden scenario): PASS - 10 sealed BoLs, exact ancestries, byte-identical reruns"
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: fusion golden scenario

#[test]
fn acceptance_4_fusion_golden_scenario() {
    let tmp = TempDir::new().unwrap();
    let (code, stdout) = provchain(tmp.path(), &["scenario", "run", "fusion-ai"]);
    assert_eq!(code, 0, "scenario failed: {stdout}");
    let fused_bol: BolId = stdout
        .lines()
        .find_map(|l| l.strip_prefix("bol "))
        .expect("scenario prints the fusion BoL")
        .parse()
        .unwrap();

    let engine = Engine::open(EngineConfig::new(tmp.path())).unwrap();
    let graph = ProvenanceGraph::build(engine.ledger(), engine.blobs()).unwrap();

    let fused = ProvNodeId::new(fused_bol, node("fused-model"));
    let ancestors = graph.ancestors(&fused).unwrap();
    let sources: Vec<&ProvNodeId> =
        ancestors.iter().filter(|a| a.node.as_str() == "source-data").collect();
    let source_bols: BTreeSet<BolId> = sources.iter().map(|a| a.bol_id).collect();
    assert_eq!(source_bols.len(), 3, "each member's source data must be reached");

    // Two boundaries: preparation and training BoLs both sit between the
    // sources and the fusion run.
    let ancestor_bols: BTreeSet<BolId> = ancestors.iter().map(|a| a.bol_id).collect();
    assert!(!ancestor_bols.contains(&fused_bol) || ancestor_bols.len() > 1);
    assert_eq!(
        ancestor_bols.iter().filter(|b| **b != fused_bol).count(),
        6,
        "three prep and three training BoLs upstream"
    );

    for source in sources {
        let descendants = graph.descendants(source).unwrap();
        assert!(
            descendants.contains(&fused),
            "track from {source} must contain the fused output"
        );
    }

    let record = engine.bol(&fused_bol).unwrap();
    assert!(
        record.shadows.keys().any(|n| n.as_str() == "fusing-factors"),
        "fusing-factors shadow missing"
    );

    println!(
        "[acceptance] criterion 4 (fusion golden scenario): PASS - 3 member sources reached across 2 boundaries, fused output tracked back, fusing-factors present"
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: payment conservation and QoS boundaries

#[test]
fn acceptance_5_payment_conservation_and_qos() {
    let tmp = TempDir::new().unwrap();
    let mut engine = fixed_engine(tmp.path());
    let mut rng = ChaCha8Rng::seed_from_u64(55);

    let provider = participant("provider");
    let buyers: Vec<ParticipantId> =
        (0..3).map(|i| participant(&format!("buyer-{i}"))).collect();
    engine.register_participant(&provider).unwrap();
    for buyer in &buyers {
        engine.register_participant(buyer).unwrap();
        engine.fund_account(buyer, 500).unwrap();
    }
    let mut now = engine.now_ms();
    let contracts: Vec<_> = [(3u64, 100u64), (7, 250), (11, 400)]
        .iter()
        .map(|&(price, limit)| {
            now += 10;
            engine.deploy_contract(&provider, price, limit, b"{}", now).unwrap()
        })
        .collect();

    let conserved = |engine: &Engine| {
        assert!(
            engine.book().conserves_supply(),
            "conservation broken: balances {} + escrow {} != supply {}",
            engine.book().balances_total(),
            engine.book().escrow_total(),
            engine.book().total_supply()
        );
    };
    conserved(&engine);

    let mut ops = 0u32;
    for _ in 0..300 {
        now += rng.gen_range(1..80);
        let pending: Vec<RequestId> = engine
            .book()
            .requests()
            .filter(|r| r.state == RequestState::Pending)
            .map(|r| r.id)
            .collect();
        let action = rng.gen_range(0..10);
        if action < 5 || pending.is_empty() {
            let buyer = &buyers[rng.gen_range(0..buyers.len())];
            let contract = contracts[rng.gen_range(0..contracts.len())];
            match engine.request_data(buyer, contract, b"{}", now) {
                Ok(_) => {}
                Err(EngineError::Contract(ContractError::InsufficientFunds { .. })) => {
                    // Funding stamps its own ledger time; catch up to it.
                    engine.fund_account(buyer, 100).unwrap();
                    now = now.max(engine.now_ms());
                }
                Err(e) => panic!("unexpected request failure: {e}"),
            }
        } else if action < 8 {
            let rid = pending[rng.gen_range(0..pending.len())];
            match engine.deliver_data(rid, b"payload", now) {
                Ok(DeliveryOutcome::Accepted { .. })
                | Ok(DeliveryOutcome::RejectedLate { .. }) => {}
                Err(e) => panic!("unexpected delivery failure: {e}"),
            }
        } else {
            let rid = pending[rng.gen_range(0..pending.len())];
            match engine.expire_request(rid, now) {
                Ok(_) => {}
                Err(EngineError::Contract(ContractError::NotYetExpired { .. })) => {}
                Err(e) => panic!("unexpected expiry failure: {e}"),
            }
        }
        ops += 1;
        conserved(&engine);
    }

    // Drain so every request reaches a terminal event exactly once.
    loop {
        let pending: Vec<RequestId> = engine
            .book()
            .requests()
            .filter(|r| r.state == RequestState::Pending)
            .map(|r| r.id)
            .collect();
        if pending.is_empty() {
            break;
        }
        for rid in pending {
            now += rng.gen_range(1..500);
            if rng.gen_bool(0.5) {
                engine.deliver_data(rid, b"late or not", now).unwrap();
            } else {
                match engine.expire_request(rid, now) {
                    Ok(_) => {}
                    Err(EngineError::Contract(ContractError::NotYetExpired { .. })) => {
                        engine.deliver_data(rid, b"fallback", now).unwrap();
                    }
                    Err(e) => panic!("unexpected drain failure: {e}"),
                }
            }
            ops += 1;
            conserved(&engine);
        }
    }
    assert!(ops >= 200, "only {ops} operations exercised");

    // Exactly-once settlement, checked from the ledger itself.
    let mut terminal: BTreeMap<RequestId, u32> = BTreeMap::new();
    let mut requested = 0u32;
    for entry in engine.ledger().entries() {
        match &entry.event {
            LedgerEvent::DataRequested { .. } => requested += 1,
            LedgerEvent::PaymentSettled { request_id, .. }
            | LedgerEvent::PaymentRefunded { request_id, .. } => {
                *terminal.entry(*request_id).or_default() += 1;
            }
            _ => {}
        }
    }
    assert_eq!(terminal.len() as u32, requested, "every request must terminate");
    assert!(terminal.values().all(|&n| n == 1), "a request terminated twice");

    // Boundary behaviour, pinned exactly.
    let buyer = &buyers[0];
    engine.fund_account(buyer, 100).unwrap();
    now = now.max(engine.now_ms()) + 10;
    let addr = engine.deploy_contract(&provider, 5, 200, b"{}", now).unwrap();

    let rid = engine.request_data(buyer, addr, b"{}", now).unwrap();
    let outcome = engine.deliver_data(rid, b"on the line", now + 200).unwrap();
    assert!(
        matches!(outcome, DeliveryOutcome::Accepted { .. }),
        "elapsed = limit must settle"
    );

    now += 300;
    let rid = engine.request_data(buyer, addr, b"{}", now).unwrap();
    let outcome = engine.deliver_data(rid, b"one ms over", now + 201).unwrap();
    assert!(
        matches!(outcome, DeliveryOutcome::RejectedLate { elapsed_ms: 201, limit_ms: 200 }),
        "elapsed = limit+1 must refund"
    );
    let violated = engine
        .ledger()
        .entries()
        .iter()
        .any(|e| matches!(&e.event, LedgerEvent::QosViolation { request_id, .. } if *request_id == rid));
    assert!(violated, "late delivery must record a QosViolation");

    now += 300;
    let rid = engine.request_data(buyer, addr, b"{}", now).unwrap();
    let err = engine.expire_request(rid, now + 200).unwrap_err();
    assert!(
        matches!(err, EngineError::Contract(ContractError::NotYetExpired { .. })),
        "expiry at the limit must be rejected"
    );
    engine.expire_request(rid, now + 201).unwrap();
    conserved(&engine);

    println!(
        "[acceptance] criterion 5 (payment conservation and QoS): PASS - {ops} random operations conserved supply, exactly-once settlement, boundary pinned"
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: blob round-trip

#[test]
fn acceptance_6_blob_round_trip() {
    let tmp = TempDir::new().unwrap();
    let store = BlobStore::open(tmp.path()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(66);

    const MIB: usize = 1 << 20;
    let mut kept: Vec<(ContentRef, Vec<u8>)> = Vec::new();
    for i in 0..1_000usize {
        let len = match i {
            0 => 0,
            1 => MIB,
            _ if i < 880 => rng.gen_range(0..4096),
            _ => rng.gen_range(0..=MIB),
        };
        let mut bytes = vec![0u8; len];
        rng.fill(bytes.as_mut_slice());
        let content_ref = store.put(&bytes).unwrap();
        assert_eq!(store.get(&content_ref).unwrap(), bytes, "round trip of blob {i}");
        if kept.len() < 8 && !bytes.is_empty() {
            kept.push((content_ref, bytes));
        }
    }

    // Identical content, identical address.
    for (content_ref, bytes) in &kept {
        assert_eq!(store.put(bytes).unwrap(), *content_ref);
    }

    // Damage stored files and expect CorruptBlob on read.
    for (i, (content_ref, _)) in kept.iter().enumerate() {
        let hex = content_ref.to_hex();
        let path = tmp.path().join(&hex[0..2]).join(&hex[2..4]).join(&hex);
        let mut bytes = fs::read(&path).unwrap();
        let offset = i % bytes.len();
        bytes[offset] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        match store.get(content_ref) {
            Err(BlobError::CorruptBlob(found)) => assert_eq!(found, *content_ref),
            other => panic!("corrupted blob read returned {other:?}"),
        }
    }

    println!(
        "[acceptance] criterion 6 (blob round-trip): PASS - 1000 blobs round-tripped, dedup stable, corruption reported"
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: cost rollup

fn rollup_bom() -> BomDef {
    BomDef {
        name: "rollup-case".into(),
        version: "1".into(),
        assemblies: vec![AssemblyDef {
            id: node("aggregate"),
            name: "Aggregate".into(),
            inputs: vec![node("feed-a"), node("feed-b"), node("feed-c")],
            artifacts: vec![],
            outputs: vec![node("report")],
        }],
        data_sources: ["feed-a", "feed-b", "feed-c"]
            .iter()
            .map(|id| DataSourceDef {
                id: node(id),
                name: format!("Feed {id}"),
                access: AccessSpec::StaticUrl { url: format!("https://example.org/{id}") },
                qos: None,
            })
            .chain(std::iter::once(DataSourceDef {
                id: node("report"),
                name: "Report".into(),
                access: AccessSpec::Internal,
                qos: None,
            }))
            .collect(),
        artifacts: vec![ArtifactDef {
            id: node("notebook"),
            name: "Analysis notebook".into(),
            kind: ArtifactKind::Software,
            content_ref: None,
        }],
    }
}

#[test]
fn acceptance_7_cost_rollup() {
    let tmp = TempDir::new().unwrap();
    let mut engine = fixed_engine(tmp.path());
    let operator = participant("operator");
    let provider = participant("data-seller");
    engine.register_participant(&provider).unwrap();
    engine.fund_account(&operator, 100).unwrap();

    let mut now = engine.now_ms();
    let deal = |engine: &mut Engine, price, limit, now: &mut u64| {
        *now += 10;
        engine.deploy_contract(&provider, price, limit, b"{}", *now).unwrap()
    };
    let c10 = deal(&mut engine, 10, 1_000, &mut now);
    let c5 = deal(&mut engine, 5, 1_000, &mut now);
    let c7 = deal(&mut engine, 7, 100, &mut now);

    let buy = |engine: &mut Engine, contract, payload: &[u8], elapsed, now: &mut u64| {
        *now += 10;
        let rid = engine.request_data(&operator, contract, b"{}", *now).unwrap();
        let outcome = engine.deliver_data(rid, payload, *now + elapsed).unwrap();
        *now += elapsed;
        (rid, outcome)
    };
    let (r10, o10) = buy(&mut engine, c10, b"feed a bytes", 50, &mut now);
    let (r5, o5) = buy(&mut engine, c5, b"feed b bytes", 50, &mut now);
    let (r7, o7) = buy(&mut engine, c7, b"feed c bytes", 101, &mut now);
    assert!(matches!(o10, DeliveryOutcome::Accepted { .. }));
    assert!(matches!(o5, DeliveryOutcome::Accepted { .. }));
    assert!(matches!(o7, DeliveryOutcome::RejectedLate { .. }), "third request must refund");

    // Registration stamps its own ledger time; catch up to it.
    let bom_ref = engine.register_bom(rollup_bom(), &operator).unwrap();
    now = now.max(engine.now_ms()) + 10;
    let bol = engine.open_bol(bom_ref, &operator, now).unwrap();
    let record = |engine: &mut Engine, name: &str, bytes: &[u8], prov, now: &mut u64| {
        *now += 10;
        engine
            .record_shadow(
                bol,
                node(name),
                ShadowValue::Inline { bytes: bytes.to_vec() },
                prov,
                &operator,
                *now,
            )
            .unwrap();
    };
    record(&mut engine, "feed-a", b"feed a bytes", Provenance::Delivered { request_id: r10 }, &mut now);
    record(&mut engine, "feed-b", b"feed b bytes", Provenance::Delivered { request_id: r5 }, &mut now);
    record(&mut engine, "feed-c", b"feed c bytes", Provenance::Delivered { request_id: r7 }, &mut now);
    record(&mut engine, "report", b"totals", Provenance::Computed { assembly: node("aggregate") }, &mut now);
    record(&mut engine, "notebook", b"cells", Provenance::Fetched { origin: "repo".into() }, &mut now);
    now += 10;
    engine.seal_bol(bol, &operator, now).unwrap();

    let graph = ProvenanceGraph::build(engine.ledger(), engine.blobs()).unwrap();
    let total = graph.cost_rollup(engine.ledger(), bol).unwrap();
    assert_eq!(total, 15, "settled 10 + 5, refunded 7 excluded");

    // Independent oracle: replay the ledger and sum settled payments for
    // the requests this BoL recorded deliveries from.
    let rids: BTreeSet<RequestId> = [r10, r5, r7].into();
    let replayed: Money = engine
        .ledger()
        .entries()
        .iter()
        .filter_map(|entry| match &entry.event {
            LedgerEvent::PaymentSettled { request_id, amount, .. } if rids.contains(request_id) => {
                Some(*amount)
            }
            _ => None,
        })
        .sum();
    assert_eq!(total, replayed, "rollup must match the replay summation");

    // And through the subcommand.
    let (code, stdout) = provchain(tmp.path(), &["cost", &bol.to_string()]);
    assert_eq!((code, stdout.trim_end()), (0, "15"));

    println!(
        "[acceptance] criterion 7 (cost rollup): PASS - rollup 15 equals the ledger replay oracle"
    );
}
