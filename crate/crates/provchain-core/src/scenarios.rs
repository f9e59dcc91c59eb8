//! Executable end-to-end fixtures: a congestion-scoring system fed by a
//! payable camera contract, a model-training pipeline whose product that
//! system consumes, and a three-party model fusion.
//!
//! Every payload is a generated byte pattern and every participant key is
//! derived from its id, so a scenario executed twice against fixed clocks
//! writes byte-identical ledgers. Scenarios tolerate re-running against a
//! populated directory: BoMs and participants are reused if present.

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::contracts::Money;
use crate::engine::{Engine, EngineError};
use crate::hash::ContentRef;
use crate::ids::BolId;
use crate::ledger::{AppendError, ParticipantId};
use crate::model::{
    AccessSpec, ArtifactDef, ArtifactKind, AssemblyDef, BomDef, DataSourceDef, NodeId,
    Provenance, QosSpec, ShadowValue, Threshold,
};

pub const PHOTO_PRICE: Money = 5;
pub const PHOTO_LIMIT_MS: u64 = 500;
pub const PHOTO_LATENCY_MS: u64 = 120;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioName {
    HpcCs,
    LtcCsTraining,
    FusionAi,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 3] =
        [ScenarioName::HpcCs, ScenarioName::LtcCsTraining, ScenarioName::FusionAi];

    pub fn label(self) -> &'static str {
        match self {
            ScenarioName::HpcCs => "hpc-cs",
            ScenarioName::LtcCsTraining => "ltc-cs-training",
            ScenarioName::FusionAi => "fusion-ai",
        }
    }
}

impl fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownScenario(pub String);

impl fmt::Display for UnknownScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown scenario `{}`, expected one of: hpc-cs, ltc-cs-training, fusion-ai", self.0)
    }
}

impl std::error::Error for UnknownScenario {}

impl FromStr for ScenarioName {
    type Err = UnknownScenario;

    fn from_str(s: &str) -> Result<ScenarioName, UnknownScenario> {
        ScenarioName::ALL
            .into_iter()
            .find(|name| name.label() == s)
            .ok_or_else(|| UnknownScenario(s.to_string()))
    }
}

/// Run a scenario by name. `runs` only affects the congestion scenario;
/// the returned ids are the BoLs a caller would query first.
pub fn run(engine: &mut Engine, name: ScenarioName, runs: u32) -> Result<Vec<BolId>, EngineError> {
    match name {
        ScenarioName::HpcCs => run_hpc_cs(engine, runs),
        ScenarioName::LtcCsTraining => run_ltc_cs_training(engine).map(|b| vec![b]),
        ScenarioName::FusionAi => run_fusion_ai(engine).map(|b| vec![b]),
    }
}

// ---------------------------------------------------------------------------
// Fixture plumbing

/// Deterministic pseudo-content: a hash stream seeded by `tag`.
pub fn fixture_bytes(tag: &str, len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(len);
    let mut block: [u8; 32] = Sha256::digest(tag.as_bytes()).into();
    while out.len() < len {
        out.extend_from_slice(&block);
        block = Sha256::digest(block).into();
    }
    out.truncate(len);
    out
}

/// The stub analysis: one digest byte reduced to a 0..=10 score.
pub fn congestion_score(photo: &[u8]) -> u8 {
    Sha256::digest(photo)[0] % 11
}

/// The model bytes the training scenario produces and the congestion
/// scenario consumes; sharing them is what chains the two case studies.
pub fn trained_model_bytes() -> Vec<u8> {
    fixture_bytes("ltc-cs:trained-model", 2048)
}

/// Every BoM definition the scenarios register, for tests and tooling.
pub fn fixture_bom_defs() -> Vec<BomDef> {
    let mut defs = vec![
        congestion_bom(AccessSpec::StaticUrl { url: "https://example.org/hpc/camera".into() }),
        training_bom(),
        fusion_bom(),
    ];
    for member in MEMBERS {
        defs.push(member_prep_bom(member));
        defs.push(member_train_bom(member));
    }
    defs
}

fn participant(id: &str) -> ParticipantId {
    id.parse().expect("fixture participant ids are valid tokens")
}

fn node(id: &str) -> NodeId {
    id.parse().expect("fixture node ids are valid tokens")
}

fn ensure_participant(engine: &mut Engine, id: &ParticipantId) -> Result<(), EngineError> {
    match engine.register_participant(id) {
        Ok(()) => Ok(()),
        Err(EngineError::Append(AppendError::AlreadyRegistered(_))) => Ok(()),
        Err(e) => Err(e),
    }
}

fn ensure_bom(engine: &mut Engine, def: BomDef) -> Result<ContentRef, EngineError> {
    let author = participant("operator");
    ensure_participant(engine, &author)?;
    match engine.register_bom(def, &author) {
        Ok(r) => Ok(r),
        Err(EngineError::BomAlreadyRegistered(r)) => Ok(r),
        Err(e) => Err(e),
    }
}

fn record_value(
    engine: &mut Engine,
    bol: BolId,
    name: &str,
    bytes: Vec<u8>,
    provenance: Provenance,
    author: &ParticipantId,
) -> Result<ContentRef, EngineError> {
    let value = if bytes.len() <= crate::model::INLINE_THRESHOLD {
        ShadowValue::Inline { bytes }
    } else {
        let content_ref = engine.blobs().put(&bytes)?;
        ShadowValue::Blob { content_ref }
    };
    let content_ref = value.effective_ref();
    let at = engine.now_ms();
    engine.record_shadow(bol, node(name), value, provenance, author, at)?;
    Ok(content_ref)
}

fn computed(assembly: &str) -> Provenance {
    Provenance::Computed { assembly: node(assembly) }
}

fn fetched(origin: &str) -> Provenance {
    Provenance::Fetched { origin: origin.to_string() }
}

// ---------------------------------------------------------------------------
// Congestion scoring

fn congestion_bom(camera: AccessSpec) -> BomDef {
    BomDef {
        name: "hpc-cs".into(),
        version: "1".into(),
        assemblies: vec![AssemblyDef {
            id: node("traffic-scene-analysis"),
            name: "Traffic scene analysis".into(),
            inputs: vec![node("location-photo")],
            artifacts: vec![node("congestion-model")],
            outputs: vec![node("congestion-score")],
        }],
        data_sources: vec![
            DataSourceDef {
                id: node("location-photo"),
                name: "Fixed-location camera photo".into(),
                access: camera,
                qos: Some(QosSpec {
                    max_response_ms: PHOTO_LIMIT_MS.try_into().expect("nonzero"),
                    thresholds: vec![Threshold {
                        metric: "resolution-px".into(),
                        min: Some(640.0),
                        max: None,
                    }],
                }),
            },
            DataSourceDef {
                id: node("congestion-score"),
                name: "Congestion score".into(),
                access: AccessSpec::Internal,
                qos: None,
            },
        ],
        artifacts: vec![ArtifactDef {
            id: node("congestion-model"),
            name: "Congestion scoring model".into(),
            kind: ArtifactKind::Model,
            content_ref: Some(ContentRef::of(&trained_model_bytes())),
        }],
    }
}

/// Score a fixed location `n_runs` times. Each run buys one photo through
/// the camera contract, applies the stub model, and seals a three-shadow
/// BoL.
pub fn run_hpc_cs(engine: &mut Engine, n_runs: u32) -> Result<Vec<BolId>, EngineError> {
    let operator = participant("hpc-operator");
    let camera = participant("camera-network");
    ensure_participant(engine, &operator)?;
    ensure_participant(engine, &camera)?;

    let interface = br#"{"params":["location","timestamp"]}"#.to_vec();
    let at = engine.now_ms();
    let address = engine.deploy_contract(&camera, PHOTO_PRICE, PHOTO_LIMIT_MS, &interface, at)?;
    let bom_ref = ensure_bom(engine, congestion_bom(AccessSpec::Contract { address, interface }))?;

    if n_runs > 0 {
        engine.fund_account(&operator, PHOTO_PRICE * n_runs as Money)?;
    }

    let model = trained_model_bytes();
    let mut bols = Vec::with_capacity(n_runs as usize);
    for run in 0..n_runs {
        let at = engine.now_ms();
        let bol = engine.open_bol(bom_ref, &operator, at)?;

        let photo = fixture_bytes(&format!("hpc-cs:photo:{run}"), 4 * 1024);
        let requested_at = engine.now_ms();
        let rid = engine.request_data(&operator, address, b"{\"location\":\"hyde-park-corner\"}", requested_at)?;
        engine.deliver_data(rid, &photo, requested_at + PHOTO_LATENCY_MS)?;
        record_value(
            engine,
            bol,
            "location-photo",
            photo.clone(),
            Provenance::Delivered { request_id: rid },
            &operator,
        )?;
        record_value(
            engine,
            bol,
            "congestion-model",
            model.clone(),
            fetched("model-registry"),
            &operator,
        )?;
        let score = congestion_score(&photo);
        record_value(
            engine,
            bol,
            "congestion-score",
            score.to_string().into_bytes(),
            computed("traffic-scene-analysis"),
            &operator,
        )?;

        let at = engine.now_ms();
        engine.seal_bol(bol, &operator, at)?;
        bols.push(bol);
    }
    Ok(bols)
}

// ---------------------------------------------------------------------------
// Model training

fn training_bom() -> BomDef {
    BomDef {
        name: "ltc-cs-training".into(),
        version: "1".into(),
        assemblies: vec![
            AssemblyDef {
                id: node("clean-augment"),
                name: "Clean and augment".into(),
                inputs: vec![node("source-images")],
                artifacts: vec![],
                outputs: vec![node("modified-data-set")],
            },
            AssemblyDef {
                id: node("labelling"),
                name: "Scene labelling".into(),
                inputs: vec![node("modified-data-set")],
                artifacts: vec![node("staff-roster")],
                outputs: vec![node("labelled-scenes")],
            },
            AssemblyDef {
                id: node("training"),
                name: "Model training".into(),
                inputs: vec![node("labelled-scenes")],
                artifacts: vec![],
                outputs: vec![node("trained-model")],
            },
        ],
        data_sources: vec![
            DataSourceDef {
                id: node("source-images"),
                name: "Source traffic images".into(),
                access: AccessSpec::StaticUrl { url: "https://example.org/ltc/source-images".into() },
                qos: None,
            },
            DataSourceDef {
                id: node("modified-data-set"),
                name: "Cleaned and augmented set".into(),
                access: AccessSpec::Internal,
                qos: None,
            },
            DataSourceDef {
                id: node("labelled-scenes"),
                name: "Labelled scenes".into(),
                access: AccessSpec::Internal,
                qos: None,
            },
            DataSourceDef {
                id: node("trained-model"),
                name: "Trained congestion model".into(),
                access: AccessSpec::Internal,
                qos: None,
            },
        ],
        artifacts: vec![ArtifactDef {
            id: node("staff-roster"),
            name: "Labelling staff roster".into(),
            kind: ArtifactKind::Roster,
            content_ref: None,
        }],
    }
}

/// Train the congestion model once: source images through cleaning,
/// labelling, and training. The model shadow's bytes are the exact bytes
/// the congestion scenario pins, so chaining the two links their BoLs.
pub fn run_ltc_cs_training(engine: &mut Engine) -> Result<BolId, EngineError> {
    let trainer = participant("ltc-trainer");
    ensure_participant(engine, &trainer)?;
    let bom_ref = ensure_bom(engine, training_bom())?;

    let at = engine.now_ms();
    let bol = engine.open_bol(bom_ref, &trainer, at)?;
    record_value(
        engine,
        bol,
        "source-images",
        fixture_bytes("ltc-cs:source-images", 8 * 1024),
        fetched("camera-archive"),
        &trainer,
    )?;
    record_value(
        engine,
        bol,
        "modified-data-set",
        fixture_bytes("ltc-cs:modified-data-set", 6 * 1024),
        computed("clean-augment"),
        &trainer,
    )?;
    record_value(
        engine,
        bol,
        "staff-roster",
        fixture_bytes("ltc-cs:staff-roster", 256),
        fetched("hr-system"),
        &trainer,
    )?;
    record_value(
        engine,
        bol,
        "labelled-scenes",
        fixture_bytes("ltc-cs:labelled-scenes", 6 * 1024),
        computed("labelling"),
        &trainer,
    )?;
    record_value(engine, bol, "trained-model", trained_model_bytes(), computed("training"), &trainer)?;

    let at = engine.now_ms();
    engine.seal_bol(bol, &trainer, at)?;
    Ok(bol)
}

// ---------------------------------------------------------------------------
// Coalition model fusion

const MEMBERS: [&str; 3] = ["member-a", "member-b", "member-c"];

fn member_prep_bom(member: &str) -> BomDef {
    BomDef {
        name: format!("{member}-prep"),
        version: "1".into(),
        assemblies: vec![
            AssemblyDef {
                id: node("ingest"),
                name: "Ingest".into(),
                inputs: vec![node("source-data")],
                artifacts: vec![],
                outputs: vec![node("staged-data")],
            },
            AssemblyDef {
                id: node("transform-label"),
                name: "Transform and label".into(),
                inputs: vec![node("staged-data")],
                artifacts: vec![],
                outputs: vec![node("labelled-data")],
            },
        ],
        data_sources: vec![
            DataSourceDef {
                id: node("source-data"),
                name: format!("{member} source data"),
                access: AccessSpec::StaticUrl { url: format!("https://example.org/{member}/source") },
                qos: None,
            },
            DataSourceDef {
                id: node("staged-data"),
                name: "Staged data".into(),
                access: AccessSpec::Internal,
                qos: None,
            },
            DataSourceDef {
                id: node("labelled-data"),
                name: "Labelled data".into(),
                access: AccessSpec::Internal,
                qos: None,
            },
        ],
        artifacts: vec![],
    }
}

fn member_train_bom(member: &str) -> BomDef {
    BomDef {
        name: format!("{member}-train"),
        version: "1".into(),
        assemblies: vec![AssemblyDef {
            id: node("train-component"),
            name: "Train component model".into(),
            inputs: vec![node("labelled-data")],
            artifacts: vec![],
            outputs: vec![node("component-model")],
        }],
        data_sources: vec![
            DataSourceDef {
                id: node("labelled-data"),
                name: "Labelled data".into(),
                access: AccessSpec::StaticUrl { url: format!("https://example.org/{member}/labelled") },
                qos: None,
            },
            DataSourceDef {
                id: node("component-model"),
                name: "Component model".into(),
                access: AccessSpec::Internal,
                qos: None,
            },
        ],
        artifacts: vec![],
    }
}

fn fusion_bom() -> BomDef {
    BomDef {
        name: "fusion-ai".into(),
        version: "1".into(),
        assemblies: vec![AssemblyDef {
            id: node("model-fusion"),
            name: "Model fusion".into(),
            inputs: MEMBERS.iter().map(|m| node(&format!("{m}-model"))).collect(),
            artifacts: vec![node("fusing-factors")],
            outputs: vec![node("fused-model")],
        }],
        data_sources: MEMBERS
            .iter()
            .map(|m| DataSourceDef {
                id: node(&format!("{m}-model")),
                name: format!("{m} component model"),
                access: AccessSpec::StaticUrl { url: format!("https://example.org/{m}/model") },
                qos: None,
            })
            .chain([DataSourceDef {
                id: node("fused-model"),
                name: "Fused model".into(),
                access: AccessSpec::Internal,
                qos: None,
            }])
            .collect(),
        artifacts: vec![ArtifactDef {
            id: node("fusing-factors"),
            name: "Fusing factors".into(),
            kind: ArtifactKind::FusingFactors,
            content_ref: None,
        }],
    }
}

/// Fuse three coalition members' component models. Each member runs a
/// preparation BoL and a training BoL; the fusion BoL consumes the three
/// model outputs by content, so a trace from the fused model reaches every
/// member's source data two BoL boundaries away.
pub fn run_fusion_ai(engine: &mut Engine) -> Result<BolId, EngineError> {
    let broker = participant("fusion-broker");
    ensure_participant(engine, &broker)?;

    let mut component_models = Vec::new();
    for member in MEMBERS {
        let who = participant(member);
        ensure_participant(engine, &who)?;

        let labelled = fixture_bytes(&format!("fusion:{member}:labelled-data"), 5 * 1024);
        let prep_ref = ensure_bom(engine, member_prep_bom(member))?;
        let at = engine.now_ms();
        let prep = engine.open_bol(prep_ref, &who, at)?;
        record_value(
            engine,
            prep,
            "source-data",
            fixture_bytes(&format!("fusion:{member}:source-data"), 7 * 1024),
            fetched(&format!("{member}-archive")),
            &who,
        )?;
        record_value(
            engine,
            prep,
            "staged-data",
            fixture_bytes(&format!("fusion:{member}:staged-data"), 5 * 1024),
            computed("ingest"),
            &who,
        )?;
        record_value(engine, prep, "labelled-data", labelled.clone(), computed("transform-label"), &who)?;
        let at = engine.now_ms();
        engine.seal_bol(prep, &who, at)?;

        let model = fixture_bytes(&format!("fusion:{member}:component-model"), 3 * 1024);
        let train_ref = ensure_bom(engine, member_train_bom(member))?;
        let at = engine.now_ms();
        let train = engine.open_bol(train_ref, &who, at)?;
        record_value(engine, train, "labelled-data", labelled, fetched(&format!("{member}-prep")), &who)?;
        record_value(engine, train, "component-model", model.clone(), computed("train-component"), &who)?;
        let at = engine.now_ms();
        engine.seal_bol(train, &who, at)?;

        component_models.push(model);
    }

    let fusion_ref = ensure_bom(engine, fusion_bom())?;
    let at = engine.now_ms();
    let fused = engine.open_bol(fusion_ref, &broker, at)?;
    for (member, model) in MEMBERS.iter().zip(component_models) {
        record_value(
            engine,
            fused,
            &format!("{member}-model"),
            model,
            fetched(&format!("{member}-registry")),
            &broker,
        )?;
    }
    record_value(
        engine,
        fused,
        "fusing-factors",
        fixture_bytes("fusion:fusing-factors", 2 * 1024),
        fetched("coalition-policy"),
        &broker,
    )?;
    record_value(
        engine,
        fused,
        "fused-model",
        fixture_bytes("fusion:fused-model", 4 * 1024),
        computed("model-fusion"),
        &broker,
    )?;
    let at = engine.now_ms();
    engine.seal_bol(fused, &broker, at)?;
    Ok(fused)
}
