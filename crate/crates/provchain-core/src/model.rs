//! Bill-of-materials schema and bill-of-lots lifecycle.
//!
//! A [`BomDef`] declares the static shape of a data-producing process: named
//! assemblies wired to the data sources and artifacts they consume and
//! produce. [`validate_bom`] checks the wiring (resolved references, acyclic
//! graph, unique producers), canonicalises declaration order, and returns a
//! [`ValidatedBom`] carrying its content address. A [`BolRecord`] is one run
//! of a validated BoM: it accumulates write-once shadow records for the BoM's
//! data sources and artifacts and is then sealed (complete) or aborted.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::num::NonZeroU64;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{self, canonical_ref, DecodeError, MapReader, ToCanonical, Value};
use crate::hash::ContentRef;
use crate::ids::{check_token, BolId, ContractAddress, RequestId, TokenError};

/// Largest shadow value or ledger payload stored inline, in bytes.
pub const INLINE_THRESHOLD: usize = 1024;

// ---------------------------------------------------------------------------
// Node identifiers

/// Identifier of one BoM node, unique within its BoM.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct NodeId(String);

impl NodeId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for NodeId {
    type Error = TokenError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        check_token("node id", &value)?;
        Ok(NodeId(value))
    }
}

impl TryFrom<&str> for NodeId {
    type Error = TokenError;

    fn try_from(value: &str) -> Result<Self, Self::Error> {
        NodeId::try_from(value.to_string())
    }
}

impl FromStr for NodeId {
    type Err = TokenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NodeId::try_from(s)
    }
}

impl From<NodeId> for String {
    fn from(id: NodeId) -> String {
        id.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NodeId({})", self.0)
    }
}

/// What a NodeId names within its BoM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Assembly,
    DataSource,
    Artifact,
}

// ---------------------------------------------------------------------------
// BoM definition

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BomDef {
    pub name: String,
    pub version: String,
    pub assemblies: Vec<AssemblyDef>,
    pub data_sources: Vec<DataSourceDef>,
    pub artifacts: Vec<ArtifactDef>,
}

/// One processing step. `inputs` are consumed data sources, `artifacts` are
/// consumed artifacts, `outputs` are produced data sources or artifacts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssemblyDef {
    pub id: NodeId,
    pub name: String,
    pub inputs: Vec<NodeId>,
    pub artifacts: Vec<NodeId>,
    pub outputs: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSourceDef {
    pub id: NodeId,
    pub name: String,
    pub access: AccessSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qos: Option<QosSpec>,
}

/// How a data source's content is obtained.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AccessSpec {
    StaticUrl {
        url: String,
    },
    Contract {
        address: ContractAddress,
        #[serde(with = "hex::serde")]
        interface: Vec<u8>,
    },
    /// Produced and consumed within the ecosystem; no external access method.
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QosSpec {
    pub max_response_ms: NonZeroU64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub thresholds: Vec<Threshold>,
}

/// Declared bound on a named quality metric. At least one bound is present
/// and both are finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub metric: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactDef {
    pub id: NodeId,
    pub name: String,
    pub kind: ArtifactKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_ref: Option<ContentRef>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArtifactKind {
    Model,
    License,
    Roster,
    Policy,
    Software,
    Datasheet,
    Document,
    FusingFactors,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 8] = [
        ArtifactKind::Model,
        ArtifactKind::License,
        ArtifactKind::Roster,
        ArtifactKind::Policy,
        ArtifactKind::Software,
        ArtifactKind::Datasheet,
        ArtifactKind::Document,
        ArtifactKind::FusingFactors,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            ArtifactKind::Model => "model",
            ArtifactKind::License => "license",
            ArtifactKind::Roster => "roster",
            ArtifactKind::Policy => "policy",
            ArtifactKind::Software => "software",
            ArtifactKind::Datasheet => "datasheet",
            ArtifactKind::Document => "document",
            ArtifactKind::FusingFactors => "fusing-factors",
        }
    }

    pub fn parse(label: &str) -> Option<ArtifactKind> {
        ArtifactKind::ALL.into_iter().find(|k| k.label() == label)
    }
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BomError {
    #[error("cyclic bom: {}", format_path(.0))]
    CyclicBom(Vec<NodeId>),
    #[error("dangling reference `{0}`")]
    DanglingReference(NodeId),
    #[error("duplicate id `{0}`")]
    DuplicateId(NodeId),
    #[error("bom has no assemblies")]
    EmptyBom,
    #[error("assembly `{0}` needs at least one input or artifact and one output")]
    EmptyAssembly(NodeId),
    #[error("data source `{0}` is produced by more than one assembly")]
    MultipleProducers(NodeId),
    #[error("bad access spec on `{0}`")]
    BadAccessSpec(NodeId),
}

fn format_path(path: &[NodeId]) -> String {
    path.iter()
        .map(NodeId::as_str)
        .collect::<Vec<_>>()
        .join(" -> ")
}

/// A BoM that passed validation: resolved references, acyclic wiring, unique
/// data-source producers, well-formed access specs. Declaration order is
/// canonicalised, so the content address identifies the BoM's structure.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedBom {
    def: BomDef,
    content_ref: ContentRef,
    kinds: BTreeMap<NodeId, NodeKind>,
}

impl ValidatedBom {
    pub fn def(&self) -> &BomDef {
        &self.def
    }

    pub fn content_ref(&self) -> ContentRef {
        self.content_ref
    }

    pub fn node_kind(&self, id: &NodeId) -> Option<NodeKind> {
        self.kinds.get(id).copied()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &NodeId> {
        self.kinds.keys()
    }

    /// Data sources and artifacts, the nodes that take shadows. Sorted.
    pub fn shadowable_nodes(&self) -> Vec<NodeId> {
        self.kinds
            .iter()
            .filter(|(_, kind)| !matches!(kind, NodeKind::Assembly))
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn assembly(&self, id: &NodeId) -> Option<&AssemblyDef> {
        self.def.assemblies.iter().find(|a| &a.id == id)
    }

    pub fn data_source(&self, id: &NodeId) -> Option<&DataSourceDef> {
        self.def.data_sources.iter().find(|d| &d.id == id)
    }

    pub fn artifact(&self, id: &NodeId) -> Option<&ArtifactDef> {
        self.def.artifacts.iter().find(|a| &a.id == id)
    }

    /// Assemblies listing `node` among their outputs.
    pub fn producers_of(&self, node: &NodeId) -> Vec<&NodeId> {
        self.def
            .assemblies
            .iter()
            .filter(|a| a.outputs.contains(node))
            .map(|a| &a.id)
            .collect()
    }
}

/// Validate `def`, canonicalise its declaration order, and compute its
/// content address.
pub fn validate_bom(mut def: BomDef) -> Result<ValidatedBom, BomError> {
    canonicalise(&mut def);

    let mut kinds = BTreeMap::new();
    let declared = def
        .assemblies
        .iter()
        .map(|a| (&a.id, NodeKind::Assembly))
        .chain(def.data_sources.iter().map(|d| (&d.id, NodeKind::DataSource)))
        .chain(def.artifacts.iter().map(|a| (&a.id, NodeKind::Artifact)));
    for (id, kind) in declared {
        if kinds.insert(id.clone(), kind).is_some() {
            return Err(BomError::DuplicateId(id.clone()));
        }
    }

    if def.assemblies.is_empty() {
        return Err(BomError::EmptyBom);
    }

    for assembly in &def.assemblies {
        let resolve = |id: &NodeId, want: &[NodeKind]| match kinds.get(id) {
            Some(kind) if want.contains(kind) => Ok(()),
            _ => Err(BomError::DanglingReference(id.clone())),
        };
        for id in &assembly.inputs {
            resolve(id, &[NodeKind::DataSource])?;
        }
        for id in &assembly.artifacts {
            resolve(id, &[NodeKind::Artifact])?;
        }
        for id in &assembly.outputs {
            resolve(id, &[NodeKind::DataSource, NodeKind::Artifact])?;
        }
        if assembly.inputs.is_empty() && assembly.artifacts.is_empty() {
            return Err(BomError::EmptyAssembly(assembly.id.clone()));
        }
        if assembly.outputs.is_empty() {
            return Err(BomError::EmptyAssembly(assembly.id.clone()));
        }
    }

    let mut ds_producers: BTreeMap<&NodeId, &NodeId> = BTreeMap::new();
    for assembly in &def.assemblies {
        for out in &assembly.outputs {
            if kinds[out] == NodeKind::DataSource
                && ds_producers.insert(out, &assembly.id).is_some()
            {
                return Err(BomError::MultipleProducers(out.clone()));
            }
        }
    }

    if let Some(path) = find_cycle(&def) {
        return Err(BomError::CyclicBom(path));
    }

    for ds in &def.data_sources {
        if ds_producers.contains_key(&ds.id) && ds.access != AccessSpec::Internal {
            return Err(BomError::BadAccessSpec(ds.id.clone()));
        }
        check_access(ds).map_err(|_| BomError::BadAccessSpec(ds.id.clone()))?;
    }

    let content_ref = canonical_ref(&def);
    Ok(ValidatedBom { def, content_ref, kinds })
}

fn check_access(ds: &DataSourceDef) -> Result<(), ()> {
    match &ds.access {
        AccessSpec::StaticUrl { url } if url.is_empty() => return Err(()),
        AccessSpec::Contract { interface, .. } => {
            serde_json::from_slice::<serde_json::Value>(interface).map_err(|_| ())?;
        }
        _ => {}
    }
    if let Some(qos) = &ds.qos {
        for t in &qos.thresholds {
            if t.min.is_none() && t.max.is_none() {
                return Err(());
            }
            for bound in [t.min, t.max].into_iter().flatten() {
                if !bound.is_finite() {
                    return Err(());
                }
            }
        }
    }
    Ok(())
}

/// Sort declarations by id and dedupe each assembly's reference lists so
/// structurally equal BoMs share one encoding.
fn canonicalise(def: &mut BomDef) {
    def.assemblies.sort_by(|a, b| a.id.cmp(&b.id));
    def.data_sources.sort_by(|a, b| a.id.cmp(&b.id));
    def.artifacts.sort_by(|a, b| a.id.cmp(&b.id));
    for assembly in &mut def.assemblies {
        for list in [
            &mut assembly.inputs,
            &mut assembly.artifacts,
            &mut assembly.outputs,
        ] {
            list.sort();
            list.dedup();
        }
    }
    for ds in &mut def.data_sources {
        if let Some(qos) = &mut ds.qos {
            qos.thresholds
                .sort_by(|a, b| (&a.metric, a.min.map(f64::to_bits), a.max.map(f64::to_bits))
                    .cmp(&(&b.metric, b.min.map(f64::to_bits), b.max.map(f64::to_bits))));
        }
    }
}

/// Edges: consumed node -> assembly, assembly -> produced node. Returns a
/// cycle as a node path with the first node repeated at the end, rotated so
/// the smallest id leads.
fn find_cycle(def: &BomDef) -> Option<Vec<NodeId>> {
    let mut adjacency: BTreeMap<&NodeId, BTreeSet<&NodeId>> = BTreeMap::new();
    for assembly in &def.assemblies {
        for id in assembly.inputs.iter().chain(&assembly.artifacts) {
            adjacency.entry(id).or_default().insert(&assembly.id);
        }
        for id in &assembly.outputs {
            adjacency.entry(&assembly.id).or_default().insert(id);
        }
    }

    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        InProgress,
        Done,
    }

    let mut marks: BTreeMap<&NodeId, Mark> = BTreeMap::new();
    let mut stack: Vec<&NodeId> = Vec::new();

    fn visit<'a>(
        node: &'a NodeId,
        adjacency: &BTreeMap<&'a NodeId, BTreeSet<&'a NodeId>>,
        marks: &mut BTreeMap<&'a NodeId, Mark>,
        stack: &mut Vec<&'a NodeId>,
    ) -> Option<Vec<NodeId>> {
        match marks.get(node) {
            Some(Mark::Done) => return None,
            Some(Mark::InProgress) => {
                let start = stack.iter().position(|n| *n == node).unwrap();
                let mut cycle: Vec<NodeId> = stack[start..].iter().map(|n| (*n).clone()).collect();
                let min = cycle.iter().enumerate().min_by_key(|(_, n)| *n).unwrap().0;
                cycle.rotate_left(min);
                cycle.push(cycle[0].clone());
                return Some(cycle);
            }
            None => {}
        }
        marks.insert(node, Mark::InProgress);
        stack.push(node);
        if let Some(next) = adjacency.get(node) {
            for n in next {
                if let Some(cycle) = visit(n, adjacency, marks, stack) {
                    return Some(cycle);
                }
            }
        }
        stack.pop();
        marks.insert(node, Mark::Done);
        None
    }

    let roots: Vec<&NodeId> = adjacency.keys().copied().collect();
    for node in roots {
        if let Some(cycle) = visit(node, &adjacency, &mut marks, &mut stack) {
            return Some(cycle);
        }
    }
    None
}

// ---------------------------------------------------------------------------
// BoL records

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum BolStatus {
    Open,
    Sealed { sealed_at: u64, bol_hash: ContentRef },
    Aborted { aborted_at: u64, reason: String },
}

impl BolStatus {
    pub fn label(&self) -> &'static str {
        match self {
            BolStatus::Open => "open",
            BolStatus::Sealed { .. } => "sealed",
            BolStatus::Aborted { .. } => "aborted",
        }
    }
}

/// Runtime value captured for one BoM node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShadowValue {
    Inline {
        #[serde(with = "hex::serde")]
        bytes: Vec<u8>,
    },
    Blob {
        content_ref: ContentRef,
    },
}

impl ShadowValue {
    /// Content address of the shadowed bytes, whether inline or stored.
    pub fn effective_ref(&self) -> ContentRef {
        match self {
            ShadowValue::Inline { bytes } => ContentRef::of(bytes),
            ShadowValue::Blob { content_ref } => *content_ref,
        }
    }
}

/// How a shadow value came to be.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Fetched { origin: String },
    Computed { assembly: NodeId },
    Delivered { request_id: RequestId },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShadowRecord {
    pub node: NodeId,
    pub value: ShadowValue,
    pub recorded_at: u64,
    pub provenance: Provenance,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BolError {
    #[error("bol is not open")]
    BolNotOpen,
    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),
    #[error("node `{0}` is an assembly and takes no shadow")]
    NotShadowable(NodeId),
    #[error("shadow for `{0}` already recorded")]
    DuplicateShadow(NodeId),
    #[error("inline value of {actual} bytes exceeds the {limit} byte limit")]
    OversizeInline { actual: usize, limit: usize },
    #[error("blob {0} not present in the blob store")]
    MissingBlob(ContentRef),
    #[error("assembly `{assembly}` does not produce `{node}`")]
    BadProvenance { node: NodeId, assembly: NodeId },
    #[error("missing shadows: {}", format_path(.0))]
    MissingShadows(Vec<NodeId>),
}

/// One run of a BoM. Mutations go through the methods; the engine serialises
/// them and pairs each with its ledger event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BolRecord {
    pub id: BolId,
    pub bom_ref: ContentRef,
    pub opened_at: u64,
    pub status: BolStatus,
    pub shadows: BTreeMap<NodeId, ShadowRecord>,
}

impl BolRecord {
    pub fn open(id: BolId, bom: &ValidatedBom, opened_at: u64) -> BolRecord {
        BolRecord {
            id,
            bom_ref: bom.content_ref(),
            opened_at,
            status: BolStatus::Open,
            shadows: BTreeMap::new(),
        }
    }

    pub fn record_shadow(&mut self, bom: &ValidatedBom, shadow: ShadowRecord) -> Result<(), BolError> {
        if self.status != BolStatus::Open {
            return Err(BolError::BolNotOpen);
        }
        match bom.node_kind(&shadow.node) {
            None => return Err(BolError::UnknownNode(shadow.node.clone())),
            Some(NodeKind::Assembly) => return Err(BolError::NotShadowable(shadow.node.clone())),
            Some(_) => {}
        }
        if self.shadows.contains_key(&shadow.node) {
            return Err(BolError::DuplicateShadow(shadow.node.clone()));
        }
        if let ShadowValue::Inline { bytes } = &shadow.value {
            if bytes.len() > INLINE_THRESHOLD {
                return Err(BolError::OversizeInline {
                    actual: bytes.len(),
                    limit: INLINE_THRESHOLD,
                });
            }
        }
        if let Provenance::Computed { assembly } = &shadow.provenance {
            let produces = bom
                .assembly(assembly)
                .is_some_and(|a| a.outputs.contains(&shadow.node));
            if !produces {
                return Err(BolError::BadProvenance {
                    node: shadow.node.clone(),
                    assembly: assembly.clone(),
                });
            }
        }
        self.shadows.insert(shadow.node.clone(), shadow);
        Ok(())
    }

    pub fn missing_shadows(&self, bom: &ValidatedBom) -> Vec<NodeId> {
        bom.shadowable_nodes()
            .into_iter()
            .filter(|id| !self.shadows.contains_key(id))
            .collect()
    }

    /// Seal a complete BoL and return its content hash.
    pub fn seal(&mut self, bom: &ValidatedBom, sealed_at: u64) -> Result<ContentRef, BolError> {
        if self.status != BolStatus::Open {
            return Err(BolError::BolNotOpen);
        }
        let missing = self.missing_shadows(bom);
        if !missing.is_empty() {
            return Err(BolError::MissingShadows(missing));
        }
        let bol_hash = canonical_ref(&sealed_bol_value(self, sealed_at));
        self.status = BolStatus::Sealed { sealed_at, bol_hash };
        Ok(bol_hash)
    }

    pub fn abort(&mut self, aborted_at: u64, reason: String) -> Result<(), BolError> {
        if self.status != BolStatus::Open {
            return Err(BolError::BolNotOpen);
        }
        self.status = BolStatus::Aborted { aborted_at, reason };
        Ok(())
    }
}

fn sealed_bol_value(bol: &BolRecord, sealed_at: u64) -> Value {
    Value::map([
        ("bom_ref", bol.bom_ref.to_canonical()),
        ("id", bol.id.content_ref().to_canonical()),
        ("opened_at", Value::Unsigned(bol.opened_at)),
        ("sealed_at", Value::Unsigned(sealed_at)),
        (
            "shadows",
            Value::Map(
                bol.shadows
                    .iter()
                    .map(|(id, shadow)| (id.as_str().to_string(), shadow.to_canonical()))
                    .collect(),
            ),
        ),
        ("status", Value::text("sealed")),
    ])
}

// ---------------------------------------------------------------------------
// Canonical encoding

impl ToCanonical for NodeId {
    fn to_canonical(&self) -> Value {
        Value::text(self.as_str())
    }
}

impl ToCanonical for BomDef {
    fn to_canonical(&self) -> Value {
        Value::map([
            (
                "artifacts",
                Value::list(self.artifacts.iter().map(ToCanonical::to_canonical)),
            ),
            (
                "assemblies",
                Value::list(self.assemblies.iter().map(ToCanonical::to_canonical)),
            ),
            (
                "data_sources",
                Value::list(self.data_sources.iter().map(ToCanonical::to_canonical)),
            ),
            ("name", Value::text(&self.name)),
            ("version", Value::text(&self.version)),
        ])
    }
}

fn id_list(ids: &[NodeId]) -> Value {
    Value::list(ids.iter().map(ToCanonical::to_canonical))
}

impl ToCanonical for AssemblyDef {
    fn to_canonical(&self) -> Value {
        Value::map([
            ("artifacts", id_list(&self.artifacts)),
            ("id", self.id.to_canonical()),
            ("inputs", id_list(&self.inputs)),
            ("name", Value::text(&self.name)),
            ("outputs", id_list(&self.outputs)),
        ])
    }
}

impl ToCanonical for DataSourceDef {
    fn to_canonical(&self) -> Value {
        let mut entries = vec![
            ("access".to_string(), self.access.to_canonical()),
            ("id".to_string(), self.id.to_canonical()),
            ("name".to_string(), Value::text(&self.name)),
        ];
        if let Some(qos) = &self.qos {
            entries.push(("qos".to_string(), qos.to_canonical()));
        }
        Value::map(entries)
    }
}

impl ToCanonical for AccessSpec {
    fn to_canonical(&self) -> Value {
        match self {
            AccessSpec::StaticUrl { url } => Value::map([
                ("type", Value::text("static_url")),
                ("url", Value::text(url)),
            ]),
            AccessSpec::Contract { address, interface } => Value::map([
                ("address", address.content_ref().to_canonical()),
                ("interface", Value::bytes(interface.clone())),
                ("type", Value::text("contract")),
            ]),
            AccessSpec::Internal => Value::map([("type", Value::text("internal"))]),
        }
    }
}

impl ToCanonical for QosSpec {
    fn to_canonical(&self) -> Value {
        Value::map([
            (
                "max_response_ms",
                Value::Unsigned(self.max_response_ms.get()),
            ),
            (
                "thresholds",
                Value::list(self.thresholds.iter().map(ToCanonical::to_canonical)),
            ),
        ])
    }
}

impl ToCanonical for Threshold {
    fn to_canonical(&self) -> Value {
        let mut entries = vec![("metric".to_string(), Value::text(&self.metric))];
        if let Some(max) = self.max {
            entries.push(("max".to_string(), Value::Unsigned(max.to_bits())));
        }
        if let Some(min) = self.min {
            entries.push(("min".to_string(), Value::Unsigned(min.to_bits())));
        }
        Value::map(entries)
    }
}

impl ToCanonical for ArtifactDef {
    fn to_canonical(&self) -> Value {
        let mut entries = vec![
            ("id".to_string(), self.id.to_canonical()),
            ("kind".to_string(), Value::text(self.kind.label())),
            ("name".to_string(), Value::text(&self.name)),
        ];
        if let Some(content_ref) = self.content_ref {
            entries.push(("content_ref".to_string(), content_ref.to_canonical()));
        }
        Value::map(entries)
    }
}

impl ToCanonical for ShadowValue {
    fn to_canonical(&self) -> Value {
        match self {
            ShadowValue::Inline { bytes } => Value::map([
                ("bytes", Value::bytes(bytes.clone())),
                ("kind", Value::text("inline")),
            ]),
            ShadowValue::Blob { content_ref } => Value::map([
                ("content_ref", content_ref.to_canonical()),
                ("kind", Value::text("blob")),
            ]),
        }
    }
}

impl ToCanonical for Provenance {
    fn to_canonical(&self) -> Value {
        match self {
            Provenance::Fetched { origin } => Value::map([
                ("kind", Value::text("fetched")),
                ("origin", Value::text(origin)),
            ]),
            Provenance::Computed { assembly } => Value::map([
                ("assembly", assembly.to_canonical()),
                ("kind", Value::text("computed")),
            ]),
            Provenance::Delivered { request_id } => Value::map([
                ("kind", Value::text("delivered")),
                ("request_id", request_id.content_ref().to_canonical()),
            ]),
        }
    }
}

impl ToCanonical for ShadowRecord {
    fn to_canonical(&self) -> Value {
        Value::map([
            ("node", self.node.to_canonical()),
            ("provenance", self.provenance.to_canonical()),
            ("recorded_at", Value::Unsigned(self.recorded_at)),
            ("value", self.value.to_canonical()),
        ])
    }
}

// ---------------------------------------------------------------------------
// Canonical decoding

fn node_id_field(text: &str, field: &str) -> Result<NodeId, DecodeError> {
    NodeId::try_from(text).map_err(|e| DecodeError::BadField {
        field: field.to_string(),
        reason: e.to_string(),
    })
}

impl BomDef {
    pub fn to_canonical_bytes(&self) -> Vec<u8> {
        canonical::canonical_encode(self)
    }

    pub fn from_canonical_bytes(bytes: &[u8]) -> Result<BomDef, DecodeError> {
        BomDef::from_canonical(&canonical::canonical_decode(bytes)?)
    }

    pub fn from_canonical(value: &Value) -> Result<BomDef, DecodeError> {
        let map = MapReader::new(value)?;
        map.expect_keys(&["artifacts", "assemblies", "data_sources", "name", "version"], &[])?;
        Ok(BomDef {
            name: map.text("name")?.to_string(),
            version: map.text("version")?.to_string(),
            assemblies: map
                .list("assemblies")?
                .iter()
                .map(assembly_from_canonical)
                .collect::<Result<_, _>>()?,
            data_sources: map
                .list("data_sources")?
                .iter()
                .map(data_source_from_canonical)
                .collect::<Result<_, _>>()?,
            artifacts: map
                .list("artifacts")?
                .iter()
                .map(artifact_from_canonical)
                .collect::<Result<_, _>>()?,
        })
    }
}

fn node_ids_from(list: &[Value], field: &str) -> Result<Vec<NodeId>, DecodeError> {
    list.iter()
        .map(|v| node_id_field(canonical::as_text(v)?, field))
        .collect()
}

fn assembly_from_canonical(value: &Value) -> Result<AssemblyDef, DecodeError> {
    let map = MapReader::new(value)?;
    map.expect_keys(&["artifacts", "id", "inputs", "name", "outputs"], &[])?;
    Ok(AssemblyDef {
        id: node_id_field(map.text("id")?, "id")?,
        name: map.text("name")?.to_string(),
        inputs: node_ids_from(map.list("inputs")?, "inputs")?,
        artifacts: node_ids_from(map.list("artifacts")?, "artifacts")?,
        outputs: node_ids_from(map.list("outputs")?, "outputs")?,
    })
}

fn data_source_from_canonical(value: &Value) -> Result<DataSourceDef, DecodeError> {
    let map = MapReader::new(value)?;
    map.expect_keys(&["access", "id", "name"], &["qos"])?;
    Ok(DataSourceDef {
        id: node_id_field(map.text("id")?, "id")?,
        name: map.text("name")?.to_string(),
        access: access_from_canonical(map.get("access")?)?,
        qos: map.opt("qos").map(qos_from_canonical).transpose()?,
    })
}

fn access_from_canonical(value: &Value) -> Result<AccessSpec, DecodeError> {
    let map = MapReader::new(value)?;
    match map.text("type")? {
        "static_url" => {
            map.expect_keys(&["type", "url"], &[])?;
            Ok(AccessSpec::StaticUrl { url: map.text("url")?.to_string() })
        }
        "contract" => {
            map.expect_keys(&["address", "interface", "type"], &[])?;
            Ok(AccessSpec::Contract {
                address: ContractAddress::from_entry_hash(map.content_ref("address")?),
                interface: map.bytes("interface")?.to_vec(),
            })
        }
        "internal" => {
            map.expect_keys(&["type"], &[])?;
            Ok(AccessSpec::Internal)
        }
        other => Err(DecodeError::BadField {
            field: "type".to_string(),
            reason: format!("unknown access type `{other}`"),
        }),
    }
}

fn qos_from_canonical(value: &Value) -> Result<QosSpec, DecodeError> {
    let map = MapReader::new(value)?;
    map.expect_keys(&["max_response_ms", "thresholds"], &[])?;
    let raw = map.u64("max_response_ms")?;
    let max_response_ms = NonZeroU64::new(raw).ok_or_else(|| DecodeError::BadField {
        field: "max_response_ms".to_string(),
        reason: "must be positive".to_string(),
    })?;
    let thresholds = map
        .list("thresholds")?
        .iter()
        .map(threshold_from_canonical)
        .collect::<Result<_, _>>()?;
    Ok(QosSpec { max_response_ms, thresholds })
}

fn threshold_from_canonical(value: &Value) -> Result<Threshold, DecodeError> {
    let map = MapReader::new(value)?;
    map.expect_keys(&["metric"], &["max", "min"])?;
    let bound = |key: &str| -> Result<Option<f64>, DecodeError> {
        map.opt(key)
            .map(|_| map.u64(key).map(f64::from_bits))
            .transpose()
    };
    Ok(Threshold {
        metric: map.text("metric")?.to_string(),
        min: bound("min")?,
        max: bound("max")?,
    })
}

fn artifact_from_canonical(value: &Value) -> Result<ArtifactDef, DecodeError> {
    let map = MapReader::new(value)?;
    map.expect_keys(&["id", "kind", "name"], &["content_ref"])?;
    let kind_label = map.text("kind")?;
    let kind = ArtifactKind::parse(kind_label).ok_or_else(|| DecodeError::BadField {
        field: "kind".to_string(),
        reason: format!("unknown artifact kind `{kind_label}`"),
    })?;
    Ok(ArtifactDef {
        id: node_id_field(map.text("id")?, "id")?,
        name: map.text("name")?.to_string(),
        kind,
        content_ref: map
            .opt("content_ref")
            .map(|_| map.content_ref("content_ref"))
            .transpose()?,
    })
}

pub(crate) fn shadow_value_from_canonical(value: &Value) -> Result<ShadowValue, DecodeError> {
    let map = MapReader::new(value)?;
    match map.text("kind")? {
        "inline" => {
            map.expect_keys(&["bytes", "kind"], &[])?;
            Ok(ShadowValue::Inline { bytes: map.bytes("bytes")?.to_vec() })
        }
        "blob" => {
            map.expect_keys(&["content_ref", "kind"], &[])?;
            Ok(ShadowValue::Blob { content_ref: map.content_ref("content_ref")? })
        }
        other => Err(DecodeError::BadField {
            field: "kind".to_string(),
            reason: format!("unknown shadow value kind `{other}`"),
        }),
    }
}

pub(crate) fn provenance_from_canonical(value: &Value) -> Result<Provenance, DecodeError> {
    let map = MapReader::new(value)?;
    match map.text("kind")? {
        "fetched" => {
            map.expect_keys(&["kind", "origin"], &[])?;
            Ok(Provenance::Fetched { origin: map.text("origin")?.to_string() })
        }
        "computed" => {
            map.expect_keys(&["assembly", "kind"], &[])?;
            Ok(Provenance::Computed { assembly: node_id_field(map.text("assembly")?, "assembly")? })
        }
        "delivered" => {
            map.expect_keys(&["kind", "request_id"], &[])?;
            Ok(Provenance::Delivered {
                request_id: RequestId::from_entry_hash(map.content_ref("request_id")?),
            })
        }
        other => Err(DecodeError::BadField {
            field: "kind".to_string(),
            reason: format!("unknown provenance kind `{other}`"),
        }),
    }
}

pub(crate) fn shadow_from_canonical(value: &Value) -> Result<ShadowRecord, DecodeError> {
    let map = MapReader::new(value)?;
    map.expect_keys(&["node", "provenance", "recorded_at", "value"], &[])?;
    Ok(ShadowRecord {
        node: node_id_field(map.text("node")?, "node")?,
        value: shadow_value_from_canonical(map.get("value")?)?,
        recorded_at: map.u64("recorded_at")?,
        provenance: provenance_from_canonical(map.get("provenance")?)?,
    })
}
