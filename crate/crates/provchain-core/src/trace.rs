//! Cross-BoL provenance: a graph over every terminal BoL in a ledger,
//! answering where-from (trace), where-used (track), cost rollup, and DOT
//! export queries.
//!
//! Nodes are shadow instances and assembly instances, identified by
//! (bol_id, node). Intra-BoL edges follow the BoM wiring in dataflow
//! direction; cross-BoL edges join recorded facts only: identical content
//! addresses, delivery correlation through a request id, or an artifact
//! whose bytes match another BoL's output. Cross edges always point from
//! the earlier-terminal BoL to the later one, so the graph stays acyclic.
//!
//! Open BoLs are excluded: a run still in progress is not yet evidence.
//! Aborted BoLs are included (their partial shadows are real) and flagged
//! in exports. A graph is an immutable snapshot; rebuild after appends.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::blobstore::BlobStore;
use crate::contracts::Money;
use crate::engine::{EcosystemState, ReplayError};
use crate::hash::ContentRef;
use crate::ids::{BolId, RequestId};
use crate::ledger::{Ledger, LedgerEvent, VerificationReport, ViolationCause};
use crate::model::{BolStatus, NodeId, Provenance};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct ProvNodeId {
    pub bol_id: BolId,
    pub node: NodeId,
}

impl ProvNodeId {
    pub fn new(bol_id: BolId, node: NodeId) -> ProvNodeId {
        ProvNodeId { bol_id, node }
    }

    /// `name@bol-prefix`, the display form used in exports.
    pub fn qualified(&self) -> String {
        format!("{}@{}", self.node, self.bol_id.short())
    }
}

impl fmt::Display for ProvNodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.qualified())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProvKind {
    DataSourceInstance,
    ArtifactInstance,
    AssemblyInstance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProvNode {
    pub id: ProvNodeId,
    pub kind: ProvKind,
    /// Content address of the shadowed value; assemblies carry none.
    pub content: Option<ContentRef>,
    /// True when the owning BoL was aborted rather than sealed.
    pub aborted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    FeedsAssembly,
    ConsumesArtifact,
    ProducedBy,
    CrossBolContentMatch,
    ExplicitDerivedFrom,
}

impl EdgeKind {
    pub fn is_cross_bol(self) -> bool {
        matches!(self, EdgeKind::CrossBolContentMatch | EdgeKind::ExplicitDerivedFrom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct ProvEdge {
    pub from: ProvNodeId,
    pub to: ProvNodeId,
    pub kind: EdgeKind,
}

/// Ancestry of one node, edges followed backwards. Shared ancestors are
/// expanded once; later encounters become `revisited` leaves.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AncestryTree {
    pub root: ProvNodeId,
    pub children: Vec<AncestryTree>,
    /// Levels traversed beneath this node.
    pub depth: u32,
    pub revisited: bool,
}

impl AncestryTree {
    /// Every node id in the tree, root included.
    pub fn node_ids(&self) -> BTreeSet<ProvNodeId> {
        let mut out = BTreeSet::new();
        let mut stack = vec![self];
        while let Some(tree) = stack.pop() {
            out.insert(tree.root.clone());
            stack.extend(tree.children.iter());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DescendantSet {
    pub root: ProvNodeId,
    pub members: BTreeSet<ProvNodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DotScope {
    Whole,
    Bol(BolId),
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("refusing to build on a failed chain: violation at seq={seq} cause={cause}")]
    LedgerInvalid { seq: u64, cause: ViolationCause },
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("node {0} is not in the graph")]
    UnknownProvNode(ProvNodeId),
    #[error("no BoL {0}")]
    UnknownBol(BolId),
    #[error("edge endpoint {0} has no node")]
    DanglingEdge(ProvNodeId),
    #[error("graph admits no topological order (cycle through {0})")]
    CyclicGraph(ProvNodeId),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProvenanceGraph {
    nodes: BTreeMap<ProvNodeId, ProvNode>,
    edges: Vec<ProvEdge>,
    fwd: BTreeMap<ProvNodeId, BTreeSet<ProvNodeId>>,
    rev: BTreeMap<ProvNodeId, BTreeSet<ProvNodeId>>,
}

impl ProvenanceGraph {
    /// Assemble a graph from explicit parts, checking that every edge
    /// endpoint exists and that the result is acyclic.
    pub fn from_parts(
        nodes: Vec<ProvNode>,
        edges: Vec<ProvEdge>,
    ) -> Result<ProvenanceGraph, TraceError> {
        let nodes: BTreeMap<ProvNodeId, ProvNode> =
            nodes.into_iter().map(|n| (n.id.clone(), n)).collect();
        let edges: BTreeSet<ProvEdge> = edges.into_iter().collect();

        let mut fwd: BTreeMap<ProvNodeId, BTreeSet<ProvNodeId>> = BTreeMap::new();
        let mut rev: BTreeMap<ProvNodeId, BTreeSet<ProvNodeId>> = BTreeMap::new();
        for edge in &edges {
            for end in [&edge.from, &edge.to] {
                if !nodes.contains_key(end) {
                    return Err(TraceError::DanglingEdge(end.clone()));
                }
            }
            fwd.entry(edge.from.clone()).or_default().insert(edge.to.clone());
            rev.entry(edge.to.clone()).or_default().insert(edge.from.clone());
        }

        let graph = ProvenanceGraph { nodes, edges: edges.into_iter().collect(), fwd, rev };
        graph.check_acyclic()?;
        Ok(graph)
    }

    fn check_acyclic(&self) -> Result<(), TraceError> {
        let mut indegree: BTreeMap<&ProvNodeId, usize> =
            self.nodes.keys().map(|id| (id, 0)).collect();
        for targets in self.fwd.values() {
            for to in targets {
                *indegree.get_mut(to).expect("endpoint checked") += 1;
            }
        }
        let mut ready: Vec<&ProvNodeId> =
            indegree.iter().filter(|(_, d)| **d == 0).map(|(id, _)| *id).collect();
        let mut emitted = 0usize;
        while let Some(id) = ready.pop() {
            emitted += 1;
            if let Some(targets) = self.fwd.get(id) {
                for to in targets {
                    let d = indegree.get_mut(to).expect("endpoint checked");
                    *d -= 1;
                    if *d == 0 {
                        ready.push(to);
                    }
                }
            }
        }
        if emitted < self.nodes.len() {
            let stuck = indegree
                .into_iter()
                .find(|(_, d)| *d > 0)
                .map(|(id, _)| id.clone())
                .expect("cycle has a member");
            return Err(TraceError::CyclicGraph(stuck));
        }
        Ok(())
    }

    /// Build the graph for every sealed or aborted BoL in a verified
    /// ledger.
    pub fn build(ledger: &Ledger, blobs: &BlobStore) -> Result<ProvenanceGraph, TraceError> {
        if let VerificationReport::Violation { seq, cause } = ledger.verify() {
            return Err(TraceError::LedgerInvalid { seq, cause });
        }
        let state = EcosystemState::replay(ledger, blobs)?;

        // rid -> payload content address, for delivery correlation.
        let mut payloads: BTreeMap<RequestId, ContentRef> = BTreeMap::new();
        for entry in ledger.entries() {
            if let LedgerEvent::DataDelivered { request_id, payload_ref, .. } = &entry.event {
                payloads.insert(*request_id, *payload_ref);
            }
        }

        let mut nodes: Vec<ProvNode> = Vec::new();
        let mut edges: Vec<ProvEdge> = Vec::new();
        // Producer-side facts for cross linking: effective content of every
        // output shadow, keyed for deterministic iteration.
        struct Terminal {
            bol_id: BolId,
            at: u64,
            outputs: Vec<(NodeId, ContentRef)>,
            inputs: Vec<(NodeId, ContentRef, Option<RequestId>)>,
            artifacts: Vec<(NodeId, ContentRef)>,
        }
        let mut terminals: Vec<Terminal> = Vec::new();

        for (bol_id, bol) in &state.bols {
            let at = match &bol.status {
                BolStatus::Open => continue,
                BolStatus::Sealed { sealed_at, .. } => *sealed_at,
                BolStatus::Aborted { aborted_at, .. } => *aborted_at,
            };
            let aborted = matches!(bol.status, BolStatus::Aborted { .. });
            let bom = state
                .boms
                .get(&bol.bom_ref)
                .expect("replay admits shadows only for registered BoMs");

            // Wiring sets from the BoM definition.
            let mut produced: BTreeSet<&NodeId> = BTreeSet::new();
            let mut consumed: BTreeSet<&NodeId> = BTreeSet::new();
            for assembly in &bom.def().assemblies {
                produced.extend(assembly.outputs.iter());
                consumed.extend(assembly.inputs.iter());
            }

            let mut terminal = Terminal {
                bol_id: *bol_id,
                at,
                outputs: Vec::new(),
                inputs: Vec::new(),
                artifacts: Vec::new(),
            };

            for (node, shadow) in &bol.shadows {
                let id = ProvNodeId::new(*bol_id, node.clone());
                let content = shadow.value.effective_ref();
                let kind = if bom.data_source(node).is_some() {
                    ProvKind::DataSourceInstance
                } else {
                    ProvKind::ArtifactInstance
                };
                nodes.push(ProvNode { id, kind, content: Some(content), aborted });

                match kind {
                    ProvKind::DataSourceInstance => {
                        if produced.contains(node) {
                            terminal.outputs.push((node.clone(), content));
                        }
                        if consumed.contains(node) {
                            let rid = match &shadow.provenance {
                                Provenance::Delivered { request_id } => Some(*request_id),
                                _ => None,
                            };
                            terminal.inputs.push((node.clone(), content, rid));
                        }
                    }
                    ProvKind::ArtifactInstance => {
                        terminal.artifacts.push((node.clone(), content));
                    }
                    ProvKind::AssemblyInstance => unreachable!("assemblies are not shadowable"),
                }
            }

            // An assembly instance exists once any of its endpoints was
            // shadowed; edges only touch shadowed endpoints.
            for assembly in &bom.def().assemblies {
                let endpoints = assembly
                    .inputs
                    .iter()
                    .chain(assembly.artifacts.iter())
                    .chain(assembly.outputs.iter());
                if !endpoints.clone().any(|n| bol.shadows.contains_key(n)) {
                    continue;
                }
                let asm_id = ProvNodeId::new(*bol_id, assembly.id.clone());
                nodes.push(ProvNode {
                    id: asm_id.clone(),
                    kind: ProvKind::AssemblyInstance,
                    content: None,
                    aborted,
                });
                for input in &assembly.inputs {
                    if bol.shadows.contains_key(input) {
                        edges.push(ProvEdge {
                            from: ProvNodeId::new(*bol_id, input.clone()),
                            to: asm_id.clone(),
                            kind: EdgeKind::FeedsAssembly,
                        });
                    }
                }
                for artifact in &assembly.artifacts {
                    if bol.shadows.contains_key(artifact) {
                        edges.push(ProvEdge {
                            from: ProvNodeId::new(*bol_id, artifact.clone()),
                            to: asm_id.clone(),
                            kind: EdgeKind::ConsumesArtifact,
                        });
                    }
                }
                for output in &assembly.outputs {
                    if bol.shadows.contains_key(output) {
                        edges.push(ProvEdge {
                            from: asm_id.clone(),
                            to: ProvNodeId::new(*bol_id, output.clone()),
                            kind: EdgeKind::ProducedBy,
                        });
                    }
                }
            }

            terminals.push(terminal);
        }

        // Cross-BoL edges always run from the earlier-terminal BoL to the
        // later one; ties break on the BoL id so rebuilds agree.
        let earlier = |a: &Terminal, b: &Terminal| (a.at, a.bol_id) < (b.at, b.bol_id);
        for producer in &terminals {
            for consumer in &terminals {
                if !earlier(producer, consumer) {
                    continue;
                }
                for (out_node, out_ref) in &producer.outputs {
                    let from = ProvNodeId::new(producer.bol_id, out_node.clone());
                    for (in_node, in_ref, rid) in &consumer.inputs {
                        let matched = in_ref == out_ref
                            || rid
                                .and_then(|r| payloads.get(&r))
                                .is_some_and(|payload| payload == out_ref);
                        if matched {
                            edges.push(ProvEdge {
                                from: from.clone(),
                                to: ProvNodeId::new(consumer.bol_id, in_node.clone()),
                                kind: EdgeKind::CrossBolContentMatch,
                            });
                        }
                    }
                    for (art_node, art_ref) in &consumer.artifacts {
                        if art_ref == out_ref {
                            edges.push(ProvEdge {
                                from: from.clone(),
                                to: ProvNodeId::new(consumer.bol_id, art_node.clone()),
                                kind: EdgeKind::ExplicitDerivedFrom,
                            });
                        }
                    }
                }
            }
        }

        ProvenanceGraph::from_parts(nodes, edges)
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, id: &ProvNodeId) -> Option<&ProvNode> {
        self.nodes.get(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &ProvNode> {
        self.nodes.values()
    }

    pub fn edges(&self) -> &[ProvEdge] {
        &self.edges
    }

    pub fn bol_ids(&self) -> BTreeSet<BolId> {
        self.nodes.keys().map(|id| id.bol_id).collect()
    }

    fn require(&self, id: &ProvNodeId) -> Result<(), TraceError> {
        if self.nodes.contains_key(id) {
            Ok(())
        } else {
            Err(TraceError::UnknownProvNode(id.clone()))
        }
    }

    fn neighbours<'a>(
        map: &'a BTreeMap<ProvNodeId, BTreeSet<ProvNodeId>>,
        id: &ProvNodeId,
    ) -> impl Iterator<Item = &'a ProvNodeId> + 'a {
        map.get(id).into_iter().flatten()
    }

    fn reach(
        &self,
        map: &BTreeMap<ProvNodeId, BTreeSet<ProvNodeId>>,
        start: &ProvNodeId,
        max_depth: Option<u32>,
    ) -> BTreeSet<ProvNodeId> {
        let mut out = BTreeSet::new();
        let mut frontier = vec![start.clone()];
        let mut level = 0u32;
        while !frontier.is_empty() && max_depth.is_none_or(|d| level < d) {
            let mut next = Vec::new();
            for id in frontier {
                for n in Self::neighbours(map, &id) {
                    if n != start && out.insert(n.clone()) {
                        next.push(n.clone());
                    }
                }
            }
            frontier = next;
            level += 1;
        }
        out
    }

    /// Everything `id` was derived from, directly or transitively.
    pub fn ancestors(&self, id: &ProvNodeId) -> Result<BTreeSet<ProvNodeId>, TraceError> {
        self.require(id)?;
        Ok(self.reach(&self.rev, id, None))
    }

    /// Everything derived from `id`, directly or transitively.
    pub fn descendants(&self, id: &ProvNodeId) -> Result<BTreeSet<ProvNodeId>, TraceError> {
        self.require(id)?;
        Ok(self.reach(&self.fwd, id, None))
    }

    pub fn trace(
        &self,
        id: &ProvNodeId,
        max_depth: Option<u32>,
    ) -> Result<AncestryTree, TraceError> {
        self.require(id)?;
        let mut seen = BTreeSet::from([id.clone()]);
        Ok(self.expand(id, max_depth, &mut seen))
    }

    fn expand(
        &self,
        id: &ProvNodeId,
        remaining: Option<u32>,
        seen: &mut BTreeSet<ProvNodeId>,
    ) -> AncestryTree {
        let mut children = Vec::new();
        if remaining != Some(0) {
            let deeper = remaining.map(|d| d - 1);
            for parent in Self::neighbours(&self.rev, id) {
                if seen.insert(parent.clone()) {
                    children.push(self.expand(parent, deeper, seen));
                } else {
                    children.push(AncestryTree {
                        root: parent.clone(),
                        children: Vec::new(),
                        depth: 0,
                        revisited: true,
                    });
                }
            }
        }
        let depth = children.iter().map(|c| c.depth + 1).max().unwrap_or(0);
        AncestryTree { root: id.clone(), children, depth, revisited: false }
    }

    pub fn track(
        &self,
        id: &ProvNodeId,
        max_depth: Option<u32>,
    ) -> Result<DescendantSet, TraceError> {
        self.require(id)?;
        Ok(DescendantSet { root: id.clone(), members: self.reach(&self.fwd, id, max_depth) })
    }

    /// Total settled payments behind one BoL: escrow that actually moved
    /// for requests whose deliveries this BoL recorded. Refunds count zero.
    pub fn cost_rollup(&self, ledger: &Ledger, bol_id: BolId) -> Result<Money, TraceError> {
        let mut known = false;
        let mut rids: BTreeSet<RequestId> = BTreeSet::new();
        for entry in ledger.entries() {
            match &entry.event {
                LedgerEvent::BolOpened { .. }
                    if entry.entry_hash == bol_id.content_ref() =>
                {
                    known = true;
                }
                LedgerEvent::ShadowRecorded { bol_id: owner, shadow } if *owner == bol_id => {
                    if let Provenance::Delivered { request_id } = &shadow.provenance {
                        rids.insert(*request_id);
                    }
                }
                _ => {}
            }
        }
        if !known {
            return Err(TraceError::UnknownBol(bol_id));
        }
        let mut total: u128 = 0;
        for entry in ledger.entries() {
            if let LedgerEvent::PaymentSettled { request_id, amount, .. } = &entry.event {
                if rids.contains(request_id) {
                    total += *amount as u128;
                }
            }
        }
        Ok(Money::try_from(total).unwrap_or(Money::MAX))
    }

    /// Render as DOT: one cluster per BoL, shadow instances as boxes
    /// labelled `name@bol-prefix`, assemblies as ellipses, cross-BoL edges
    /// dashed. Output is byte-deterministic for a given graph.
    pub fn export_dot(&self, scope: DotScope) -> Result<String, TraceError> {
        let keep: Box<dyn Fn(&ProvNodeId) -> bool> = match scope {
            DotScope::Whole => Box::new(|_| true),
            DotScope::Bol(bol_id) => {
                if !self.nodes.keys().any(|id| id.bol_id == bol_id) {
                    return Err(TraceError::UnknownBol(bol_id));
                }
                Box::new(move |id| id.bol_id == bol_id)
            }
        };

        // In-scope nodes, plus the far endpoints of cross edges touching
        // the scope so those edges stay drawable.
        let mut included: BTreeSet<&ProvNodeId> =
            self.nodes.keys().filter(|id| keep(id)).collect();
        let mut drawn_edges: Vec<&ProvEdge> = Vec::new();
        for edge in &self.edges {
            if keep(&edge.from) || keep(&edge.to) {
                included.insert(&edge.from);
                included.insert(&edge.to);
                drawn_edges.push(edge);
            }
        }

        if included.is_empty() {
            return Ok("digraph provenance {}\n".to_string());
        }

        let mut clusters: BTreeMap<BolId, Vec<&ProvNodeId>> = BTreeMap::new();
        for id in &included {
            clusters.entry(id.bol_id).or_default().push(id);
        }

        let mut out = String::new();
        out.push_str("digraph provenance {\n");
        out.push_str("  rankdir=LR;\n");
        for (bol_id, ids) in &clusters {
            let aborted = ids
                .iter()
                .any(|id| self.nodes.get(*id).map(|n| n.aborted).unwrap_or(false));
            let status = if aborted { " [aborted]" } else { "" };
            out.push_str(&format!("  subgraph \"cluster_{}\" {{\n", bol_id.short()));
            out.push_str(&format!("    label=\"bol {}{}\";\n", bol_id.short(), status));
            for id in ids {
                let shape = match self.nodes[*id].kind {
                    ProvKind::AssemblyInstance => "ellipse",
                    _ => "box",
                };
                out.push_str(&format!("    \"{}\" [shape={}];\n", id.qualified(), shape));
            }
            out.push_str("  }\n");
        }
        for edge in drawn_edges {
            let style = if edge.kind.is_cross_bol() { " [style=dashed]" } else { "" };
            out.push_str(&format!(
                "  \"{}\" -> \"{}\"{};\n",
                edge.from.qualified(),
                edge.to.qualified(),
                style
            ));
        }
        out.push_str("}\n");
        Ok(out)
    }
}
