//! Workflow graphs: directed acyclic graphs of operator nodes bound to models.
//!
//! A [`WorkflowGraph`] is an immutable value. Every edit ([`remove_node_with_patch`],
//! [`substitute_model`]) returns a new graph and leaves its input untouched.
//!
//! Nodes and edges are kept sorted by id so that serialization, digests and
//! topological orders are byte-stable for equal graphs.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::PricingTable;

/// Identifier of a node, unique within a graph.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        Self::new(s)
    }
}

/// Identifier of a priced model (e.g. `gpt-4.1-mini`).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelId(String);

impl ModelId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ModelId {
    fn from(s: &str) -> Self {
        Self::new(s)
    }
}

/// Operator catalogue. `Other` carries user-defined kinds verbatim.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OperatorKind {
    Input,
    AnswerGenerate,
    Programmer,
    CustomCodeGenerate,
    Test,
    ScEnsemble,
    CodeRefine,
    Custom,
    AnswerFormat { dataset: String },
    Other(String),
}

impl OperatorKind {
    pub fn tag(&self) -> &str {
        match self {
            OperatorKind::Input => "Input",
            OperatorKind::AnswerGenerate => "AnswerGenerate",
            OperatorKind::Programmer => "Programmer",
            OperatorKind::CustomCodeGenerate => "CustomCodeGenerate",
            OperatorKind::Test => "Test",
            OperatorKind::ScEnsemble => "ScEnsemble",
            OperatorKind::CodeRefine => "CodeRefine",
            OperatorKind::Custom => "Custom",
            OperatorKind::AnswerFormat { .. } => "AnswerFormat",
            OperatorKind::Other(tag) => tag,
        }
    }

    fn from_parts(tag: &str, dataset: Option<String>) -> Result<Self, String> {
        let kind = match tag {
            "Input" => OperatorKind::Input,
            "AnswerGenerate" => OperatorKind::AnswerGenerate,
            "Programmer" => OperatorKind::Programmer,
            "CustomCodeGenerate" => OperatorKind::CustomCodeGenerate,
            "Test" => OperatorKind::Test,
            "ScEnsemble" => OperatorKind::ScEnsemble,
            "CodeRefine" => OperatorKind::CodeRefine,
            "Custom" => OperatorKind::Custom,
            "AnswerFormat" => match dataset {
                Some(dataset) => OperatorKind::AnswerFormat { dataset },
                None => return Err("AnswerFormat operator requires a `dataset` field".into()),
            },
            "" => return Err("operator tag must not be empty".into()),
            other => OperatorKind::Other(other.to_string()),
        };
        Ok(kind)
    }

    /// Operators that produce candidate answers and can be duplicated for ensembling.
    pub fn is_generator(&self) -> bool {
        matches!(
            self,
            OperatorKind::AnswerGenerate
                | OperatorKind::Programmer
                | OperatorKind::CustomCodeGenerate
                | OperatorKind::Custom
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkflowNode {
    pub id: NodeId,
    pub operator: OperatorKind,
    pub model: ModelId,
    pub prompt_ref: Option<String>,
    pub description: String,
    pub protected: bool,
}

impl WorkflowNode {
    pub fn new(id: impl Into<NodeId>, operator: OperatorKind, model: impl Into<ModelId>) -> Self {
        Self {
            id: id.into(),
            operator,
            model: model.into(),
            prompt_ref: None,
            description: String::new(),
            protected: false,
        }
    }

    pub fn with_prompt(mut self, prompt_ref: impl Into<String>) -> Self {
        self.prompt_ref = Some(prompt_ref.into());
        self
    }

    pub fn with_description(mut self, description: impl Into<String>) -> Self {
        self.description = description.into();
        self
    }

    pub fn protected(mut self) -> Self {
        self.protected = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub source: NodeId,
    pub target: NodeId,
}

impl Edge {
    pub fn new(source: impl Into<NodeId>, target: impl Into<NodeId>) -> Self {
        Self {
            source: source.into(),
            target: target.into(),
        }
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.source, self.target)
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),
    #[error("node `{0}` is protected")]
    ProtectedNode(NodeId),
    #[error("graph contains a cycle through {0:?}")]
    Cyclic(Vec<NodeId>),
    #[error("model `{0}` has no entry in the pricing table")]
    UnpricedModel(ModelId),
    #[error("invalid workflow graph: {0}")]
    Invalid(ValidationReport),
    #[error("malformed workflow document: {0}")]
    Document(#[from] serde_json::Error),
    #[error("invalid edit: {0}")]
    InvalidEdit(String),
}

/// One violated graph invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyNodeId,
    DuplicateNode(NodeId),
    SelfLoop(NodeId),
    DuplicateEdge(Edge),
    DanglingEdge(Edge),
    NoEntry,
    UnknownEntry(NodeId),
    UnknownFinal(NodeId),
    Cycle(Vec<NodeId>),
    Unreachable(NodeId),
    FinalUnreachable { entry: NodeId, final_id: NodeId },
    InputWithPrompt(NodeId),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyNodeId => write!(f, "node with empty id"),
            Violation::DuplicateNode(id) => write!(f, "duplicate node id {id}"),
            Violation::SelfLoop(id) => write!(f, "self-loop at {id}"),
            Violation::DuplicateEdge(e) => write!(f, "duplicate edge {e}"),
            Violation::DanglingEdge(e) => write!(f, "edge {e} references a missing node"),
            Violation::NoEntry => write!(f, "no entry nodes"),
            Violation::UnknownEntry(id) => write!(f, "entry {id} is not a node"),
            Violation::UnknownFinal(id) => write!(f, "final node {id} is not a node"),
            Violation::Cycle(ids) => {
                let names: Vec<&str> = ids.iter().map(NodeId::as_str).collect();
                write!(f, "cycle among {}", names.join(", "))
            }
            Violation::Unreachable(id) => write!(f, "node {id} is unreachable from every entry"),
            Violation::FinalUnreachable { entry, final_id } => {
                write!(f, "final node {final_id} is unreachable from entry {entry}")
            }
            Violation::InputWithPrompt(id) => write!(f, "input node {id} carries a prompt"),
        }
    }
}

/// Non-fatal observations made during validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Notice {
    /// An unprotected node without successors; removing it adds no patch edges.
    DeadEnd(NodeId),
    /// An unprotected node without predecessors.
    Orphan(NodeId),
}

impl fmt::Display for Notice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Notice::DeadEnd(id) => write!(f, "unprotected node {id} has no successors"),
            Notice::Orphan(id) => write!(f, "unprotected node {id} has no predecessors"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub notices: Vec<Notice>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("ok");
        }
        let parts: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("; "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkflowGraph {
    nodes: Vec<WorkflowNode>,
    edges: Vec<Edge>,
    entry_ids: Vec<NodeId>,
    final_id: NodeId,
    description: String,
}

impl WorkflowGraph {
    /// Builds a graph in canonical form. Anchor nodes (entries and the final
    /// node) are marked protected. No invariant is checked here; see
    /// [`WorkflowGraph::validate`].
    pub fn new(
        nodes: Vec<WorkflowNode>,
        edges: Vec<Edge>,
        entry_ids: Vec<NodeId>,
        final_id: NodeId,
        description: impl Into<String>,
    ) -> Self {
        let mut nodes = nodes;
        let mut entry_ids = entry_ids;
        entry_ids.sort();
        entry_ids.dedup();
        for node in &mut nodes {
            if node.id == final_id || entry_ids.contains(&node.id) {
                node.protected = true;
            }
        }
        nodes.sort_by(|a, b| a.id.cmp(&b.id));
        let mut edges = edges;
        edges.sort();
        Self {
            nodes,
            edges,
            entry_ids,
            final_id,
            description: description.into(),
        }
    }

    pub fn nodes(&self) -> &[WorkflowNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn entry_ids(&self) -> &[NodeId] {
        &self.entry_ids
    }

    pub fn final_id(&self) -> &NodeId {
        &self.final_id
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: &NodeId) -> Option<&WorkflowNode> {
        self.nodes
            .binary_search_by(|n| n.id.cmp(id))
            .ok()
            .map(|i| &self.nodes[i])
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.node(id).is_some()
    }

    pub fn has_edge(&self, source: &NodeId, target: &NodeId) -> bool {
        self.edges
            .binary_search_by(|e| (&e.source, &e.target).cmp(&(source, target)))
            .is_ok()
    }

    /// Entry nodes, the final node and any node flagged protected.
    pub fn is_protected(&self, id: &NodeId) -> bool {
        id == &self.final_id || self.entry_ids.contains(id) || self.node(id).is_some_and(|n| n.protected)
    }

    /// Node ids that may be pruned or quantized.
    pub fn unprotected_ids(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| !self.is_protected(&n.id))
            .map(|n| n.id.clone())
            .collect()
    }

    pub fn predecessors(&self, id: &NodeId) -> Result<Vec<NodeId>, GraphError> {
        self.require(id)?;
        Ok(self
            .edges
            .iter()
            .filter(|e| &e.target == id)
            .map(|e| e.source.clone())
            .collect())
    }

    pub fn successors(&self, id: &NodeId) -> Result<Vec<NodeId>, GraphError> {
        self.require(id)?;
        Ok(self
            .edges
            .iter()
            .filter(|e| &e.source == id)
            .map(|e| e.target.clone())
            .collect())
    }

    pub fn in_degree(&self, id: &NodeId) -> usize {
        self.edges.iter().filter(|e| &e.target == id).count()
    }

    pub fn out_degree(&self, id: &NodeId) -> usize {
        self.edges.iter().filter(|e| &e.source == id).count()
    }

    fn require(&self, id: &NodeId) -> Result<&WorkflowNode, GraphError> {
        self.node(id).ok_or_else(|| GraphError::UnknownNode(id.clone()))
    }

    /// Checks every structural invariant and reports all violations found.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let mut seen = BTreeSet::new();
        for node in &self.nodes {
            if node.id.as_str().is_empty() {
                report.violations.push(Violation::EmptyNodeId);
            }
            if !seen.insert(&node.id) {
                report.violations.push(Violation::DuplicateNode(node.id.clone()));
            }
            if node.operator == OperatorKind::Input && node.prompt_ref.is_some() {
                report.violations.push(Violation::InputWithPrompt(node.id.clone()));
            }
        }

        let mut edge_set = BTreeSet::new();
        for edge in &self.edges {
            if edge.source == edge.target {
                report.violations.push(Violation::SelfLoop(edge.source.clone()));
            }
            if !edge_set.insert(edge) {
                report.violations.push(Violation::DuplicateEdge(edge.clone()));
            }
            if !seen.contains(&edge.source) || !seen.contains(&edge.target) {
                report.violations.push(Violation::DanglingEdge(edge.clone()));
            }
        }

        if self.entry_ids.is_empty() {
            report.violations.push(Violation::NoEntry);
        }
        for entry in &self.entry_ids {
            if !seen.contains(entry) {
                report.violations.push(Violation::UnknownEntry(entry.clone()));
            }
        }
        let final_known = seen.contains(&self.final_id);
        if !final_known {
            report.violations.push(Violation::UnknownFinal(self.final_id.clone()));
        }

        if let Err(GraphError::Cyclic(ids)) = self.topo_order() {
            report.violations.push(Violation::Cycle(ids));
        }

        let adjacency = self.adjacency();
        let mut reached = BTreeSet::new();
        for entry in self.entry_ids.iter().filter(|e| seen.contains(e)) {
            let from_entry = reachable_from(&adjacency, entry);
            if final_known && !from_entry.contains(&self.final_id) {
                report.violations.push(Violation::FinalUnreachable {
                    entry: entry.clone(),
                    final_id: self.final_id.clone(),
                });
            }
            reached.extend(from_entry);
        }
        for node in &self.nodes {
            if !reached.contains(&node.id) {
                report.violations.push(Violation::Unreachable(node.id.clone()));
            }
        }

        for node in &self.nodes {
            if self.is_protected(&node.id) {
                continue;
            }
            if self.out_degree(&node.id) == 0 {
                report.notices.push(Notice::DeadEnd(node.id.clone()));
            }
            if self.in_degree(&node.id) == 0 {
                report.notices.push(Notice::Orphan(node.id.clone()));
            }
        }
        report
    }

    /// Fails with the full report unless [`validate`](Self::validate) is clean.
    pub fn ensure_valid(&self) -> Result<(), GraphError> {
        let report = self.validate();
        if report.is_ok() {
            Ok(())
        } else {
            Err(GraphError::Invalid(report))
        }
    }

    fn adjacency(&self) -> BTreeMap<&NodeId, Vec<&NodeId>> {
        let mut adjacency: BTreeMap<&NodeId, Vec<&NodeId>> = BTreeMap::new();
        for edge in &self.edges {
            adjacency.entry(&edge.source).or_default().push(&edge.target);
        }
        adjacency
    }

    /// Kahn's algorithm; among ready nodes the smallest id goes first.
    pub fn topo_order(&self) -> Result<Vec<NodeId>, GraphError> {
        let ids: BTreeSet<&NodeId> = self.nodes.iter().map(|n| &n.id).collect();
        let mut indegree: BTreeMap<&NodeId, usize> = ids.iter().map(|id| (*id, 0)).collect();
        let adjacency = self.adjacency();
        for edge in &self.edges {
            if ids.contains(&edge.source) {
                if let Some(d) = indegree.get_mut(&edge.target) {
                    *d += 1;
                }
            }
        }
        let mut ready: BTreeSet<&NodeId> = indegree.iter().filter(|(_, d)| **d == 0).map(|(id, _)| *id).collect();
        let mut order = Vec::with_capacity(ids.len());
        while let Some(id) = ready.pop_first() {
            order.push(id.clone());
            for next in adjacency.get(id).into_iter().flatten() {
                if let Some(d) = indegree.get_mut(next) {
                    *d -= 1;
                    if *d == 0 {
                        ready.insert(next);
                    }
                }
            }
        }
        if order.len() < ids.len() {
            let done: BTreeSet<&NodeId> = order.iter().collect();
            let stuck = ids.into_iter().filter(|id| !done.contains(id)).cloned().collect();
            return Err(GraphError::Cyclic(stuck));
        }
        Ok(order)
    }

    /// SHA-256 of the canonical document, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_document().as_bytes()))
    }

    /// Canonical JSON document (nodes and edges sorted by id).
    pub fn to_document(&self) -> String {
        let doc = GraphDocument::from(self);
        let mut out = serde_json::to_string_pretty(&doc).expect("graph document serializes");
        out.push('\n');
        out
    }

    /// Parses and validates a workflow document.
    pub fn from_document(text: &str) -> Result<Self, GraphError> {
        let doc: GraphDocument = serde_json::from_str(text)?;
        let graph = doc.into_graph()?;
        graph.ensure_valid()?;
        Ok(graph)
    }

    /// Nodes whose model is missing from `pricing`.
    pub fn unpriced_models(&self, pricing: &PricingTable) -> Vec<ModelId> {
        let models: BTreeSet<&ModelId> = self.nodes.iter().map(|n| &n.model).collect();
        models.into_iter().filter(|m| !pricing.contains(m)).cloned().collect()
    }

    pub(crate) fn with_parts(&self, nodes: Vec<WorkflowNode>, edges: Vec<Edge>) -> Self {
        Self::new(
            nodes,
            edges,
            self.entry_ids.clone(),
            self.final_id.clone(),
            self.description.clone(),
        )
    }

    /// Ancestors of `id` (exclusive).
    pub fn ancestors(&self, id: &NodeId) -> BTreeSet<NodeId> {
        let mut reverse: BTreeMap<&NodeId, Vec<&NodeId>> = BTreeMap::new();
        for edge in &self.edges {
            reverse.entry(&edge.target).or_default().push(&edge.source);
        }
        let mut found = reachable_from(&reverse, id);
        found.remove(id);
        found
    }

    /// True if a directed path leads from `from` to `to` (a node reaches itself).
    pub fn reaches(&self, from: &NodeId, to: &NodeId) -> bool {
        reachable_from(&self.adjacency(), from).contains(to)
    }
}

fn reachable_from(adjacency: &BTreeMap<&NodeId, Vec<&NodeId>>, start: &NodeId) -> BTreeSet<NodeId> {
    let mut seen = BTreeSet::new();
    let mut queue = VecDeque::from([start.clone()]);
    seen.insert(start.clone());
    while let Some(id) = queue.pop_front() {
        for next in adjacency.get(&id).into_iter().flatten() {
            if seen.insert((*next).clone()) {
                queue.push_back((*next).clone());
            }
        }
    }
    seen
}

/// Removes `victim` and connects each predecessor to each successor.
///
/// Patch edges are added only where absent; self-loops are never created.
pub fn remove_node_with_patch(graph: &WorkflowGraph, victim: &NodeId) -> Result<WorkflowGraph, GraphError> {
    graph.require(victim)?;
    if graph.is_protected(victim) {
        return Err(GraphError::ProtectedNode(victim.clone()));
    }
    let preds = graph.predecessors(victim)?;
    let succs = graph.successors(victim)?;

    let mut edges: BTreeSet<Edge> = graph
        .edges
        .iter()
        .filter(|e| &e.source != victim && &e.target != victim)
        .cloned()
        .collect();
    for s in &preds {
        for t in &succs {
            if s != t {
                edges.insert(Edge::new(s.clone(), t.clone()));
            }
        }
    }
    let nodes = graph.nodes.iter().filter(|n| &n.id != victim).cloned().collect();
    Ok(graph.with_parts(nodes, edges.into_iter().collect()))
}

/// Rebinds `target` to `surrogate`, keeping the topology identical.
pub fn substitute_model(
    graph: &WorkflowGraph,
    target: &NodeId,
    surrogate: &ModelId,
    pricing: &PricingTable,
) -> Result<WorkflowGraph, GraphError> {
    graph.require(target)?;
    if graph.is_protected(target) {
        return Err(GraphError::ProtectedNode(target.clone()));
    }
    if !pricing.contains(surrogate) {
        return Err(GraphError::UnpricedModel(surrogate.clone()));
    }
    let nodes = graph
        .nodes
        .iter()
        .map(|n| {
            let mut n = n.clone();
            if &n.id == target {
                n.model = surrogate.clone();
            }
            n
        })
        .collect();
    Ok(graph.with_parts(nodes, graph.edges.clone()))
}

// On-disk document. Unknown keys (edge labels and the like) are ignored.

#[derive(Debug, Serialize, Deserialize)]
struct GraphDocument {
    nodes: Vec<NodeDocument>,
    edges: Vec<Edge>,
    entry_ids: Vec<NodeId>,
    final_id: NodeId,
    #[serde(default)]
    description: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeDocument {
    id: NodeId,
    operator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dataset: Option<String>,
    model: ModelId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prompt_ref: Option<String>,
    #[serde(default, skip_serializing_if = "is_false")]
    protected: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    description: String,
}

fn is_false(b: &bool) -> bool {
    !*b
}

impl From<&WorkflowGraph> for GraphDocument {
    fn from(graph: &WorkflowGraph) -> Self {
        let nodes = graph
            .nodes
            .iter()
            .map(|n| NodeDocument {
                id: n.id.clone(),
                operator: n.operator.tag().to_string(),
                dataset: match &n.operator {
                    OperatorKind::AnswerFormat { dataset } => Some(dataset.clone()),
                    _ => None,
                },
                model: n.model.clone(),
                prompt_ref: n.prompt_ref.clone(),
                protected: n.protected,
                description: n.description.clone(),
            })
            .collect();
        Self {
            nodes,
            edges: graph.edges.clone(),
            entry_ids: graph.entry_ids.clone(),
            final_id: graph.final_id.clone(),
            description: graph.description.clone(),
        }
    }
}

impl GraphDocument {
    fn into_graph(self) -> Result<WorkflowGraph, GraphError> {
        let mut nodes = Vec::with_capacity(self.nodes.len());
        for n in self.nodes {
            let operator = OperatorKind::from_parts(&n.operator, n.dataset)
                .map_err(|msg| GraphError::InvalidEdit(format!("node {}: {msg}", n.id)))?;
            nodes.push(WorkflowNode {
                id: n.id,
                operator,
                model: n.model,
                prompt_ref: n.prompt_ref,
                description: n.description,
                protected: n.protected,
            });
        }
        Ok(WorkflowGraph::new(
            nodes,
            self.edges,
            self.entry_ids,
            self.final_id,
            self.description,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const M: &str = "gpt-4.1-mini";

    fn node(id: &str) -> WorkflowNode {
        WorkflowNode::new(id, OperatorKind::Custom, M)
    }

    pub(crate) fn chain() -> WorkflowGraph {
        WorkflowGraph::new(
            vec![
                WorkflowNode::new("Input", OperatorKind::Input, M),
                node("Reasoner").with_prompt("PROMPT_REASONING"),
                WorkflowNode::new(
                    "AnswerFormatter",
                    OperatorKind::AnswerFormat { dataset: "MATH".into() },
                    M,
                ),
            ],
            vec![Edge::new("Input", "Reasoner"), Edge::new("Reasoner", "AnswerFormatter")],
            vec!["Input".into()],
            "AnswerFormatter".into(),
            "Minimal MATH round_1 workflow.",
        )
    }

    fn build(ids: &[&str], edges: &[(&str, &str)], entry: &str, fin: &str) -> WorkflowGraph {
        WorkflowGraph::new(
            ids.iter().map(|id| node(id)).collect(),
            edges.iter().map(|(s, t)| Edge::new(*s, *t)).collect(),
            vec![entry.into()],
            fin.into(),
            "",
        )
    }

    #[test]
    fn minimal_chain_is_valid() {
        let report = chain().validate();
        assert!(report.is_ok(), "{report}");
        assert!(report.notices.is_empty());
    }

    #[test]
    fn anchors_are_protected() {
        let g = chain();
        assert!(g.is_protected(&"Input".into()));
        assert!(g.is_protected(&"AnswerFormatter".into()));
        assert!(!g.is_protected(&"Reasoner".into()));
        assert_eq!(g.unprotected_ids(), vec![NodeId::from("Reasoner")]);
    }

    #[test]
    fn self_loop_is_reported() {
        let g = build(&["i", "a", "f"], &[("i", "a"), ("a", "a"), ("a", "f")], "i", "f");
        let report = g.validate();
        assert!(report.violations.iter().any(|v| v.to_string() == "self-loop at a"));
    }

    #[test]
    fn unreachable_final_names_final_id() {
        let g = build(&["i", "a", "f"], &[("i", "a")], "i", "f");
        let report = g.validate();
        assert!(!report.is_ok());
        assert!(report.violations.contains(&Violation::FinalUnreachable {
            entry: "i".into(),
            final_id: "f".into()
        }));
        assert!(report.to_string().contains('f'));
    }

    #[test]
    fn duplicate_and_dangling_edges_are_reported() {
        let g = build(&["i", "f"], &[("i", "f"), ("i", "f"), ("i", "ghost")], "i", "f");
        let report = g.validate();
        assert!(report
            .violations
            .contains(&Violation::DuplicateEdge(Edge::new("i", "f"))));
        assert!(report
            .violations
            .contains(&Violation::DanglingEdge(Edge::new("i", "ghost"))));
    }

    #[test]
    fn cycle_is_reported_and_topo_fails() {
        let g = build(
            &["i", "a", "b", "f"],
            &[("i", "a"), ("a", "b"), ("b", "a"), ("b", "f")],
            "i",
            "f",
        );
        assert!(matches!(g.topo_order(), Err(GraphError::Cyclic(_))));
        assert!(g.validate().violations.iter().any(|v| matches!(v, Violation::Cycle(_))));
    }

    #[test]
    fn input_with_prompt_is_reported() {
        let g = WorkflowGraph::new(
            vec![
                WorkflowNode::new("i", OperatorKind::Input, M).with_prompt("p"),
                node("f"),
            ],
            vec![Edge::new("i", "f")],
            vec!["i".into()],
            "f".into(),
            "",
        );
        assert!(g
            .validate()
            .violations
            .contains(&Violation::InputWithPrompt("i".into())));
    }

    #[test]
    fn dead_end_node_is_flagged_not_rejected() {
        let g = build(&["i", "d", "f"], &[("i", "d"), ("i", "f")], "i", "f");
        let report = g.validate();
        assert!(report.is_ok());
        assert_eq!(report.notices, vec![Notice::DeadEnd("d".into())]);
        let pruned = remove_node_with_patch(&g, &"d".into()).unwrap();
        assert_eq!(pruned.edges(), &[Edge::new("i", "f")]);
    }

    #[test]
    fn remove_from_chain_patches_edge() {
        let g = build(&["a", "v", "b"], &[("a", "v"), ("v", "b")], "a", "b");
        let out = remove_node_with_patch(&g, &"v".into()).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out.edges(), &[Edge::new("a", "b")]);
        assert!(out.validate().is_ok());
        // input untouched
        assert_eq!(g.len(), 3);
    }

    #[test]
    fn remove_from_diamond_does_not_duplicate() {
        let g = build(&["a", "v", "b"], &[("a", "v"), ("a", "b"), ("v", "b")], "a", "b");
        let out = remove_node_with_patch(&g, &"v".into()).unwrap();
        assert_eq!(out.edges(), &[Edge::new("a", "b")]);
    }

    #[test]
    fn remove_fan_in_fan_out_adds_cross_product() {
        // {a,c} -> v -> {b,d}; entries a and c, b -> d -> f keeps f reachable.
        let g = WorkflowGraph::new(
            ["a", "b", "c", "d", "v", "f"].iter().map(|id| node(id)).collect(),
            vec![
                Edge::new("a", "v"),
                Edge::new("c", "v"),
                Edge::new("v", "b"),
                Edge::new("v", "d"),
                Edge::new("b", "f"),
                Edge::new("d", "f"),
            ],
            vec!["a".into(), "c".into()],
            "f".into(),
            "",
        );
        assert!(g.validate().is_ok());
        let out = remove_node_with_patch(&g, &"v".into()).unwrap();
        // brute-force In(v) x Out(v)
        let preds = g.predecessors(&"v".into()).unwrap();
        let succs = g.successors(&"v".into()).unwrap();
        let mut expected = Vec::new();
        for s in &preds {
            for t in &succs {
                expected.push(Edge::new(s.clone(), t.clone()));
            }
        }
        assert_eq!(expected.len(), 4);
        for e in &expected {
            assert!(out.has_edge(&e.source, &e.target), "missing {e}");
        }
        assert_eq!(out.edges().len(), 4 + 2);
        assert!(out.validate().is_ok());
    }

    #[test]
    fn remove_errors() {
        let g = chain();
        assert!(matches!(
            remove_node_with_patch(&g, &"nope".into()),
            Err(GraphError::UnknownNode(_))
        ));
        assert!(matches!(
            remove_node_with_patch(&g, &"Input".into()),
            Err(GraphError::ProtectedNode(_))
        ));
    }

    #[test]
    fn flagged_node_is_protected() {
        let mut nodes = vec![node("i"), node("v").protected(), node("f")];
        nodes.swap(0, 2);
        let g = WorkflowGraph::new(
            nodes,
            vec![Edge::new("i", "v"), Edge::new("v", "f")],
            vec!["i".into()],
            "f".into(),
            "",
        );
        assert!(matches!(
            remove_node_with_patch(&g, &"v".into()),
            Err(GraphError::ProtectedNode(_))
        ));
        assert!(g.unprotected_ids().is_empty());
    }

    #[test]
    fn topo_order_chain_and_ties() {
        let g = build(&["a", "b", "c"], &[("a", "b"), ("b", "c")], "a", "c");
        let ids: Vec<String> = g.topo_order().unwrap().iter().map(|n| n.to_string()).collect();
        assert_eq!(ids, ["a", "b", "c"]);

        let g = build(
            &["root", "zeta", "alpha", "end"],
            &[("root", "zeta"), ("root", "alpha"), ("zeta", "end"), ("alpha", "end")],
            "root",
            "end",
        );
        let ids: Vec<String> = g.topo_order().unwrap().iter().map(|n| n.to_string()).collect();
        assert_eq!(ids, ["root", "alpha", "zeta", "end"]);
    }

    #[test]
    fn predecessors_and_successors() {
        let g = chain();
        assert_eq!(g.predecessors(&"Reasoner".into()).unwrap(), vec![NodeId::from("Input")]);
        assert_eq!(
            g.successors(&"Reasoner".into()).unwrap(),
            vec![NodeId::from("AnswerFormatter")]
        );
        assert!(g.successors(&"x".into()).is_err());
    }

    #[test]
    fn document_round_trip_is_byte_identical() {
        let g = chain();
        let doc = g.to_document();
        let back = WorkflowGraph::from_document(&doc).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.to_document(), doc);
        assert_eq!(back.digest(), g.digest());
    }

    #[test]
    fn missing_final_id_names_field() {
        let text = r#"{"nodes": [], "edges": [], "entry_ids": ["a"]}"#;
        let err = WorkflowGraph::from_document(text).unwrap_err();
        assert!(matches!(err, GraphError::Document(_)));
        assert!(err.to_string().contains("final_id"), "{err}");
    }

    #[test]
    fn invalid_document_is_rejected() {
        let text = r#"{
            "nodes": [
                {"id": "i", "operator": "Input", "model": "m"},
                {"id": "f", "operator": "Custom", "model": "m"}
            ],
            "edges": [{"source": "f", "target": "f"}],
            "entry_ids": ["i"],
            "final_id": "f"
        }"#;
        assert!(matches!(
            WorkflowGraph::from_document(text),
            Err(GraphError::Invalid(_))
        ));
    }

    #[test]
    fn edge_labels_are_dropped() {
        let text = r#"{
            "nodes": [
                {"id": "i", "operator": "Input", "model": "m"},
                {"id": "f", "operator": "Custom", "model": "m"}
            ],
            "edges": [{"source": "i", "target": "f", "label": "answer"}],
            "entry_ids": ["i"],
            "final_id": "f"
        }"#;
        let g = WorkflowGraph::from_document(text).unwrap();
        assert!(!g.to_document().contains("label"));
    }

    #[test]
    fn answer_format_requires_dataset() {
        let text = r#"{
            "nodes": [
                {"id": "i", "operator": "Input", "model": "m"},
                {"id": "f", "operator": "AnswerFormat", "model": "m"}
            ],
            "edges": [{"source": "i", "target": "f"}],
            "entry_ids": ["i"],
            "final_id": "f"
        }"#;
        assert!(WorkflowGraph::from_document(text).is_err());
    }

    #[test]
    fn user_defined_operator_survives_round_trip() {
        let g = WorkflowGraph::new(
            vec![
                WorkflowNode::new("i", OperatorKind::Input, M),
                WorkflowNode::new("x", OperatorKind::Other("Critic".into()), M),
                node("f"),
            ],
            vec![Edge::new("i", "x"), Edge::new("x", "f")],
            vec!["i".into()],
            "f".into(),
            "",
        );
        let back = WorkflowGraph::from_document(&g.to_document()).unwrap();
        assert_eq!(
            back.node(&"x".into()).unwrap().operator,
            OperatorKind::Other("Critic".into())
        );
    }
}
