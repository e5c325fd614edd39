//! Seeded generators for synthetic workflows and tasks.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::json;

use slim_core::compressor::SurrogateMap;
use slim_core::eval::{DatasetInstance, NodeProfile, PricingTable, SyntheticTaskSpec};
use slim_core::graph::{Edge, ModelId, NodeId, OperatorKind, WorkflowGraph, WorkflowNode};

pub const HI: &str = "hi";
pub const LO: &str = "lo";
pub const HI_RATES: (f64, f64) = (1e-6, 4e-6);
pub const LO_RATES: (f64, f64) = (2.5e-7, 1e-6);

pub fn pricing() -> PricingTable {
    PricingTable::new()
        .with(HI, HI_RATES.0, HI_RATES.1)
        .with(LO, LO_RATES.0, LO_RATES.1)
}

pub fn surrogates() -> SurrogateMap {
    SurrogateMap::new(BTreeMap::from([(ModelId::from(HI), ModelId::from(LO))])).unwrap()
}

pub fn instances(n: usize) -> Vec<DatasetInstance> {
    (0..n)
        .map(|i| DatasetInstance::new(format!("t{i}"), format!("problem {i}"), json!(i)))
        .collect()
}

pub fn mid(i: usize) -> NodeId {
    NodeId::new(format!("v{i}"))
}

/// Arbitrary directed acyclic graph on `n` nodes with shuffled labels.
pub fn random_dag<R: Rng>(rng: &mut R, n: usize, p: f64) -> WorkflowGraph {
    let mut labels: Vec<usize> = (0..n).collect();
    labels.shuffle(rng);
    let id = |i: usize| NodeId::new(format!("n{}", labels[i]));
    let nodes = (0..n)
        .map(|i| WorkflowNode::new(id(i), OperatorKind::Custom, HI))
        .collect();
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.gen_bool(p) {
                edges.push(Edge::new(id(a), id(b)));
            }
        }
    }
    WorkflowGraph::new(nodes, edges, vec![id(0)], id(n - 1), "")
}

/// Valid workflow `in -> v0..v{m-1} -> out`: every middle node has a
/// predecessor earlier in the chain and a successor later in it, plus
/// random forward edges.
pub fn layered_workflow<R: Rng>(rng: &mut R, m: usize, extra: f64) -> WorkflowGraph {
    let order: Vec<NodeId> = std::iter::once(NodeId::from("in"))
        .chain((0..m).map(mid))
        .chain(std::iter::once(NodeId::from("out")))
        .collect();
    let mut edges = BTreeSet::new();
    for i in 1..=m {
        let pred = rng.gen_range(0..i);
        let succ = rng.gen_range(i + 1..order.len());
        edges.insert(Edge::new(order[pred].clone(), order[i].clone()));
        edges.insert(Edge::new(order[i].clone(), order[succ].clone()));
    }
    if m == 0 {
        edges.insert(Edge::new("in", "out"));
    }
    for a in 0..order.len() {
        for b in a + 1..order.len() {
            if rng.gen_bool(extra) {
                edges.insert(Edge::new(order[a].clone(), order[b].clone()));
            }
        }
    }
    let mut nodes = vec![
        WorkflowNode::new("in", OperatorKind::Input, HI),
        WorkflowNode::new("out", OperatorKind::ScEnsemble, HI),
    ];
    for i in 0..m {
        let prompt = if rng.gen_bool(0.5) { "solve_a" } else { "solve_b" };
        nodes.push(WorkflowNode::new(mid(i), OperatorKind::AnswerGenerate, HI).with_prompt(prompt));
    }
    let g = WorkflowGraph::new(
        nodes,
        edges.into_iter().collect(),
        vec!["in".into()],
        "out".into(),
        "generated",
    );
    g.ensure_valid().expect("generator yields valid workflows");
    g
}

pub fn tokens<R: Rng>(rng: &mut R) -> (u64, u64) {
    (rng.gen_range(50..500), rng.gen_range(20..200))
}

/// Synthetic task for the exhaustive comparison.
///
/// Removable nodes carry weight 0 or a weight in [0.08, 0.2]; at most
/// `max_essential` of them are nonzero and only those may carry a
/// quantization penalty (0 or in [0.08, 0.2]). The protected sink holds 0.3,
/// so the total stays within [0, 1] and no clamping occurs.
pub fn additive_task<R: Rng>(rng: &mut R, max_essential: usize) -> (WorkflowGraph, SyntheticTaskSpec) {
    let m = rng.gen_range(2..=6);
    let graph = layered_workflow(rng, m, 0.25);
    let essential = rng.gen_range(0..=max_essential.min(m));
    let mut ids: Vec<usize> = (0..m).collect();
    ids.shuffle(rng);
    let essential: BTreeSet<usize> = ids.into_iter().take(essential).collect();

    let mut nodes = BTreeMap::new();
    let (i, o) = tokens(rng);
    nodes.insert(NodeId::from("in"), NodeProfile::new(0.0, 0, 0));
    nodes.insert(NodeId::from("out"), NodeProfile::new(0.3, i, o));
    for v in 0..m {
        let (i, o) = tokens(rng);
        let profile = if essential.contains(&v) {
            let penalty = if rng.gen_bool(0.5) {
                rng.gen_range(0.08..0.2)
            } else {
                0.0
            };
            NodeProfile::new(rng.gen_range(0.08..0.2), i, o).with_penalty(penalty)
        } else {
            NodeProfile::new(0.0, i, o)
        };
        nodes.insert(mid(v), profile);
    }
    let spec = SyntheticTaskSpec {
        nodes,
        low_tier: [ModelId::from(LO)].into(),
        ..Default::default()
    };
    (graph, spec)
}

/// Task whose middle nodes include one group of 2 or 3 identical clones.
pub fn saturated_task<R: Rng>(rng: &mut R) -> (WorkflowGraph, SyntheticTaskSpec) {
    let clones = rng.gen_range(2..=3);
    let m = rng.gen_range(clones..=6);
    let graph = layered_workflow(rng, m, 0.25);
    let mut nodes = BTreeMap::new();
    nodes.insert(NodeId::from("in"), NodeProfile::new(0.0, 0, 0));
    let (i, o) = tokens(rng);
    nodes.insert(NodeId::from("out"), NodeProfile::new(0.3, i, o));
    let (ci, co) = tokens(rng);
    let clone_weight = rng.gen_range(0.1..0.2);
    let other_essential = clones < m && rng.gen_bool(0.5);
    for v in 0..m {
        let (i, o) = tokens(rng);
        let profile = if v < clones {
            NodeProfile::new(clone_weight, ci, co)
        } else if v == clones && other_essential {
            NodeProfile::new(rng.gen_range(0.08..0.2), i, o)
        } else {
            NodeProfile::new(0.0, i, o)
        };
        nodes.insert(mid(v), profile);
    }
    let spec = SyntheticTaskSpec {
        nodes,
        redundancy_groups: vec![(0..clones).map(mid).collect()],
        low_tier: [ModelId::from(LO)].into(),
        ..Default::default()
    };
    (graph, spec)
}

/// Unrestricted task: arbitrary weights and penalties, optional noise.
pub fn random_task<R: Rng>(rng: &mut R, noise: f64) -> (WorkflowGraph, SyntheticTaskSpec) {
    let m = rng.gen_range(1..=7);
    let graph = layered_workflow(rng, m, 0.3);
    let mut nodes = BTreeMap::new();
    nodes.insert(NodeId::from("in"), NodeProfile::new(0.0, 0, 0));
    let (i, o) = tokens(rng);
    nodes.insert(NodeId::from("out"), NodeProfile::new(rng.gen_range(0.1..0.4), i, o));
    for v in 0..m {
        let (i, o) = tokens(rng);
        let w = if rng.gen_bool(0.4) {
            0.0
        } else {
            rng.gen_range(0.0..0.2)
        };
        let p = if rng.gen_bool(0.5) {
            0.0
        } else {
            rng.gen_range(0.0..0.1)
        };
        nodes.insert(mid(v), NodeProfile::new(w, i, o).with_penalty(p));
    }
    let spec = SyntheticTaskSpec {
        nodes,
        low_tier: [ModelId::from(LO)].into(),
        noise,
        seed: rng.gen(),
        ..Default::default()
    };
    (graph, spec)
}
