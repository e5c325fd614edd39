#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use slim_core::compressor::SurrogateMap;
use slim_core::eval::{DatasetInstance, NodeProfile, PricingTable, SyntheticTaskSpec};
use slim_core::graph::{Edge, ModelId, NodeId, OperatorKind, WorkflowGraph, WorkflowNode};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn pricing() -> PricingTable {
    PricingTable::new().with("hi", 1e-6, 4e-6).with("lo", 2.5e-7, 1e-6)
}

pub fn surrogates() -> SurrogateMap {
    SurrogateMap::new(BTreeMap::from([(ModelId::from("hi"), ModelId::from("lo"))])).unwrap()
}

pub fn instances(n: usize) -> Vec<DatasetInstance> {
    (0..n)
        .map(|i| DatasetInstance::new(format!("t{i}"), format!("problem {i}"), json!(i)))
        .collect()
}

/// Valid workflow `in -> v0..v{m-1} -> out` with random forward edges.
pub fn workflow(rng: &mut impl Rng, m: usize, extra: f64) -> WorkflowGraph {
    let order: Vec<NodeId> = std::iter::once(NodeId::from("in"))
        .chain((0..m).map(|i| NodeId::new(format!("v{i}"))))
        .chain(std::iter::once(NodeId::from("out")))
        .collect();
    let mut edges = BTreeSet::new();
    if m == 0 {
        edges.insert(Edge::new("in", "out"));
    }
    for i in 1..=m {
        let pred = rng.gen_range(0..i);
        let succ = rng.gen_range(i + 1..order.len());
        edges.insert(Edge::new(order[pred].clone(), order[i].clone()));
        edges.insert(Edge::new(order[i].clone(), order[succ].clone()));
    }
    for a in 0..order.len() {
        for b in a + 1..order.len() {
            if rng.gen_bool(extra) {
                edges.insert(Edge::new(order[a].clone(), order[b].clone()));
            }
        }
    }
    let mut nodes = vec![
        WorkflowNode::new("in", OperatorKind::Input, "hi"),
        WorkflowNode::new("out", OperatorKind::ScEnsemble, "hi"),
    ];
    for id in &order[1..=m] {
        let model = if rng.gen_bool(0.8) { "hi" } else { "lo" };
        nodes.push(WorkflowNode::new(id.clone(), OperatorKind::AnswerGenerate, model).with_prompt("solve_a"));
    }
    WorkflowGraph::new(nodes, edges.into_iter().collect(), vec!["in".into()], "out".into(), "")
}

/// Random weights, penalties and token counts for every node of `graph`.
pub fn task(rng: &mut impl Rng, graph: &WorkflowGraph, noise: f64) -> SyntheticTaskSpec {
    let nodes = graph
        .nodes()
        .iter()
        .map(|n| {
            let w = if rng.gen_bool(0.3) {
                0.0
            } else {
                rng.gen_range(0.0..0.25)
            };
            let p = if rng.gen_bool(0.5) {
                0.0
            } else {
                rng.gen_range(0.0..0.1)
            };
            let profile = NodeProfile::new(w, rng.gen_range(10..400), rng.gen_range(5..200)).with_penalty(p);
            (n.id.clone(), profile)
        })
        .collect();
    SyntheticTaskSpec {
        nodes,
        low_tier: [ModelId::from("lo")].into(),
        noise,
        seed: rng.gen(),
        ..Default::default()
    }
}
