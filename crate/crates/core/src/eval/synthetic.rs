//! Deterministic stand-in for LLM evaluation.
//!
//! Every node contributes a fixed number of score units. Members of a
//! redundancy group saturate: only the largest present contribution counts.
//! Nodes bound to a low-tier model lose their quantization penalty. A seeded
//! noise term, derived from (seed, instance id, graph digest), is added before
//! clamping to [0, 1].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DatasetInstance, EvalError, Evaluator, InstanceFailure, InstanceRun, NodeCall};
use crate::graph::{ModelId, NodeId, WorkflowGraph};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeProfile {
    #[serde(default)]
    pub weight: f64,
    #[serde(default)]
    pub input_tokens: u64,
    #[serde(default)]
    pub output_tokens: u64,
    #[serde(default)]
    pub quant_penalty: f64,
}

impl NodeProfile {
    pub fn new(weight: f64, input_tokens: u64, output_tokens: u64) -> Self {
        Self {
            weight,
            input_tokens,
            output_tokens,
            quant_penalty: 0.0,
        }
    }

    pub fn with_penalty(mut self, penalty: f64) -> Self {
        self.quant_penalty = penalty;
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    #[serde(default)]
    pub nodes: BTreeMap<NodeId, NodeProfile>,
    #[serde(default)]
    pub redundancy_groups: Vec<Vec<NodeId>>,
    /// Models whose use incurs the quantization penalty.
    #[serde(default)]
    pub low_tier: BTreeSet<ModelId>,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        let spec: SyntheticTaskSpec = serde_json::from_str(text)?;
        spec.check()?;
        Ok(spec)
    }

    pub fn check(&self) -> Result<(), EvalError> {
        for (id, p) in &self.nodes {
            let ok = |x: f64| x.is_finite() && x >= 0.0;
            if !ok(p.weight) || !ok(p.quant_penalty) {
                return Err(EvalError::Config(format!(
                    "node {id}: weight and quant_penalty must be finite and non-negative"
                )));
            }
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(EvalError::Config("noise must be finite and non-negative".into()));
        }
        let mut seen = BTreeSet::new();
        for group in &self.redundancy_groups {
            for id in group {
                if !seen.insert(id) {
                    return Err(EvalError::Config(format!(
                        "node {id} appears in more than one redundancy group"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Score and token usage of `graph` on `instance`.
    pub fn score(&self, graph: &WorkflowGraph, instance: &DatasetInstance) -> (f64, Vec<NodeCall>) {
        let profile = |id: &NodeId| self.nodes.get(id);
        let grouped: BTreeSet<&NodeId> = self.redundancy_groups.iter().flatten().collect();

        let mut total = 0.0;
        for node in graph.nodes() {
            if !grouped.contains(&node.id) {
                total += profile(&node.id).map_or(0.0, |p| p.weight);
            }
        }
        for group in &self.redundancy_groups {
            let best = group
                .iter()
                .filter(|id| graph.contains(id))
                .filter_map(|id| profile(id).map(|p| p.weight))
                .fold(0.0_f64, f64::max);
            total += best;
        }
        for node in graph.nodes() {
            if self.low_tier.contains(&node.model) {
                total -= profile(&node.id).map_or(0.0, |p| p.quant_penalty);
            }
        }
        if self.noise > 0.0 {
            total += self.noise * (2.0 * self.unit_draw(graph, instance) - 1.0);
        }

        let calls = graph
            .nodes()
            .iter()
            .map(|n| {
                let p = profile(&n.id);
                NodeCall {
                    node: n.id.clone(),
                    model: n.model.clone(),
                    input_tokens: p.map_or(0, |p| p.input_tokens),
                    output_tokens: p.map_or(0, |p| p.output_tokens),
                }
            })
            .collect();
        (total.clamp(0.0, 1.0), calls)
    }

    fn unit_draw(&self, graph: &WorkflowGraph, instance: &DatasetInstance) -> f64 {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(instance.id.as_bytes());
        hasher.update([0]);
        hasher.update(graph.digest().as_bytes());
        let bytes = hasher.finalize();
        let mut word = [0u8; 8];
        word.copy_from_slice(&bytes[..8]);
        (u64::from_le_bytes(word) >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// [`Evaluator`] backed by a [`SyntheticTaskSpec`].
#[derive(Debug, Clone)]
pub struct SyntheticEvaluator {
    spec: SyntheticTaskSpec,
}

impl SyntheticEvaluator {
    pub fn new(spec: SyntheticTaskSpec) -> Result<Self, EvalError> {
        spec.check()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &SyntheticTaskSpec {
        &self.spec
    }
}

impl Evaluator for SyntheticEvaluator {
    fn run(&self, graph: &WorkflowGraph, instance: &DatasetInstance) -> Result<InstanceRun, InstanceFailure> {
        let (score, calls) = self.spec.score(graph, instance);
        Ok(InstanceRun { score, calls })
    }
}
