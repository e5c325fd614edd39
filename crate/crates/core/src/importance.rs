//! Per-node importance signals and their fusion into a prune priority.
//!
//! Four signals are measured for every candidate node: degree, directed
//! betweenness, the leave-one-out score drop `Δ_S` and the cost saving `Δ_C`.
//! Each signal is turned into a dense rank where rank 1 is the most prunable
//! node, and the ranks are combined by weighted reciprocal rank fusion.

use std::cmp::Ordering;
use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compressor::SurrogateMap;
use crate::eval::{EvalError, Harness, SliceKind};
use crate::graph::{remove_node_with_patch, substitute_model, GraphError, NodeId, WorkflowGraph};
use crate::money;

#[derive(Debug, Error)]
pub enum ImportanceError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("no surrogate for model `{model}` of node `{node}`")]
    NoSurrogate { node: NodeId, model: String },
    #[error("candidate set is empty")]
    NoCandidates,
    #[error("signal `{metric}` of node `{node}` is not a finite number")]
    NonFinite { node: NodeId, metric: &'static str },
    #[error("invalid fusion weights: {0}")]
    Weights(String),
}

/// How a candidate variant is formed from the current graph.
#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    Prune,
    Quantize(&'a SurrogateMap),
}

impl Mode<'_> {
    pub fn variant(
        &self,
        graph: &WorkflowGraph,
        v: &NodeId,
        harness: &Harness<'_>,
    ) -> Result<WorkflowGraph, ImportanceError> {
        match self {
            Mode::Prune => Ok(remove_node_with_patch(graph, v)?),
            Mode::Quantize(map) => {
                let node = graph.node(v).ok_or_else(|| GraphError::UnknownNode(v.clone()))?;
                let surrogate = map.get(&node.model).ok_or_else(|| ImportanceError::NoSurrogate {
                    node: v.clone(),
                    model: node.model.to_string(),
                })?;
                Ok(substitute_model(graph, v, surrogate, harness.pricing())?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSet {
    pub node: NodeId,
    pub s_deg: usize,
    pub s_bet: f64,
    pub delta_score: f64,
    #[serde(with = "money")]
    pub delta_cost: f64,
}

/// In-degree plus out-degree.
pub fn degree_signal(graph: &WorkflowGraph, v: &NodeId) -> Result<usize, GraphError> {
    if !graph.contains(v) {
        return Err(GraphError::UnknownNode(v.clone()));
    }
    Ok(graph.in_degree(v) + graph.out_degree(v))
}

/// Directed betweenness of every node over ordered pairs, unit edge lengths.
///
/// Brandes' accumulation: one BFS per source, then dependencies are summed in
/// reverse BFS order.
pub fn betweenness_all(graph: &WorkflowGraph) -> BTreeMap<NodeId, f64> {
    let ids: Vec<NodeId> = graph.nodes().iter().map(|n| n.id.clone()).collect();
    let index: BTreeMap<&NodeId, usize> = ids.iter().enumerate().map(|(i, id)| (id, i)).collect();
    let n = ids.len();
    let mut adj = vec![Vec::new(); n];
    for e in graph.edges() {
        adj[index[&e.source]].push(index[&e.target]);
    }

    let mut bet = vec![0.0f64; n];
    for s in 0..n {
        let mut stack = Vec::with_capacity(n);
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut sigma = vec![0.0f64; n];
        let mut dist = vec![usize::MAX; n];
        sigma[s] = 1.0;
        dist[s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            stack.push(u);
            for &w in &adj[u] {
                if dist[w] == usize::MAX {
                    dist[w] = dist[u] + 1;
                    queue.push_back(w);
                }
                if dist[w] == dist[u] + 1 {
                    sigma[w] += sigma[u];
                    preds[w].push(u);
                }
            }
        }
        let mut delta = vec![0.0f64; n];
        while let Some(w) = stack.pop() {
            for &u in &preds[w] {
                delta[u] += sigma[u] / sigma[w] * (1.0 + delta[w]);
            }
            if w != s {
                bet[w] += delta[w];
            }
        }
    }
    ids.into_iter().zip(bet).collect()
}

pub fn betweenness_signal(graph: &WorkflowGraph, v: &NodeId) -> Result<f64, GraphError> {
    betweenness_all(graph)
        .remove(v)
        .ok_or_else(|| GraphError::UnknownNode(v.clone()))
}

/// `Δ_S(v) = S(G) − S(variant)` on one slice.
pub fn loo_contribution(
    graph: &WorkflowGraph,
    v: &NodeId,
    mode: Mode<'_>,
    harness: &Harness<'_>,
    slice: SliceKind,
) -> Result<f64, ImportanceError> {
    let variant = mode.variant(graph, v, harness)?;
    let base = harness.evaluate(graph, slice)?;
    let after = harness.evaluate(&variant, slice)?;
    Ok(base.avg_score - after.avg_score)
}

/// `Δ_C(v) = C(G) − C(variant)` on one slice, USD per problem.
pub fn cost_delta(
    graph: &WorkflowGraph,
    v: &NodeId,
    mode: Mode<'_>,
    harness: &Harness<'_>,
    slice: SliceKind,
) -> Result<f64, ImportanceError> {
    let variant = mode.variant(graph, v, harness)?;
    let base = harness.evaluate(graph, slice)?;
    let after = harness.evaluate(&variant, slice)?;
    Ok(base.avg_cost_usd - after.avg_cost_usd)
}

/// All four signals for `candidates` on the probe slice.
///
/// The baseline is evaluated once and shared; each candidate costs one
/// variant evaluation that yields both `Δ_S` and `Δ_C`.
pub fn compute_signals(
    graph: &WorkflowGraph,
    candidates: &[NodeId],
    mode: Mode<'_>,
    harness: &Harness<'_>,
) -> Result<Vec<SignalSet>, ImportanceError> {
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let base = harness.evaluate(graph, SliceKind::Probe)?;
    let bet = betweenness_all(graph);
    let mut out = Vec::with_capacity(candidates.len());
    for v in candidates {
        let variant = mode.variant(graph, v, harness)?;
        let after = harness.evaluate(&variant, SliceKind::Probe)?;
        out.push(SignalSet {
            node: v.clone(),
            s_deg: degree_signal(graph, v)?,
            s_bet: bet[v],
            delta_score: base.avg_score - after.avg_score,
            delta_cost: base.avg_cost_usd - after.avg_cost_usd,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub w_deg: f64,
    pub w_bet: f64,
    pub w_shap: f64,
    pub w_cost: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            w_deg: 1.0,
            w_bet: 1.0,
            w_shap: 2.0,
            w_cost: 1.0,
        }
    }
}

impl FusionConfig {
    pub fn check(&self) -> Result<(), ImportanceError> {
        let w = [self.w_deg, self.w_bet, self.w_shap, self.w_cost];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(ImportanceError::Weights(
                "weights must be finite and non-negative".into(),
            ));
        }
        if w.iter().all(|x| *x == 0.0) {
            return Err(ImportanceError::Weights("at least one weight must be positive".into()));
        }
        Ok(())
    }

    /// `max(10, |V|)`.
    pub fn kappa(graph_size: usize) -> f64 {
        graph_size.max(10) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub node: NodeId,
    pub r_deg: usize,
    pub r_bet: usize,
    pub r_shap: usize,
    pub r_cost: usize,
    pub fused: f64,
}

/// Ranks per metric and fused scores, rows in candidate order
/// (fused descending, then node id).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub kappa: f64,
    pub rows: Vec<RankRow>,
}

impl RankTable {
    pub fn order(&self) -> Vec<NodeId> {
        self.rows.iter().map(|r| r.node.clone()).collect()
    }

    pub fn row(&self, node: &NodeId) -> Option<&RankRow> {
        self.rows.iter().find(|r| &r.node == node)
    }
}

/// Dense ranks of `values` (1 for the first under `cmp`, ties share a rank).
pub fn dense_ranks(values: &[f64], descending: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let cmp = |a: &f64, b: &f64| {
        let o = a.partial_cmp(b).unwrap_or(Ordering::Equal);
        if descending {
            o.reverse()
        } else {
            o
        }
    };
    idx.sort_by(|&i, &j| cmp(&values[i], &values[j]));
    let mut ranks = vec![0; values.len()];
    let mut rank = 0;
    for (pos, &i) in idx.iter().enumerate() {
        if pos == 0 || values[i] != values[idx[pos - 1]] {
            rank += 1;
        }
        ranks[i] = rank;
    }
    ranks
}

/// `RRF(v) = Σ_m w_m / (κ + r_m(v))`.
pub fn rrf(ranks: [usize; 4], weights: &FusionConfig, kappa: f64) -> f64 {
    let w = [weights.w_deg, weights.w_bet, weights.w_shap, weights.w_cost];
    w.iter().zip(ranks).map(|(w, r)| w / (kappa + r as f64)).sum()
}

/// Ranks the candidates (rank 1 = most prunable) and fuses them.
///
/// Orientation: ascending degree, ascending betweenness, ascending `Δ_S`,
/// descending `Δ_C`. `graph_size` is `|V|` of the graph the signals were
/// measured on.
pub fn rank_and_fuse(
    signals: &[SignalSet],
    graph_size: usize,
    config: &FusionConfig,
) -> Result<RankTable, ImportanceError> {
    if signals.is_empty() {
        return Err(ImportanceError::NoCandidates);
    }
    config.check()?;
    for s in signals {
        for (metric, x) in [("bet", s.s_bet), ("shap", s.delta_score), ("cost", s.delta_cost)] {
            if !x.is_finite() {
                return Err(ImportanceError::NonFinite {
                    node: s.node.clone(),
                    metric,
                });
            }
        }
    }
    let column = |f: fn(&SignalSet) -> f64| signals.iter().map(f).collect::<Vec<_>>();
    let r_deg = dense_ranks(&column(|s| s.s_deg as f64), false);
    let r_bet = dense_ranks(&column(|s| s.s_bet), false);
    let r_shap = dense_ranks(&column(|s| s.delta_score), false);
    let r_cost = dense_ranks(&column(|s| s.delta_cost), true);

    let kappa = FusionConfig::kappa(graph_size);
    let mut rows: Vec<RankRow> = signals
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let ranks = [r_deg[i], r_bet[i], r_shap[i], r_cost[i]];
            RankRow {
                node: s.node.clone(),
                r_deg: ranks[0],
                r_bet: ranks[1],
                r_shap: ranks[2],
                r_cost: ranks[3],
                fused: rrf(ranks, config, kappa),
            }
        })
        .collect();
    rows.sort_by(|a, b| b.fused.total_cmp(&a.fused).then_with(|| a.node.cmp(&b.node)));
    Ok(RankTable { kappa, rows })
}
