//! Local structural search over a compressed workflow.
//!
//! Every round picks a parent from the search pool with a mix of uniform and
//! score-softmax probability, applies one randomly chosen mutation, and
//! evaluates the child. The search stops when the top-k set stops changing
//! for `patience` rounds. The best result replaces the start only if it
//! scores strictly higher.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compressor::{Action, CandidatePool, CompressError, Stage, StageSummary, StepRecord, SurrogateMap, Verdict};
use crate::eval::{EvalError, EvalOutcome, Harness, InstanceOutcome, SliceKind};
use crate::graph::{Edge, NodeId, OperatorKind, WorkflowGraph};

#[derive(Debug, Error, PartialEq)]
pub enum TunerError {
    #[error("cannot select from an empty candidate list")]
    Empty,
    #[error("invalid tuner parameter: {0}")]
    Parameter(String),
}

impl From<TunerError> for CompressError {
    fn from(e: TunerError) -> Self {
        CompressError::Config(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TunerConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub k: usize,
    pub patience: usize,
    pub max_rounds: usize,
    pub repeats: usize,
    pub seed: u64,
    #[serde(with = "slice_name")]
    pub slice: SliceKind,
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            alpha: 0.2,
            k: 3,
            patience: 5,
            max_rounds: 30,
            repeats: 1,
            seed: 0,
            slice: SliceKind::Acceptance,
        }
    }
}

mod slice_name {
    use crate::eval::SliceKind;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: &SliceKind, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(match s {
            SliceKind::Probe => "probe",
            SliceKind::Acceptance => "acceptance",
        })
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<SliceKind, D::Error> {
        match String::deserialize(de)?.as_str() {
            "probe" => Ok(SliceKind::Probe),
            "acceptance" => Ok(SliceKind::Acceptance),
            other => Err(serde::de::Error::custom(format!("unknown slice `{other}`"))),
        }
    }
}

impl TunerConfig {
    pub fn check(&self) -> Result<(), TunerError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(TunerError::Parameter(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(TunerError::Parameter(format!(
                "alpha must be non-negative, got {}",
                self.alpha
            )));
        }
        if self.k == 0 || self.patience == 0 || self.repeats == 0 {
            return Err(TunerError::Parameter(
                "k, patience and repeats must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// `P(i) = λ/n + (1 − λ) · softmax_i(α (s_i − s_max))`.
pub fn mixed_probabilities(scores: &[f64], lambda: f64, alpha: f64) -> Result<Vec<f64>, TunerError> {
    if scores.is_empty() {
        return Err(TunerError::Empty);
    }
    let n = scores.len() as f64;
    let s_max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (alpha * (s - s_max)).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| lambda / n + (1.0 - lambda) * e / z).collect())
}

pub fn mixed_select<R: Rng + ?Sized>(
    scores: &[f64],
    lambda: f64,
    alpha: f64,
    rng: &mut R,
) -> Result<usize, TunerError> {
    let p = mixed_probabilities(scores, lambda, alpha)?;
    let dist = WeightedIndex::new(&p).map_err(|e| TunerError::Parameter(e.to_string()))?;
    Ok(dist.sample(rng))
}

/// Inputs the built-in mutations draw on.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MutationContext {
    /// Groups of interchangeable `prompt_ref` values.
    #[serde(default)]
    pub prompt_variants: Vec<Vec<String>>,
    #[serde(default)]
    pub surrogates: SurrogateMap,
}

/// Where a mutation applies.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Site {
    Node(NodeId),
    Rewire { old: Edge, new: Edge },
    Ensemble { source: NodeId, ensemble: NodeId },
}

impl Site {
    fn node(&self) -> Option<NodeId> {
        match self {
            Site::Node(n) => Some(n.clone()),
            Site::Rewire { old, .. } => Some(old.source.clone()),
            Site::Ensemble { source, .. } => Some(source.clone()),
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Site::Node(n) => write!(f, "{n}"),
            Site::Rewire { old, new } => write!(f, "{old} => {new}"),
            Site::Ensemble { source, ensemble } => write!(f, "{source} into {ensemble}"),
        }
    }
}

/// A localized, pure graph edit.
///
/// `sites` lists every place the edit applies, in a fixed order; every listed
/// site must produce a valid graph that leaves protected nodes unchanged.
pub trait MutationOp: Send + Sync {
    fn name(&self) -> &str;
    fn sites(&self, graph: &WorkflowGraph, ctx: &MutationContext) -> Vec<Site>;
    fn apply(&self, graph: &WorkflowGraph, ctx: &MutationContext, site: &Site) -> Option<WorkflowGraph>;
}

pub fn builtin_mutations() -> Vec<Box<dyn MutationOp>> {
    vec![
        Box::new(SwapPromptVariant),
        Box::new(RewireEdge),
        Box::new(ToggleModelTier),
        Box::new(DuplicateThenEnsemble),
    ]
}

fn editable(graph: &WorkflowGraph) -> impl Iterator<Item = &crate::graph::WorkflowNode> {
    graph
        .nodes()
        .iter()
        .filter(|n| !graph.is_protected(&n.id) && n.operator != OperatorKind::Input)
}

fn replace_node(
    graph: &WorkflowGraph,
    id: &NodeId,
    edit: impl FnOnce(&mut crate::graph::WorkflowNode),
) -> WorkflowGraph {
    let mut nodes = graph.nodes().to_vec();
    if let Some(n) = nodes.iter_mut().find(|n| &n.id == id) {
        edit(n);
    }
    graph.with_parts(nodes, graph.edges().to_vec())
}

/// Moves `prompt_ref` to the next entry of its variant group.
pub struct SwapPromptVariant;

impl SwapPromptVariant {
    fn next(ctx: &MutationContext, current: &str) -> Option<String> {
        ctx.prompt_variants.iter().filter(|g| g.len() >= 2).find_map(|g| {
            g.iter()
                .position(|p| p == current)
                .map(|i| g[(i + 1) % g.len()].clone())
        })
    }
}

impl MutationOp for SwapPromptVariant {
    fn name(&self) -> &str {
        "swap-prompt-variant"
    }

    fn sites(&self, graph: &WorkflowGraph, ctx: &MutationContext) -> Vec<Site> {
        editable(graph)
            .filter(|n| {
                n.prompt_ref
                    .as_deref()
                    .and_then(|p| Self::next(ctx, p))
                    .is_some_and(|next| Some(next.as_str()) != n.prompt_ref.as_deref())
            })
            .map(|n| Site::Node(n.id.clone()))
            .collect()
    }

    fn apply(&self, graph: &WorkflowGraph, ctx: &MutationContext, site: &Site) -> Option<WorkflowGraph> {
        let Site::Node(id) = site else { return None };
        let node = graph.node(id)?;
        if graph.is_protected(id) {
            return None;
        }
        let next = Self::next(ctx, node.prompt_ref.as_deref()?)?;
        Some(replace_node(graph, id, |n| n.prompt_ref = Some(next)))
    }
}

/// Moves the target of one edge, keeping the graph acyclic and valid.
pub struct RewireEdge;

impl MutationOp for RewireEdge {
    fn name(&self) -> &str {
        "rewire-edge"
    }

    fn sites(&self, graph: &WorkflowGraph, ctx: &MutationContext) -> Vec<Site> {
        let mut out = Vec::new();
        for old in graph.edges() {
            for n in graph.nodes() {
                let new = Edge::new(old.source.clone(), n.id.clone());
                if n.id == old.target || n.id == old.source || graph.has_edge(&new.source, &new.target) {
                    continue;
                }
                let site = Site::Rewire { old: old.clone(), new };
                if self.apply(graph, ctx, &site).is_some() {
                    out.push(site);
                }
            }
        }
        out
    }

    fn apply(&self, graph: &WorkflowGraph, _ctx: &MutationContext, site: &Site) -> Option<WorkflowGraph> {
        let Site::Rewire { old, new } = site else { return None };
        if !graph.has_edge(&old.source, &old.target)
            || old.source != new.source
            || !graph.contains(&new.target)
            || graph.has_edge(&new.source, &new.target)
        {
            return None;
        }
        let mut edges: Vec<Edge> = graph.edges().iter().filter(|e| *e != old).cloned().collect();
        edges.push(new.clone());
        let g = graph.with_parts(graph.nodes().to_vec(), edges);
        g.validate().is_ok().then_some(g)
    }
}

/// Swaps a node between a model and its surrogate.
pub struct ToggleModelTier;

impl ToggleModelTier {
    fn toggled(ctx: &MutationContext, model: &crate::graph::ModelId) -> Option<crate::graph::ModelId> {
        ctx.surrogates
            .get(model)
            .or_else(|| ctx.surrogates.source_of(model))
            .cloned()
    }
}

impl MutationOp for ToggleModelTier {
    fn name(&self) -> &str {
        "toggle-model-tier"
    }

    fn sites(&self, graph: &WorkflowGraph, ctx: &MutationContext) -> Vec<Site> {
        editable(graph)
            .filter(|n| Self::toggled(ctx, &n.model).is_some())
            .map(|n| Site::Node(n.id.clone()))
            .collect()
    }

    fn apply(&self, graph: &WorkflowGraph, ctx: &MutationContext, site: &Site) -> Option<WorkflowGraph> {
        let Site::Node(id) = site else { return None };
        if graph.is_protected(id) {
            return None;
        }
        let to = Self::toggled(ctx, &graph.node(id)?.model)?;
        Some(replace_node(graph, id, |n| n.model = to))
    }
}

/// Clones a generator node and routes both copies into an ensemble node.
pub struct DuplicateThenEnsemble;

impl DuplicateThenEnsemble {
    fn clone_id(graph: &WorkflowGraph, source: &NodeId) -> NodeId {
        (1..)
            .map(|n| NodeId::new(format!("{source}_dup{n}")))
            .find(|id| !graph.contains(id))
            .expect("unbounded search finds a free id")
    }
}

impl MutationOp for DuplicateThenEnsemble {
    fn name(&self) -> &str {
        "duplicate-then-ensemble"
    }

    fn sites(&self, graph: &WorkflowGraph, ctx: &MutationContext) -> Vec<Site> {
        let ensembles: Vec<&NodeId> = graph
            .nodes()
            .iter()
            .filter(|n| n.operator == OperatorKind::ScEnsemble)
            .map(|n| &n.id)
            .collect();
        let mut out = Vec::new();
        for source in editable(graph).filter(|n| n.operator.is_generator()) {
            for ensemble in &ensembles {
                let site = Site::Ensemble {
                    source: source.id.clone(),
                    ensemble: (*ensemble).clone(),
                };
                if self.apply(graph, ctx, &site).is_some() {
                    out.push(site);
                }
            }
        }
        out
    }

    fn apply(&self, graph: &WorkflowGraph, _ctx: &MutationContext, site: &Site) -> Option<WorkflowGraph> {
        let Site::Ensemble { source, ensemble } = site else {
            return None;
        };
        let original = graph.node(source)?;
        if graph.is_protected(source)
            || !original.operator.is_generator()
            || graph.node(ensemble)?.operator != OperatorKind::ScEnsemble
            || graph.reaches(ensemble, source)
        {
            return None;
        }
        let id = Self::clone_id(graph, source);
        let mut copy = original.clone();
        copy.id = id.clone();
        copy.protected = false;

        let mut nodes = graph.nodes().to_vec();
        nodes.push(copy);
        let mut edges: BTreeSet<Edge> = graph.edges().iter().cloned().collect();
        for pred in graph.predecessors(source).ok()? {
            edges.insert(Edge::new(pred, id.clone()));
        }
        edges.insert(Edge::new(source.clone(), ensemble.clone()));
        edges.insert(Edge::new(id, ensemble.clone()));
        let g = graph.with_parts(nodes, edges.into_iter().collect());
        g.validate().is_ok().then_some(g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchCandidate {
    pub digest: String,
    pub graph: WorkflowGraph,
    pub avg_score: f64,
    pub avg_cost: f64,
    pub parent: Option<String>,
    pub mutation: Option<String>,
    pub evaluations: usize,
}

#[derive(Debug, Clone)]
pub struct TuneOutput {
    pub graph: WorkflowGraph,
    pub score: f64,
    pub cost: f64,
    pub improved: bool,
    pub rounds: usize,
    pub candidates: Vec<SearchCandidate>,
    pub records: Vec<StepRecord>,
    pub summary: StageSummary,
}

/// Digests of the top `k` candidates by score descending, cost ascending,
/// then digest.
fn top_k(cands: &[SearchCandidate], k: usize) -> BTreeSet<String> {
    let mut order: Vec<&SearchCandidate> = cands.iter().collect();
    order.sort_by(|a, b| {
        b.avg_score
            .total_cmp(&a.avg_score)
            .then(a.avg_cost.total_cmp(&b.avg_cost))
            .then_with(|| a.digest.cmp(&b.digest))
    });
    order.into_iter().take(k).map(|c| c.digest.clone()).collect()
}

fn evaluate_repeated(
    graph: &WorkflowGraph,
    cfg: &TunerConfig,
    harness: &Harness<'_>,
) -> Result<EvalOutcome, EvalError> {
    let runs = (0..cfg.repeats)
        .map(|_| harness.evaluate(graph, cfg.slice))
        .collect::<Result<Vec<_>, _>>()?;
    if runs.len() == 1 {
        return Ok(runs.into_iter().next().expect("one run"));
    }
    let n = runs.len() as f64;
    let mut per_instance: Vec<InstanceOutcome> = runs[0].per_instance.clone();
    for (i, inst) in per_instance.iter_mut().enumerate() {
        inst.score = runs.iter().map(|r| r.per_instance[i].score).sum::<f64>() / n;
        inst.cost_usd = runs.iter().map(|r| r.per_instance[i].cost_usd).sum::<f64>() / n;
    }
    Ok(EvalOutcome {
        avg_score: runs.iter().map(|r| r.avg_score).sum::<f64>() / n,
        avg_cost_usd: runs.iter().map(|r| r.avg_cost_usd).sum::<f64>() / n,
        per_instance,
    })
}

/// Runs the search starting from `start`, evaluating it first.
pub fn tune(
    start: &WorkflowGraph,
    cfg: &TunerConfig,
    ops: &[Box<dyn MutationOp>],
    ctx: &MutationContext,
    harness: &Harness<'_>,
) -> Result<(TuneOutput, CandidatePool), (CompressError, CandidatePool)> {
    let mut pool = CandidatePool::new();
    let start_outcome = match evaluate_repeated(start, cfg, harness) {
        Ok(o) => o,
        Err(e) => return Err((e.into(), pool)),
    };
    if cfg.slice == SliceKind::Acceptance {
        pool.insert(start, &start_outcome, Some(Stage::Tune));
    }
    let mut records = Vec::new();
    match search(start, &start_outcome, cfg, ops, ctx, harness, &mut pool, &mut records) {
        Ok(out) => Ok((out, pool)),
        Err(e) => Err((e, pool)),
    }
}

/// Pipeline entry point: the start outcome is already known and results go
/// into the shared pool and log.
pub(crate) fn tune_into(
    start: &WorkflowGraph,
    start_outcome: &EvalOutcome,
    cfg: &TunerConfig,
    ctx: &MutationContext,
    harness: &Harness<'_>,
    pool: &mut CandidatePool,
    records: &mut Vec<StepRecord>,
) -> Result<StageSummary, CompressError> {
    let ops = builtin_mutations();
    let start_outcome = if cfg.slice == SliceKind::Acceptance && cfg.repeats == 1 {
        start_outcome.clone()
    } else {
        evaluate_repeated(start, cfg, harness)?
    };
    search(start, &start_outcome, cfg, &ops, ctx, harness, pool, records).map(|o| o.summary)
}

#[allow(clippy::too_many_arguments)]
fn search(
    start: &WorkflowGraph,
    start_outcome: &EvalOutcome,
    cfg: &TunerConfig,
    ops: &[Box<dyn MutationOp>],
    ctx: &MutationContext,
    harness: &Harness<'_>,
    pool: &mut CandidatePool,
    records: &mut Vec<StepRecord>,
) -> Result<TuneOutput, CompressError> {
    cfg.check()?;
    let counts_at_start = harness.counts();
    let first_record = records.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start_digest = start.digest();
    let mut cands = vec![SearchCandidate {
        digest: start_digest.clone(),
        graph: start.clone(),
        avg_score: start_outcome.avg_score,
        avg_cost: start_outcome.avg_cost_usd,
        parent: None,
        mutation: None,
        evaluations: cfg.repeats,
    }];
    let mut by_digest: BTreeMap<String, usize> = BTreeMap::from([(start_digest.clone(), 0)]);
    let mut current_top = top_k(&cands, cfg.k);
    let mut stable = 0;
    let mut rounds = 0;

    while rounds < cfg.max_rounds {
        rounds += 1;
        let scores: Vec<f64> = cands.iter().map(|c| c.avg_score).collect();
        let parent = cands[mixed_select(&scores, cfg.lambda, cfg.alpha, &mut rng)?].clone();

        let mut options: Vec<(usize, Vec<Site>)> = Vec::new();
        for (i, op) in ops.iter().enumerate() {
            let sites: Vec<Site> = op
                .sites(&parent.graph, ctx)
                .into_iter()
                .filter(|s| {
                    op.apply(&parent.graph, ctx, s)
                        .is_some_and(|g| harness.pricing().check_graph(&g).is_ok())
                })
                .collect();
            if !sites.is_empty() {
                options.push((i, sites));
            }
        }
        if let Some((op_idx, sites)) = options.choose(&mut rng) {
            let op = &ops[*op_idx];
            let site = sites.choose(&mut rng).expect("non-empty site list");
            let child = op.apply(&parent.graph, ctx, site).expect("site was applicable");
            let digest = child.digest();
            let (score, cost) = match by_digest.get(&digest) {
                Some(&i) => (cands[i].avg_score, cands[i].avg_cost),
                None => {
                    let outcome = evaluate_repeated(&child, cfg, harness)?;
                    if cfg.slice == SliceKind::Acceptance {
                        pool.insert(&child, &outcome, Some(Stage::Tune));
                    }
                    by_digest.insert(digest.clone(), cands.len());
                    cands.push(SearchCandidate {
                        digest: digest.clone(),
                        graph: child,
                        avg_score: outcome.avg_score,
                        avg_cost: outcome.avg_cost_usd,
                        parent: Some(parent.digest.clone()),
                        mutation: Some(format!("{} {site}", op.name())),
                        evaluations: cfg.repeats,
                    });
                    (outcome.avg_score, outcome.avg_cost_usd)
                }
            };
            records.push(StepRecord {
                stage: Stage::Tune,
                iteration: rounds - 1,
                candidate: site.node(),
                action: Action::Mutation {
                    op: op.name().to_string(),
                    detail: site.to_string(),
                },
                signals: None,
                ranks: None,
                score_before: parent.avg_score,
                cost_before: parent.avg_cost,
                score_after: score,
                cost_after: cost,
                threshold: start_outcome.avg_score,
                verdict: if score > start_outcome.avg_score {
                    Verdict::Accepted
                } else {
                    Verdict::Rejected
                },
                digest_before: parent.digest.clone(),
                digest_after: digest,
            });
        }

        let top = top_k(&cands, cfg.k);
        if top == current_top {
            stable += 1;
        } else {
            stable = 0;
            current_top = top;
        }
        if stable >= cfg.patience {
            break;
        }
    }

    let best = cands
        .iter()
        .min_by(|a, b| {
            b.avg_score
                .total_cmp(&a.avg_score)
                .then(a.avg_cost.total_cmp(&b.avg_cost))
                .then_with(|| a.digest.cmp(&b.digest))
        })
        .expect("pool holds the start");
    let chosen = if best.avg_score > start_outcome.avg_score {
        best
    } else {
        &cands[0]
    };
    let summary = StageSummary {
        stage: Stage::Tune,
        input_digest: start_digest,
        output_digest: chosen.digest.clone(),
        baseline_score: start_outcome.avg_score,
        baseline_cost: start_outcome.avg_cost_usd,
        output_score: chosen.avg_score,
        output_cost: chosen.avg_cost,
        tau: None,
        accepted: usize::from(chosen.digest != cands[0].digest),
        evaluations: harness.counts().since(&counts_at_start),
    };
    Ok(TuneOutput {
        graph: chosen.graph.clone(),
        score: chosen.avg_score,
        cost: chosen.avg_cost,
        improved: chosen.digest != cands[0].digest,
        rounds,
        records: records[first_record..].to_vec(),
        candidates: cands,
        summary,
    })
}
