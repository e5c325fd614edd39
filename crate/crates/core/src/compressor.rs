//! Greedy prune and quantize stages and the pipeline that chains them.
//!
//! Each stage evaluates its input once on the acceptance slice to fix the
//! baseline `S_0`. Every iteration then recomputes importance signals on the
//! current graph, ranks the candidates and tries the top `k` in fused order.
//! The first trial scoring at least `τ · S_0` is accepted and the loop
//! continues from it. If no trial passes, the iteration's trials are rolled
//! back and the stage ends. `S_0` is never re-anchored within a stage.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{EvalCounts, EvalError, EvalOutcome, Harness, SliceKind};
use crate::graph::{ModelId, NodeId, WorkflowGraph};
use crate::importance::{compute_signals, rank_and_fuse, FusionConfig, ImportanceError, Mode, RankRow, SignalSet};
use crate::money;
use crate::tuner::{self, MutationContext, TunerConfig};

#[derive(Debug, Error)]
pub enum CompressError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Importance(#[from] ImportanceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prune,
    Quantize,
    Tune,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Prune => "prune",
            Stage::Quantize => "quantize",
            Stage::Tune => "tune",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub tau: f64,
    pub k: usize,
    /// Accepted operations allowed in the stage; `None` means `|V|` of the
    /// stage input.
    pub max_iterations: Option<usize>,
    pub fusion: FusionConfig,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            tau: 0.95,
            k: 3,
            max_iterations: None,
            fusion: FusionConfig::default(),
        }
    }
}

impl StageConfig {
    pub fn check(&self) -> Result<(), CompressError> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(CompressError::Config(format!(
                "tau must lie in (0, 1), got {}",
                self.tau
            )));
        }
        if self.k == 0 {
            return Err(CompressError::Config("k must be at least 1".into()));
        }
        self.fusion.check()?;
        Ok(())
    }
}

/// High-cost model → low-cost surrogate. Applied once, never transitively.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SurrogateMap(BTreeMap<ModelId, ModelId>);

impl SurrogateMap {
    pub fn new(map: BTreeMap<ModelId, ModelId>) -> Result<Self, CompressError> {
        for (from, to) in &map {
            if from == to {
                return Err(CompressError::Config(format!("model `{from}` maps to itself")));
            }
            if map.contains_key(to) {
                return Err(CompressError::Config(format!(
                    "surrogate chain `{from}` -> `{to}` -> `{}`",
                    map[to]
                )));
            }
        }
        Ok(Self(map))
    }

    pub fn get(&self, model: &ModelId) -> Option<&ModelId> {
        self.0.get(model)
    }

    /// Smallest high-cost model whose surrogate is `model`.
    pub fn source_of(&self, model: &ModelId) -> Option<&ModelId> {
        self.0.iter().find(|(_, to)| *to == model).map(|(from, _)| from)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ModelId, &ModelId)> {
        self.0.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn check_priced(&self, pricing: &crate::eval::PricingTable) -> Result<(), CompressError> {
        for to in self.0.values() {
            if !pricing.contains(to) {
                return Err(CompressError::Config(format!("surrogate `{to}` has no pricing entry")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    Prune,
    Substitute { from: ModelId, to: ModelId },
    Mutation { op: String, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    Rejected,
    RolledBack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub iteration: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<NodeId>,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signals: Option<SignalSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranks: Option<RankRow>,
    pub score_before: f64,
    #[serde(with = "money")]
    pub cost_before: f64,
    pub score_after: f64,
    #[serde(with = "money")]
    pub cost_after: f64,
    /// Absolute acceptance bar (`τ · S_0` for compression stages, the start
    /// score for the tuner).
    pub threshold: f64,
    pub verdict: Verdict,
    pub digest_before: String,
    pub digest_after: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub digest: String,
    pub graph: WorkflowGraph,
    pub outcome: EvalOutcome,
    pub stage: Option<Stage>,
}

/// Every workflow evaluated on the acceptance slice, in first-seen order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidatePool {
    entries: Vec<PoolEntry>,
    index: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetWarning {
    #[serde(with = "money")]
    pub budget: f64,
    #[serde(with = "money")]
    pub min_cost: f64,
}

impl fmt::Display for BudgetWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "no evaluated workflow meets the budget {}; returning the cheapest ({} per problem)",
            money::format_usd(self.budget),
            money::format_usd(self.min_cost)
        )
    }
}

impl CandidatePool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds the graph unless its digest is already present.
    pub fn insert(&mut self, graph: &WorkflowGraph, outcome: &EvalOutcome, stage: Option<Stage>) -> bool {
        let digest = graph.digest();
        if self.index.contains_key(&digest) {
            return false;
        }
        self.index.insert(digest.clone(), self.entries.len());
        self.entries.push(PoolEntry {
            digest,
            graph: graph.clone(),
            outcome: outcome.clone(),
            stage,
        });
        true
    }

    pub fn get(&self, digest: &str) -> Option<&PoolEntry> {
        self.index.get(digest).map(|&i| &self.entries[i])
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Highest score, then lowest cost, among members costing at most
    /// `budget`; earlier members win exact ties. Falls back to the cheapest
    /// member with a warning when nothing meets the budget.
    pub fn best(&self, budget: Option<f64>) -> Option<(&PoolEntry, Option<BudgetWarning>)> {
        let better = |a: &PoolEntry, b: &PoolEntry| {
            a.outcome.avg_score > b.outcome.avg_score
                || (a.outcome.avg_score == b.outcome.avg_score && a.outcome.avg_cost_usd < b.outcome.avg_cost_usd)
        };
        let within = |e: &&PoolEntry| budget.is_none_or(|b| e.outcome.avg_cost_usd <= b);
        let mut best: Option<&PoolEntry> = None;
        for e in self.entries.iter().filter(within) {
            if best.is_none_or(|b| better(e, b)) {
                best = Some(e);
            }
        }
        if let Some(b) = best {
            return Some((b, None));
        }
        let cheaper = |a: &PoolEntry, b: &PoolEntry| {
            a.outcome.avg_cost_usd < b.outcome.avg_cost_usd
                || (a.outcome.avg_cost_usd == b.outcome.avg_cost_usd && a.outcome.avg_score > b.outcome.avg_score)
        };
        let mut cheapest: Option<&PoolEntry> = None;
        for e in &self.entries {
            if cheapest.is_none_or(|c| cheaper(e, c)) {
                cheapest = Some(e);
            }
        }
        cheapest.map(|c| {
            let warning = BudgetWarning {
                budget: budget.unwrap_or(f64::INFINITY),
                min_cost: c.outcome.avg_cost_usd,
            };
            (c, Some(warning))
        })
    }
}

/// Per-stage facts needed to audit the threshold chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub input_digest: String,
    pub output_digest: String,
    pub baseline_score: f64,
    #[serde(with = "money")]
    pub baseline_cost: f64,
    pub output_score: f64,
    #[serde(with = "money")]
    pub output_cost: f64,
    pub tau: Option<f64>,
    pub accepted: usize,
    pub evaluations: EvalCounts,
}

#[derive(Debug, Clone)]
pub struct StageOutput {
    pub graph: WorkflowGraph,
    pub outcome: EvalOutcome,
    pub records: Vec<StepRecord>,
    pub summary: StageSummary,
}

/// A stage that stopped on a hard error. Records and pool entries produced
/// before the failure are kept.
#[derive(Debug, Error)]
#[error("{stage} stage aborted: {error}")]
pub struct StageAbort {
    pub stage: Stage,
    #[source]
    pub error: CompressError,
    pub records: Vec<StepRecord>,
    pub pool: CandidatePool,
}

#[allow(clippy::result_large_err)]
pub fn prune_stage(
    base: &WorkflowGraph,
    cfg: &StageConfig,
    harness: &Harness<'_>,
) -> Result<(StageOutput, CandidatePool), StageAbort> {
    standalone(Stage::Prune, base, cfg, Mode::Prune, harness)
}

#[allow(clippy::result_large_err)]
pub fn quant_stage(
    pruned: &WorkflowGraph,
    cfg: &StageConfig,
    surrogates: &SurrogateMap,
    harness: &Harness<'_>,
) -> Result<(StageOutput, CandidatePool), StageAbort> {
    standalone(Stage::Quantize, pruned, cfg, Mode::Quantize(surrogates), harness)
}

#[allow(clippy::result_large_err)]
fn standalone(
    stage: Stage,
    input: &WorkflowGraph,
    cfg: &StageConfig,
    mode: Mode<'_>,
    harness: &Harness<'_>,
) -> Result<(StageOutput, CandidatePool), StageAbort> {
    let mut pool = CandidatePool::new();
    let mut records = Vec::new();
    match run_stage(stage, input, cfg, mode, harness, &mut pool, &mut records) {
        Ok(out) => Ok((out, pool)),
        Err(error) => Err(StageAbort {
            stage,
            error,
            records,
            pool,
        }),
    }
}

fn candidates(graph: &WorkflowGraph, mode: Mode<'_>) -> Vec<NodeId> {
    graph
        .nodes()
        .iter()
        .filter(|n| !graph.is_protected(&n.id))
        .filter(|n| match mode {
            Mode::Prune => true,
            Mode::Quantize(map) => map.get(&n.model).is_some(),
        })
        .map(|n| n.id.clone())
        .collect()
}

fn action_for(graph: &WorkflowGraph, v: &NodeId, mode: Mode<'_>) -> Action {
    match mode {
        Mode::Prune => Action::Prune,
        Mode::Quantize(map) => {
            let from = graph.node(v).expect("candidate exists").model.clone();
            let to = map.get(&from).expect("candidate has a surrogate").clone();
            Action::Substitute { from, to }
        }
    }
}

/// The shared greedy loop. Records are appended to `records` as soon as an
/// iteration settles so a later failure leaves them in place.
fn run_stage(
    stage: Stage,
    input: &WorkflowGraph,
    cfg: &StageConfig,
    mode: Mode<'_>,
    harness: &Harness<'_>,
    pool: &mut CandidatePool,
    records: &mut Vec<StepRecord>,
) -> Result<StageOutput, CompressError> {
    cfg.check()?;
    let counts_at_start = harness.counts();
    let first_record = records.len();

    let baseline = harness.evaluate(input, SliceKind::Acceptance)?;
    pool.insert(input, &baseline, Some(stage));
    let threshold = cfg.tau * baseline.avg_score;
    let budget = cfg.max_iterations.unwrap_or(input.len());

    let mut current = input.clone();
    let mut current_outcome = baseline.clone();
    let mut accepted = 0;
    let mut iteration = 0;
    while accepted < budget {
        let ids = candidates(&current, mode);
        if ids.is_empty() {
            break;
        }
        let signals = compute_signals(&current, &ids, mode, harness)?;
        let table = rank_and_fuse(&signals, current.len(), &cfg.fusion)?;
        let by_node: BTreeMap<&NodeId, &SignalSet> = signals.iter().map(|s| (&s.node, s)).collect();

        let before_digest = current.digest();
        let mut trials = Vec::new();
        let mut winner = None;
        for row in table.rows.iter().take(cfg.k) {
            let variant = mode.variant(&current, &row.node, harness)?;
            let outcome = harness.evaluate(&variant, SliceKind::Acceptance)?;
            pool.insert(&variant, &outcome, Some(stage));
            let passed = outcome.avg_score >= threshold;
            trials.push(StepRecord {
                stage,
                iteration,
                candidate: Some(row.node.clone()),
                action: action_for(&current, &row.node, mode),
                signals: Some(by_node[&row.node].clone()),
                ranks: Some(row.clone()),
                score_before: current_outcome.avg_score,
                cost_before: current_outcome.avg_cost_usd,
                score_after: outcome.avg_score,
                cost_after: outcome.avg_cost_usd,
                threshold,
                verdict: Verdict::Rejected,
                digest_before: before_digest.clone(),
                digest_after: variant.digest(),
            });
            if passed {
                winner = Some((variant, outcome));
                break;
            }
        }
        match winner {
            Some((graph, outcome)) => {
                trials.last_mut().expect("winner has a record").verdict = Verdict::Accepted;
                records.extend(trials);
                current = graph;
                current_outcome = outcome;
                accepted += 1;
                iteration += 1;
            }
            None => {
                for t in &mut trials {
                    t.verdict = Verdict::RolledBack;
                }
                records.extend(trials);
                break;
            }
        }
    }

    let summary = StageSummary {
        stage,
        input_digest: input.digest(),
        output_digest: current.digest(),
        baseline_score: baseline.avg_score,
        baseline_cost: baseline.avg_cost_usd,
        output_score: current_outcome.avg_score,
        output_cost: current_outcome.avg_cost_usd,
        tau: Some(cfg.tau),
        accepted,
        evaluations: harness.counts().since(&counts_at_start),
    };
    Ok(StageOutput {
        graph: current,
        outcome: current_outcome,
        records: records[first_record..].to_vec(),
        summary,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageOrder {
    #[default]
    PruneFirst,
    QuantizeFirst,
}

#[derive(Debug, Clone, Default)]
pub struct PipelineConfig {
    /// `None` disables the stage.
    pub prune: Option<StageConfig>,
    pub quantize: Option<StageConfig>,
    pub order: StageOrder,
    pub surrogates: SurrogateMap,
    pub tuner: Option<TunerConfig>,
    pub mutation_context: MutationContext,
    /// Maximum USD per problem for the returned workflow.
    pub budget: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub best: WorkflowGraph,
    pub best_outcome: EvalOutcome,
    pub records: Vec<StepRecord>,
    pub stages: Vec<StageSummary>,
    pub pool: CandidatePool,
    pub warning: Option<BudgetWarning>,
    pub evaluations: EvalCounts,
}

#[derive(Debug, Error)]
#[error("pipeline aborted in {stage} stage: {error}")]
pub struct PipelineAbort {
    pub stage: Stage,
    #[source]
    pub error: CompressError,
    pub records: Vec<StepRecord>,
    pub stages: Vec<StageSummary>,
    pub pool: CandidatePool,
}

/// Runs the enabled stages in order, then picks the pool best within budget.
#[allow(clippy::result_large_err)]
pub fn run_pipeline(
    base: &WorkflowGraph,
    cfg: &PipelineConfig,
    harness: &Harness<'_>,
) -> Result<PipelineOutput, PipelineAbort> {
    let mut pool = CandidatePool::new();
    let mut records = Vec::new();
    let mut stages = Vec::new();

    let abort = |stage, error, records, stages, pool| PipelineAbort {
        stage,
        error,
        records,
        stages,
        pool,
    };
    if let Err(e) = cfg.surrogates.check_priced(harness.pricing()) {
        return Err(abort(Stage::Quantize, e, records, stages, pool));
    }

    let sequence: [(Stage, Option<&StageConfig>); 2] = match cfg.order {
        StageOrder::PruneFirst => [
            (Stage::Prune, cfg.prune.as_ref()),
            (Stage::Quantize, cfg.quantize.as_ref()),
        ],
        StageOrder::QuantizeFirst => [
            (Stage::Quantize, cfg.quantize.as_ref()),
            (Stage::Prune, cfg.prune.as_ref()),
        ],
    };

    let mut current = base.clone();
    let mut current_outcome: Option<EvalOutcome> = None;
    for (stage, stage_cfg) in sequence {
        let Some(stage_cfg) = stage_cfg else { continue };
        let mode = match stage {
            Stage::Prune => Mode::Prune,
            _ => Mode::Quantize(&cfg.surrogates),
        };
        match run_stage(stage, &current, stage_cfg, mode, harness, &mut pool, &mut records) {
            Ok(out) => {
                current = out.graph;
                current_outcome = Some(out.outcome);
                stages.push(out.summary);
            }
            Err(e) => return Err(abort(stage, e, records, stages, pool)),
        }
    }

    if let Some(tcfg) = &cfg.tuner {
        let start_outcome = match current_outcome.take() {
            Some(o) => o,
            None => match harness.evaluate(&current, SliceKind::Acceptance) {
                Ok(o) => {
                    pool.insert(&current, &o, None);
                    o
                }
                Err(e) => return Err(abort(Stage::Tune, e.into(), records, stages, pool)),
            },
        };
        let ctx = MutationContext {
            surrogates: cfg.surrogates.clone(),
            ..cfg.mutation_context.clone()
        };
        match tuner::tune_into(&current, &start_outcome, tcfg, &ctx, harness, &mut pool, &mut records) {
            Ok(summary) => stages.push(summary),
            Err(e) => return Err(abort(Stage::Tune, e, records, stages, pool)),
        }
    } else if current_outcome.is_none() {
        match harness.evaluate(&current, SliceKind::Acceptance) {
            Ok(o) => {
                pool.insert(&current, &o, None);
            }
            Err(e) => return Err(abort(Stage::Prune, e.into(), records, stages, pool)),
        }
    }

    let (entry, warning) = pool.best(cfg.budget).expect("pool holds at least the input");
    Ok(PipelineOutput {
        best: entry.graph.clone(),
        best_outcome: entry.outcome.clone(),
        records,
        stages,
        warning,
        evaluations: harness.counts(),
        pool,
    })
}
