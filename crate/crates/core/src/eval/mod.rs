//! Scoring and cost accounting for workflow graphs.
//!
//! [`evaluate`] runs an [`Evaluator`] over a slice of dataset instances and
//! reduces the results to an [`EvalOutcome`]: the mean task score and the mean
//! USD cost per problem. Cost is always computed here, from the token usage the
//! evaluator reports and the [`PricingTable`], so every evaluator is billed the
//! same way.

mod http;
mod synthetic;

pub use http::{Grader, HttpEvaluator, HttpEvaluatorConfig, RetryPolicy, API_BASE_ENV, API_KEY_ENV};
pub use synthetic::{NodeProfile, SyntheticEvaluator, SyntheticTaskSpec};

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ModelId, NodeId, WorkflowGraph};
use crate::money;

/// Probe size used when none is configured.
pub const DEFAULT_PROBE_SIZE: usize = 50;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("model `{0}` has no entry in the pricing table")]
    UnpricedModel(ModelId),
    #[error("invalid rate for model `{0}`: rates must be finite and non-negative")]
    InvalidRate(ModelId),
    #[error("cannot evaluate on an empty slice")]
    EmptySlice,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("probe size must be at least 1")]
    InvalidProbeSize,
    #[error("duplicate instance id `{0}`")]
    DuplicateInstance(String),
    #[error("instance `{0}` is not in the dataset")]
    UnknownInstance(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("malformed pricing table: {0}")]
    Pricing(#[from] serde_json::Error),
    #[error("evaluator failed on instance `{instance}`: {message}")]
    Fatal { instance: String, message: String },
    #[error("evaluator configuration: {0}")]
    Config(String),
}

/// USD per token for one model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelRate {
    #[serde(with = "money")]
    pub input_rate: f64,
    #[serde(with = "money")]
    pub output_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PricingTable {
    rates: BTreeMap<ModelId, ModelRate>,
}

impl PricingTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `{"model": {"input_rate": "4e-7", "output_rate": "1.6e-6"}, ...}`.
    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        let table: PricingTable = serde_json::from_str(text)?;
        for (model, rate) in &table.rates {
            check_rate(model, rate)?;
        }
        Ok(table)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("pricing serializes")
    }

    pub fn insert(&mut self, model: impl Into<ModelId>, input_rate: f64, output_rate: f64) -> Result<(), EvalError> {
        let model = model.into();
        let rate = ModelRate {
            input_rate,
            output_rate,
        };
        check_rate(&model, &rate)?;
        self.rates.insert(model, rate);
        Ok(())
    }

    pub fn with(mut self, model: &str, input_rate: f64, output_rate: f64) -> Self {
        self.insert(model, input_rate, output_rate).expect("valid rate");
        self
    }

    pub fn contains(&self, model: &ModelId) -> bool {
        self.rates.contains_key(model)
    }

    pub fn rate(&self, model: &ModelId) -> Option<&ModelRate> {
        self.rates.get(model)
    }

    pub fn models(&self) -> impl Iterator<Item = &ModelId> {
        self.rates.keys()
    }

    pub fn call_cost(&self, model: &ModelId, input_tokens: u64, output_tokens: u64) -> Result<f64, EvalError> {
        let rate = self
            .rate(model)
            .ok_or_else(|| EvalError::UnpricedModel(model.clone()))?;
        Ok(input_tokens as f64 * rate.input_rate + output_tokens as f64 * rate.output_rate)
    }

    /// Fails on the first model of `graph` missing from the table.
    pub fn check_graph(&self, graph: &WorkflowGraph) -> Result<(), EvalError> {
        match graph.unpriced_models(self).into_iter().next() {
            Some(model) => Err(EvalError::UnpricedModel(model)),
            None => Ok(()),
        }
    }
}

fn check_rate(model: &ModelId, rate: &ModelRate) -> Result<(), EvalError> {
    let ok = |r: f64| r.is_finite() && r >= 0.0;
    if ok(rate.input_rate) && ok(rate.output_rate) {
        Ok(())
    } else {
        Err(EvalError::InvalidRate(model.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInstance {
    pub id: String,
    pub input: String,
    pub target: serde_json::Value,
}

impl DatasetInstance {
    pub fn new(id: impl Into<String>, input: impl Into<String>, target: serde_json::Value) -> Self {
        Self {
            id: id.into(),
            input: input.into(),
            target,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    instances: Vec<DatasetInstance>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, instances: Vec<DatasetInstance>) -> Result<Self, EvalError> {
        let mut seen = BTreeSet::new();
        for inst in &instances {
            if !seen.insert(inst.id.as_str()) {
                return Err(EvalError::DuplicateInstance(inst.id.clone()));
            }
        }
        Ok(Self {
            name: name.into(),
            instances,
        })
    }

    /// One `{id, input, target}` record per line; blank lines are skipped.
    pub fn from_jsonl(name: impl Into<String>, text: &str) -> Result<Self, EvalError> {
        let mut instances = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let inst: DatasetInstance = serde_json::from_str(line).map_err(|e| EvalError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            instances.push(inst);
        }
        Self::new(name, instances)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn instances(&self) -> &[DatasetInstance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Instances of `slice`, in slice order.
    pub fn select(&self, slice: &ProbeSlice) -> Result<Vec<DatasetInstance>, EvalError> {
        let by_id: BTreeMap<&str, &DatasetInstance> = self.instances.iter().map(|i| (i.id.as_str(), i)).collect();
        slice
            .ids
            .iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|i| (*i).clone())
                    .ok_or_else(|| EvalError::UnknownInstance(id.clone()))
            })
            .collect()
    }
}

/// A seeded sample of a dataset, ids sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSlice {
    pub dataset: String,
    pub ids: Vec<String>,
    pub seed: u64,
    pub requested: usize,
    /// Set when more instances were requested than the dataset holds.
    pub truncated: bool,
}

/// Uniform sample of `m` instances without replacement.
pub fn sample_probe(dataset: &Dataset, m: usize, seed: u64) -> Result<ProbeSlice, EvalError> {
    if m == 0 {
        return Err(EvalError::InvalidProbeSize);
    }
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let all: Vec<&str> = dataset.instances.iter().map(|i| i.id.as_str()).collect();
    let truncated = m > all.len();
    let mut ids: Vec<String> = if m >= all.len() {
        all.iter().map(|s| s.to_string()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        all.choose_multiple(&mut rng, m).map(|s| s.to_string()).collect()
    };
    ids.sort();
    Ok(ProbeSlice {
        dataset: dataset.name.clone(),
        ids,
        seed,
        requested: m,
        truncated,
    })
}

/// Tokens consumed by one model call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeCall {
    pub node: NodeId,
    pub model: ModelId,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRun {
    pub score: f64,
    pub calls: Vec<NodeCall>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InstanceFailure {
    /// The instance failed; it scores 0 and the run continues. `calls` holds
    /// whatever usage was incurred before the failure.
    Instance { message: String, calls: Vec<NodeCall> },
    /// The evaluator cannot continue at all.
    Fatal(String),
}

impl InstanceFailure {
    pub fn instance(message: impl Into<String>) -> Self {
        InstanceFailure::Instance {
            message: message.into(),
            calls: Vec::new(),
        }
    }
}

/// Scores one workflow on one instance.
///
/// Implementations must be safe to call concurrently on distinct instances
/// when [`max_parallelism`](Evaluator::max_parallelism) is above 1.
pub trait Evaluator: Sync {
    fn run(&self, graph: &WorkflowGraph, instance: &DatasetInstance) -> Result<InstanceRun, InstanceFailure>;

    /// Upper bound on concurrent `run` calls; 1 means serial only.
    fn max_parallelism(&self) -> usize {
        1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceOutcome {
    pub id: String,
    pub score: f64,
    #[serde(with = "money")]
    pub cost_usd: f64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub avg_score: f64,
    #[serde(with = "money")]
    pub avg_cost_usd: f64,
    pub per_instance: Vec<InstanceOutcome>,
}

impl EvalOutcome {
    pub fn failures(&self) -> usize {
        self.per_instance.iter().filter(|i| i.error.is_some()).count()
    }
}

/// Runs `evaluator` on every instance and averages score and cost.
///
/// Pricing is checked before any call. Instance failures score 0; a fatal
/// failure aborts the whole evaluation.
pub fn evaluate(
    graph: &WorkflowGraph,
    instances: &[DatasetInstance],
    evaluator: &dyn Evaluator,
    pricing: &PricingTable,
) -> Result<EvalOutcome, EvalError> {
    if instances.is_empty() {
        return Err(EvalError::EmptySlice);
    }
    pricing.check_graph(graph)?;

    let runs = run_all(graph, instances, evaluator);

    let mut per_instance = Vec::with_capacity(instances.len());
    for (inst, run) in instances.iter().zip(runs) {
        let (score, calls, error) = match run {
            Ok(run) if run.score.is_finite() => (run.score.clamp(0.0, 1.0), run.calls, None),
            Ok(run) => (0.0, run.calls, Some("evaluator returned a non-finite score".into())),
            Err(InstanceFailure::Instance { message, calls }) => (0.0, calls, Some(message)),
            Err(InstanceFailure::Fatal(message)) => {
                return Err(EvalError::Fatal {
                    instance: inst.id.clone(),
                    message,
                })
            }
        };
        let mut cost = 0.0;
        let (mut input_tokens, mut output_tokens) = (0, 0);
        for call in &calls {
            cost += pricing.call_cost(&call.model, call.input_tokens, call.output_tokens)?;
            input_tokens += call.input_tokens;
            output_tokens += call.output_tokens;
        }
        per_instance.push(InstanceOutcome {
            id: inst.id.clone(),
            score,
            cost_usd: cost,
            input_tokens,
            output_tokens,
            error,
        });
    }

    let n = per_instance.len() as f64;
    let avg_score = per_instance.iter().map(|i| i.score).sum::<f64>() / n;
    let avg_cost_usd = per_instance.iter().map(|i| i.cost_usd).sum::<f64>() / n;
    Ok(EvalOutcome {
        avg_score,
        avg_cost_usd,
        per_instance,
    })
}

fn run_all(
    graph: &WorkflowGraph,
    instances: &[DatasetInstance],
    evaluator: &dyn Evaluator,
) -> Vec<Result<InstanceRun, InstanceFailure>> {
    let workers = evaluator.max_parallelism().clamp(1, instances.len());
    if workers == 1 {
        return instances.iter().map(|i| evaluator.run(graph, i)).collect();
    }
    // Strided split; results are re-assembled by index so the aggregate does
    // not depend on scheduling.
    let mut slots: Vec<Option<Result<InstanceRun, InstanceFailure>>> = (0..instances.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    instances
                        .iter()
                        .enumerate()
                        .skip(w)
                        .step_by(workers)
                        .map(|(idx, inst)| (idx, evaluator.run(graph, inst)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for handle in handles {
            for (idx, result) in handle.join().expect("evaluator worker panicked") {
                slots[idx] = Some(result);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceKind {
    /// Used for importance signals.
    Probe,
    /// Used for acceptance checks and candidate scoring.
    Acceptance,
}

/// Evaluation counts by slice.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub probe: usize,
    pub acceptance: usize,
}

impl EvalCounts {
    pub fn total(&self) -> usize {
        self.probe + self.acceptance
    }

    pub fn since(&self, earlier: &EvalCounts) -> EvalCounts {
        EvalCounts {
            probe: self.probe - earlier.probe,
            acceptance: self.acceptance - earlier.acceptance,
        }
    }
}

/// An evaluator bound to pricing and to the probe and acceptance slices.
pub struct Harness<'a> {
    evaluator: &'a dyn Evaluator,
    pricing: &'a PricingTable,
    probe: Vec<DatasetInstance>,
    acceptance: Vec<DatasetInstance>,
    probe_calls: AtomicUsize,
    acceptance_calls: AtomicUsize,
}

impl<'a> Harness<'a> {
    pub fn new(
        evaluator: &'a dyn Evaluator,
        pricing: &'a PricingTable,
        probe: Vec<DatasetInstance>,
        acceptance: Vec<DatasetInstance>,
    ) -> Result<Self, EvalError> {
        if probe.is_empty() || acceptance.is_empty() {
            return Err(EvalError::EmptySlice);
        }
        Ok(Self {
            evaluator,
            pricing,
            probe,
            acceptance,
            probe_calls: AtomicUsize::new(0),
            acceptance_calls: AtomicUsize::new(0),
        })
    }

    /// Uses the same instances for probing and acceptance.
    pub fn single_slice(
        evaluator: &'a dyn Evaluator,
        pricing: &'a PricingTable,
        instances: Vec<DatasetInstance>,
    ) -> Result<Self, EvalError> {
        Self::new(evaluator, pricing, instances.clone(), instances)
    }

    pub fn pricing(&self) -> &PricingTable {
        self.pricing
    }

    pub fn evaluate(&self, graph: &WorkflowGraph, slice: SliceKind) -> Result<EvalOutcome, EvalError> {
        let (instances, counter) = match slice {
            SliceKind::Probe => (&self.probe, &self.probe_calls),
            SliceKind::Acceptance => (&self.acceptance, &self.acceptance_calls),
        };
        counter.fetch_add(1, Ordering::Relaxed);
        evaluate(graph, instances, self.evaluator, self.pricing)
    }

    pub fn counts(&self) -> EvalCounts {
        EvalCounts {
            probe: self.probe_calls.load(Ordering::Relaxed),
            acceptance: self.acceptance_calls.load(Ordering::Relaxed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Edge, OperatorKind, WorkflowNode};
    use serde_json::json;

    fn dataset(n: usize) -> Dataset {
        Dataset::new(
            "toy",
            (0..n)
                .map(|i| DatasetInstance::new(format!("q{i:03}"), format!("question {i}"), json!(i)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn probe_of_full_size_is_sorted_identity() {
        let ds = dataset(12);
        let slice = sample_probe(&ds, 12, 3).unwrap();
        let ids: Vec<&str> = ds.instances().iter().map(|i| i.id.as_str()).collect();
        assert_eq!(slice.ids, ids);
        assert!(!slice.truncated);
    }

    #[test]
    fn probe_is_seed_stable() {
        let ds = dataset(100);
        let a = sample_probe(&ds, 10, 42).unwrap();
        let b = sample_probe(&ds, 10, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.ids.len(), 10);
        let unique: BTreeSet<_> = a.ids.iter().collect();
        assert_eq!(unique.len(), 10);
        let c = sample_probe(&ds, 10, 43).unwrap();
        assert_ne!(a.ids, c.ids);
    }

    #[test]
    fn oversized_probe_returns_whole_set_with_warning() {
        let ds = dataset(5);
        let slice = sample_probe(&ds, DEFAULT_PROBE_SIZE, 1).unwrap();
        assert_eq!(slice.ids.len(), 5);
        assert!(slice.truncated);
        assert_eq!(slice.requested, 50);
    }

    #[test]
    fn probe_errors() {
        let empty = Dataset::new("e", vec![]).unwrap();
        assert!(matches!(sample_probe(&empty, 3, 0), Err(EvalError::EmptyDataset)));
        assert!(matches!(
            sample_probe(&dataset(3), 0, 0),
            Err(EvalError::InvalidProbeSize)
        ));
    }

    #[test]
    fn dataset_jsonl_parsing() {
        let text =
            "{\"id\":\"a\",\"input\":\"1+1\",\"target\":\"2\"}\n\n{\"id\":\"b\",\"input\":\"2+2\",\"target\":4}\n";
        let ds = Dataset::from_jsonl("toy", text).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.instances()[1].target, json!(4));

        let dup = "{\"id\":\"a\",\"input\":\"\",\"target\":\"\"}\n{\"id\":\"a\",\"input\":\"\",\"target\":\"\"}";
        assert!(matches!(
            Dataset::from_jsonl("d", dup),
            Err(EvalError::DuplicateInstance(_))
        ));
        let bad = "{\"id\":\"a\"}";
        assert!(matches!(
            Dataset::from_jsonl("d", bad),
            Err(EvalError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn pricing_parsing_and_validation() {
        let text = r#"{"m": {"input_rate": "1e-6", "output_rate": 2e-6}}"#;
        let table = PricingTable::from_json(text).unwrap();
        let cost = table.call_cost(&"m".into(), 100, 50).unwrap();
        assert!((cost - 2.0e-4).abs() < 1e-18);
        let neg = r#"{"m": {"input_rate": "-1", "output_rate": "0"}}"#;
        assert!(matches!(PricingTable::from_json(neg), Err(EvalError::InvalidRate(_))));
        let back = PricingTable::from_json(&table.to_json()).unwrap();
        assert_eq!(back, table);
    }

    struct Fixed;
    impl Evaluator for Fixed {
        fn run(&self, graph: &WorkflowGraph, inst: &DatasetInstance) -> Result<InstanceRun, InstanceFailure> {
            if inst.id.ends_with('3') {
                return Err(InstanceFailure::Instance {
                    message: "boom".into(),
                    calls: vec![],
                });
            }
            Ok(InstanceRun {
                score: 1.0,
                calls: graph
                    .nodes()
                    .iter()
                    .map(|n| NodeCall {
                        node: n.id.clone(),
                        model: n.model.clone(),
                        input_tokens: 100,
                        output_tokens: 50,
                    })
                    .collect(),
            })
        }
        fn max_parallelism(&self) -> usize {
            3
        }
    }

    fn one_node() -> WorkflowGraph {
        WorkflowGraph::new(
            vec![WorkflowNode::new("i", OperatorKind::Custom, "m")],
            Vec::<Edge>::new(),
            vec!["i".into()],
            "i".into(),
            "",
        )
    }

    #[test]
    fn failed_instances_score_zero_and_run_continues() {
        let pricing = PricingTable::new().with("m", 1e-6, 2e-6);
        let ds = dataset(10);
        let out = evaluate(&one_node(), ds.instances(), &Fixed, &pricing).unwrap();
        assert_eq!(out.failures(), 1);
        assert!((out.avg_score - 0.9).abs() < 1e-12);
        assert!((out.avg_cost_usd - 0.9 * 2.0e-4).abs() < 1e-15);
        assert_eq!(out.per_instance[3].error.as_deref(), Some("boom"));
        assert_eq!(out.per_instance.len(), 10);
        assert_eq!(out.per_instance[7].id, "q007");
    }

    #[test]
    fn missing_pricing_is_a_hard_error() {
        let pricing = PricingTable::new();
        let ds = dataset(2);
        assert!(matches!(
            evaluate(&one_node(), ds.instances(), &Fixed, &pricing),
            Err(EvalError::UnpricedModel(_))
        ));
    }

    #[test]
    fn harness_counts_evaluations() {
        let pricing = PricingTable::new().with("m", 1e-6, 2e-6);
        let h = Harness::single_slice(&Fixed, &pricing, dataset(4).instances().to_vec()).unwrap();
        h.evaluate(&one_node(), SliceKind::Probe).unwrap();
        h.evaluate(&one_node(), SliceKind::Acceptance).unwrap();
        h.evaluate(&one_node(), SliceKind::Acceptance).unwrap();
        assert_eq!(
            h.counts(),
            EvalCounts {
                probe: 1,
                acceptance: 2
            }
        );
    }
}
