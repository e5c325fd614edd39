//! Run configuration file (TOML) and its resolution into runnable parts.
//!
//! Relative paths are resolved against the directory holding the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compressor::{PipelineConfig, StageConfig, StageOrder, SurrogateMap};
use crate::eval::{
    sample_probe, Dataset, DatasetInstance, EvalError, Evaluator, Grader, HttpEvaluator, HttpEvaluatorConfig,
    PricingTable, RetryPolicy, SyntheticEvaluator, SyntheticTaskSpec, DEFAULT_PROBE_SIZE,
};
use crate::graph::{GraphError, ModelId, WorkflowGraph};
use crate::importance::FusionConfig;
use crate::tuner::{MutationContext, TunerConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("workflow: {0}")]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Prune,
    Quantize,
    Tune,
}

impl std::str::FromStr for StageName {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "prune" => Ok(StageName::Prune),
            "quantize" => Ok(StageName::Quantize),
            "tune" => Ok(StageName::Tune),
            other => Err(ConfigError::Invalid(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvaluatorConfig {
    Synthetic {
        spec: PathBuf,
    },
    Http {
        grader: Grader,
        #[serde(default)]
        prompts: Option<PathBuf>,
        #[serde(default = "default_parallelism")]
        parallelism: usize,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
        #[serde(default = "default_attempts")]
        attempts: u32,
        #[serde(default = "default_backoff")]
        backoff_ms: u64,
    },
}

fn default_parallelism() -> usize {
    4
}
fn default_timeout() -> u64 {
    120
}
fn default_attempts() -> u32 {
    3
}
fn default_backoff() -> u64 {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSection {
    pub tau: f64,
    pub k: usize,
    pub max_iterations: Option<usize>,
}

impl Default for StageSection {
    fn default() -> Self {
        let d = StageConfig::default();
        Self {
            tau: d.tau,
            k: d.k,
            max_iterations: d.max_iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SliceSection {
    pub probe: usize,
    /// `None` uses the whole dataset.
    pub acceptance: Option<usize>,
}

impl Default for SliceSection {
    fn default() -> Self {
        Self {
            probe: DEFAULT_PROBE_SIZE,
            acceptance: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub variants: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub workflow: PathBuf,
    pub dataset: PathBuf,
    pub pricing: PathBuf,
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub budget: Option<f64>,
    #[serde(default = "default_stages")]
    pub stages: Vec<StageName>,
    #[serde(default)]
    pub order: StageOrder,
    pub evaluator: EvaluatorConfig,
    #[serde(default)]
    pub slices: SliceSection,
    #[serde(default)]
    pub prune: StageSection,
    #[serde(default)]
    pub quantize: StageSection,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub tuner: Option<TunerConfig>,
    #[serde(default)]
    pub surrogates: BTreeMap<ModelId, ModelId>,
    #[serde(default)]
    pub prompts: PromptSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_stages() -> Vec<StageName> {
    vec![StageName::Prune, StageName::Quantize]
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Parses the file and makes every path absolute relative to it.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut cfg = Self::from_toml(&read(path)?, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.workflow);
        fix(&mut self.dataset);
        fix(&mut self.pricing);
        fix(&mut self.out);
        match &mut self.evaluator {
            EvaluatorConfig::Synthetic { spec } => fix(spec),
            EvaluatorConfig::Http { prompts, .. } => {
                if let Some(p) = prompts {
                    fix(p)
                }
            }
        }
    }

    pub fn enabled(&self, stage: StageName) -> bool {
        self.stages.contains(&stage)
    }

    fn stage_config(&self, s: &StageSection) -> StageConfig {
        StageConfig {
            tau: s.tau,
            k: s.k,
            max_iterations: s.max_iterations,
            fusion: self.fusion,
        }
    }

    /// Pipeline settings implied by this configuration.
    pub fn pipeline(&self) -> Result<PipelineConfig, ConfigError> {
        let surrogates = SurrogateMap::new(self.surrogates.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let prune = self.enabled(StageName::Prune).then(|| self.stage_config(&self.prune));
        let quantize = self
            .enabled(StageName::Quantize)
            .then(|| self.stage_config(&self.quantize));
        for c in prune.iter().chain(quantize.iter()) {
            c.check().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        let tuner = self.enabled(StageName::Tune).then(|| {
            self.tuner.unwrap_or(TunerConfig {
                seed: self.seed,
                ..TunerConfig::default()
            })
        });
        if let Some(t) = &tuner {
            t.check().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if let Some(b) = self.budget {
            if !(b.is_finite() && b >= 0.0) {
                return Err(ConfigError::Invalid(format!(
                    "budget must be a non-negative number, got {b}"
                )));
            }
        }
        Ok(PipelineConfig {
            prune,
            quantize,
            order: self.order,
            mutation_context: MutationContext {
                prompt_variants: self.prompts.variants.clone(),
                surrogates: surrogates.clone(),
            },
            surrogates,
            tuner,
            budget: self.budget,
        })
    }

    /// Loads every referenced file and checks pricing coverage. No
    /// evaluation happens here.
    pub fn prepare(&self) -> Result<Prepared, ConfigError> {
        let pipeline = self.pipeline()?;
        let graph = WorkflowGraph::from_document(&read(&self.workflow)?)?;
        let name = self
            .dataset
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let dataset = Dataset::from_jsonl(name, &read(&self.dataset)?)?;
        let pricing = PricingTable::from_json(&read(&self.pricing)?)?;

        let mut missing: Vec<String> = graph.unpriced_models(&pricing).iter().map(|m| m.to_string()).collect();
        for (from, to) in pipeline.surrogates.iter() {
            for m in [from, to] {
                if !pricing.contains(m) && !missing.contains(&m.to_string()) {
                    missing.push(m.to_string());
                }
            }
        }
        if !missing.is_empty() {
            return Err(ConfigError::Invalid(format!(
                "pricing table has no entry for: {}",
                missing.join(", ")
            )));
        }

        let probe = dataset.select(&sample_probe(&dataset, self.slices.probe, self.seed)?)?;
        let acceptance = match self.slices.acceptance {
            None => dataset.instances().to_vec(),
            Some(m) => dataset.select(&sample_probe(&dataset, m, self.seed.wrapping_add(1))?)?,
        };

        let evaluator: Box<dyn Evaluator> = match &self.evaluator {
            EvaluatorConfig::Synthetic { spec } => {
                Box::new(SyntheticEvaluator::new(SyntheticTaskSpec::from_json(&read(spec)?)?)?)
            }
            EvaluatorConfig::Http {
                grader,
                prompts,
                parallelism,
                timeout_secs,
                attempts,
                backoff_ms,
            } => {
                let mut c = HttpEvaluatorConfig::from_env(grader.clone())?;
                if let Some(p) = prompts {
                    c.prompts = serde_json::from_str(&read(p)?).map_err(|e| ConfigError::Parse {
                        path: p.clone(),
                        message: e.to_string(),
                    })?;
                }
                c.parallelism = *parallelism;
                c.timeout = Duration::from_secs(*timeout_secs);
                c.retry = RetryPolicy {
                    attempts: *attempts,
                    base_delay: Duration::from_millis(*backoff_ms),
                };
                Box::new(HttpEvaluator::new(c)?)
            }
        };

        Ok(Prepared {
            graph,
            dataset,
            pricing,
            evaluator,
            probe,
            acceptance,
            pipeline,
        })
    }
}

pub struct Prepared {
    pub graph: WorkflowGraph,
    pub dataset: Dataset,
    pub pricing: PricingTable,
    pub evaluator: Box<dyn Evaluator>,
    pub probe: Vec<DatasetInstance>,
    pub acceptance: Vec<DatasetInstance>,
    pub pipeline: PipelineConfig,
}
