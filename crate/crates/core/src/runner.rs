//! End-to-end run: configuration in, log and artifacts out.

use std::fs;
use std::io;
use std::path::Path;

use crate::compressor::{run_pipeline, BudgetWarning, CandidatePool, CompressError, Stage, StageSummary};
use crate::config::{ConfigError, RunConfig};
use crate::eval::{EvalCounts, EvalError, EvalOutcome, Harness};
use crate::graph::WorkflowGraph;
use crate::importance::ImportanceError;
use crate::report::{pareto_tsv, ParetoPoint};
use crate::runlog::{LogLine, RunHeader, RunSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Config,
    Evaluator,
    Internal,
}

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
pub enum RunStatus {
    Completed {
        best: WorkflowGraph,
        best_outcome: EvalOutcome,
        stages: Vec<StageSummary>,
        evaluations: EvalCounts,
        pool_size: usize,
        warning: Option<BudgetWarning>,
    },
    Aborted {
        stage: Stage,
        kind: FailureKind,
        message: String,
    },
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub lines: Vec<LogLine>,
    /// Score and cost of every evaluated workflow.
    pub points: Vec<ParetoPoint>,
    pub status: RunStatus,
}

impl RunArtifacts {
    pub fn log_text(&self) -> String {
        self.lines.iter().map(LogLine::to_line).collect()
    }

    /// Writes `log.jsonl`, `pareto.tsv` and, on success, `best_workflow.json`.
    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("log.jsonl"), self.log_text())?;
        if !self.points.is_empty() {
            fs::write(dir.join("pareto.tsv"), pareto_tsv(&self.points))?;
        }
        if let RunStatus::Completed { best, .. } = &self.status {
            fs::write(dir.join("best_workflow.json"), best.to_document())?;
        }
        Ok(())
    }
}

fn failure_kind(e: &CompressError) -> FailureKind {
    match e {
        CompressError::Config(_) | CompressError::Eval(EvalError::Config(_)) => FailureKind::Config,
        CompressError::Eval(_) | CompressError::Importance(ImportanceError::Eval(_)) => FailureKind::Evaluator,
        CompressError::Importance(_) => FailureKind::Internal,
    }
}

/// Prepares inputs, runs the pipeline and assembles the log.
///
/// Configuration problems are returned as errors before any evaluation;
/// failures during the run are reported through [`RunStatus::Aborted`]
/// together with the partial log.
pub fn execute(cfg: &RunConfig, started_at: u64) -> Result<RunArtifacts, ConfigError> {
    let prepared = cfg.prepare()?;
    let harness = Harness::new(
        prepared.evaluator.as_ref(),
        &prepared.pricing,
        prepared.probe.clone(),
        prepared.acceptance.clone(),
    )?;

    let mut lines = vec![LogLine::Header(RunHeader {
        tool: "slim".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        started_at,
        config: serde_json::to_value(cfg).unwrap_or_default(),
    })];
    let points_of = |pool: &CandidatePool| -> Vec<ParetoPoint> {
        pool.entries()
            .iter()
            .map(|e| ParetoPoint::new(e.outcome.avg_score, e.outcome.avg_cost_usd))
            .collect()
    };

    let artifacts = match run_pipeline(&prepared.graph, &prepared.pipeline, &harness) {
        Ok(out) => {
            lines.extend(out.records.iter().cloned().map(LogLine::Step));
            lines.push(LogLine::Summary(RunSummary {
                chosen_digest: out.best.digest(),
                score: out.best_outcome.avg_score,
                cost: out.best_outcome.avg_cost_usd,
                pool_size: out.pool.len(),
                stages: out.stages.clone(),
                evaluations: out.evaluations,
                budget_warning: out.warning,
            }));
            RunArtifacts {
                lines,
                points: points_of(&out.pool),
                status: RunStatus::Completed {
                    best: out.best,
                    best_outcome: out.best_outcome,
                    stages: out.stages,
                    evaluations: out.evaluations,
                    pool_size: out.pool.len(),
                    warning: out.warning,
                },
            }
        }
        Err(abort) => {
            lines.extend(abort.records.iter().cloned().map(LogLine::Step));
            lines.push(LogLine::Abort {
                stage: abort.stage,
                error: abort.error.to_string(),
                stages: abort.stages.clone(),
            });
            RunArtifacts {
                lines,
                points: points_of(&abort.pool),
                status: RunStatus::Aborted {
                    stage: abort.stage,
                    kind: failure_kind(&abort.error),
                    message: abort.to_string(),
                },
            }
        }
    };
    Ok(artifacts)
}
