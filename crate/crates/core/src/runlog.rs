//! Line-delimited run log and its audit.
//!
//! The first line is a header carrying the tool version, a start timestamp and
//! the resolved configuration. Every following line (the body) is a pure
//! function of configuration and seed: stage records, an optional abort line
//! and a closing summary.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compressor::{BudgetWarning, Stage, StageSummary, StepRecord, Verdict};
use crate::eval::EvalCounts;
use crate::money;

const TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("log is empty")]
    Empty,
    #[error("first line is not a header")]
    MissingHeader,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub tool: String,
    pub version: String,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub chosen_digest: String,
    pub score: f64,
    #[serde(with = "money")]
    pub cost: f64,
    pub pool_size: usize,
    pub stages: Vec<StageSummary>,
    pub evaluations: EvalCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_warning: Option<BudgetWarning>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogLine {
    Header(RunHeader),
    Step(StepRecord),
    Abort {
        stage: Stage,
        error: String,
        stages: Vec<StageSummary>,
    },
    Summary(RunSummary),
}

impl LogLine {
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("log lines serialize");
        s.push('\n');
        s
    }
}

/// Appends lines to a sink, flushing after each one.
pub struct LogWriter<W: Write> {
    sink: W,
}

impl<W: Write> LogWriter<W> {
    pub fn new(sink: W) -> Self {
        Self { sink }
    }

    pub fn append(&mut self, line: &LogLine) -> Result<(), LogError> {
        self.sink.write_all(line.to_line().as_bytes())?;
        self.sink.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.sink
    }
}

pub fn parse_log(text: &str) -> Result<Vec<LogLine>, LogError> {
    let lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|source| LogError::Parse { line: i + 1, source }))
        .collect::<Result<Vec<LogLine>, _>>()?;
    match lines.first() {
        None => Err(LogError::Empty),
        Some(LogLine::Header(_)) => Ok(lines),
        Some(_) => Err(LogError::MissingHeader),
    }
}

/// Everything after the header line.
pub fn log_body(text: &str) -> &str {
    text.split_once('\n').map_or("", |(_, rest)| rest)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditReport {
    pub problems: Vec<String>,
    pub records: usize,
    pub accepted: usize,
}

impl AuditReport {
    pub fn is_ok(&self) -> bool {
        self.problems.is_empty()
    }
}

/// Checks digest chains, acceptance thresholds and the stage threshold chain.
pub fn audit(lines: &[LogLine]) -> AuditReport {
    let mut report = AuditReport::default();
    let steps: Vec<&StepRecord> = lines
        .iter()
        .filter_map(|l| match l {
            LogLine::Step(r) => Some(r),
            _ => None,
        })
        .collect();
    report.records = steps.len();
    report.accepted = steps.iter().filter(|r| r.verdict == Verdict::Accepted).count();

    let (stages, summary) = match lines.last() {
        Some(LogLine::Summary(s)) => (s.stages.clone(), Some(s)),
        Some(LogLine::Abort { stages, .. }) => (stages.clone(), None),
        _ => {
            report.problems.push("log has no closing summary or abort line".into());
            return report;
        }
    };

    let mut cursor = 0;
    for st in &stages {
        let mine: Vec<&StepRecord> = steps[cursor..]
            .iter()
            .take_while(|r| r.stage == st.stage)
            .copied()
            .collect();
        cursor += mine.len();
        match st.stage {
            Stage::Prune | Stage::Quantize => audit_greedy(st, &mine, &mut report.problems),
            Stage::Tune => audit_tune(st, &mine, &mut report.problems),
        }
    }
    if cursor != steps.len() && summary.is_some() {
        report.problems.push(format!(
            "{} step records do not belong to any finished stage",
            steps.len() - cursor
        ));
    }

    for pair in stages.windows(2) {
        if pair[1].input_digest != pair[0].output_digest {
            report.problems.push(format!(
                "{} stage input {} is not the {} stage output {}",
                pair[1].stage, pair[1].input_digest, pair[0].stage, pair[0].output_digest
            ));
        }
        if (pair[1].baseline_score - pair[0].output_score).abs() > TOLERANCE {
            report.problems.push(format!(
                "{} stage baseline {} differs from the {} stage output score {}",
                pair[1].stage, pair[1].baseline_score, pair[0].stage, pair[0].output_score
            ));
        }
    }

    if let Some(sum) = summary {
        let known = stages
            .iter()
            .flat_map(|s| [&s.input_digest, &s.output_digest])
            .chain(steps.iter().map(|r| &r.digest_after))
            .any(|d| *d == sum.chosen_digest);
        if !known && !stages.is_empty() {
            report
                .problems
                .push(format!("chosen digest {} never appears in the log", sum.chosen_digest));
        }
    }
    report
}

fn audit_greedy(st: &StageSummary, records: &[&StepRecord], problems: &mut Vec<String>) {
    let Some(tau) = st.tau else {
        problems.push(format!("{} stage summary lacks tau", st.stage));
        return;
    };
    let threshold = tau * st.baseline_score;
    let mut current = st.input_digest.clone();
    for r in records {
        if (r.threshold - threshold).abs() > TOLERANCE {
            problems.push(format!(
                "{} iteration {}: threshold {} is not tau * baseline = {}",
                st.stage, r.iteration, r.threshold, threshold
            ));
        }
        if r.digest_before != current {
            problems.push(format!(
                "{} iteration {}: before-digest {} does not extend the accepted chain at {}",
                st.stage, r.iteration, r.digest_before, current
            ));
        }
        match r.verdict {
            Verdict::Accepted => {
                if r.score_after < r.threshold {
                    problems.push(format!(
                        "{} iteration {}: accepted score {} is below threshold {}",
                        st.stage, r.iteration, r.score_after, r.threshold
                    ));
                }
                current = r.digest_after.clone();
            }
            Verdict::Rejected | Verdict::RolledBack => {
                if r.score_after >= r.threshold {
                    problems.push(format!(
                        "{} iteration {}: trial at {} met threshold {} but was not accepted",
                        st.stage, r.iteration, r.score_after, r.threshold
                    ));
                }
            }
        }
    }
    if st.output_digest != current {
        problems.push(format!(
            "{} stage output {} is neither its input nor its last accepted graph",
            st.stage, st.output_digest
        ));
    }
    if st.output_score + TOLERANCE < threshold {
        problems.push(format!(
            "{} stage output score {} is below tau * baseline = {}",
            st.stage, st.output_score, threshold
        ));
    }
}

fn audit_tune(st: &StageSummary, records: &[&StepRecord], problems: &mut Vec<String>) {
    let mut known: BTreeSet<&str> = BTreeSet::from([st.input_digest.as_str()]);
    for r in records {
        if !known.contains(r.digest_before.as_str()) {
            problems.push(format!(
                "tune round {}: parent {} was never evaluated",
                r.iteration, r.digest_before
            ));
        }
        known.insert(&r.digest_after);
        if r.verdict == Verdict::Accepted && r.score_after <= st.baseline_score {
            problems.push(format!(
                "tune round {}: accepted without strict improvement",
                r.iteration
            ));
        }
    }
    if !known.contains(st.output_digest.as_str()) {
        problems.push(format!("tune output {} was never evaluated", st.output_digest));
    }
    if st.output_score < st.baseline_score {
        problems.push("tune output scores below its start".into());
    }
}
