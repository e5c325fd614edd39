//! Cost economics and Pareto extraction.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::money;

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("baseline cost must be positive, got {0}")]
    NonPositiveBaseline(f64),
    #[error("no points to report")]
    Empty,
    #[error("invalid scenario table: {0}")]
    Scenarios(String),
}

/// Number of executions that amortize a one-time optimization cost.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BreakEven {
    Calls(u64),
    Undefined(String),
}

impl fmt::Display for BreakEven {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BreakEven::Calls(n) => write!(f, "{n}"),
            BreakEven::Undefined(_) => f.write_str("undefined"),
        }
    }
}

/// `C_optimize / (C_base − C_ours)`, rounded to the nearest whole execution.
pub fn break_even(c_optimize: f64, c_base: f64, c_ours: f64) -> BreakEven {
    let saving = c_base - c_ours;
    if !(saving.is_finite() && c_optimize.is_finite()) {
        return BreakEven::Undefined("non-finite input".into());
    }
    if saving <= 0.0 {
        return BreakEven::Undefined(format!(
            "no per-problem saving (C_base − C_ours = {})",
            money::format_usd(saving)
        ));
    }
    if c_optimize < 0.0 {
        return BreakEven::Undefined("negative optimization cost".into());
    }
    BreakEven::Calls((c_optimize / saving).round() as u64)
}

/// `100 · (C_base − C_ours) / C_base`.
pub fn cost_reduction(c_base: f64, c_ours: f64) -> Result<f64, ReportError> {
    if c_base.is_nan() || c_base <= 0.0 {
        return Err(ReportError::NonPositiveBaseline(c_base));
    }
    Ok(100.0 * (c_base - c_ours) / c_base)
}

/// One decimal place, as reported.
pub fn format_percent(pct: f64) -> String {
    format!("{pct:.1}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(with = "money")]
    pub c_base: f64,
    #[serde(with = "money")]
    pub c_ours: f64,
    #[serde(with = "money")]
    pub c_optimize: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EconRow {
    pub name: String,
    #[serde(with = "money")]
    pub c_base: f64,
    #[serde(with = "money")]
    pub c_ours: f64,
    #[serde(with = "money")]
    pub delta: f64,
    pub reduction_pct: f64,
    #[serde(with = "money")]
    pub c_optimize: f64,
    pub break_even: BreakEven,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EconReport {
    pub rows: Vec<EconRow>,
}

impl EconReport {
    pub fn from_scenarios(scenarios: &[Scenario]) -> Result<Self, ReportError> {
        let rows = scenarios
            .iter()
            .map(|s| {
                Ok(EconRow {
                    name: s.name.clone(),
                    c_base: s.c_base,
                    c_ours: s.c_ours,
                    delta: s.c_base - s.c_ours,
                    reduction_pct: cost_reduction(s.c_base, s.c_ours)?,
                    c_optimize: s.c_optimize,
                    break_even: break_even(s.c_optimize, s.c_base, s.c_ours),
                })
            })
            .collect::<Result<_, ReportError>>()?;
        Ok(Self { rows })
    }

    /// Scenarios as a JSON array of `{name, c_base, c_ours, c_optimize}`.
    pub fn from_json(text: &str) -> Result<Self, ReportError> {
        let scenarios: Vec<Scenario> = serde_json::from_str(text).map_err(|e| ReportError::Scenarios(e.to_string()))?;
        Self::from_scenarios(&scenarios)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("scenario\tc_base\tc_ours\tdelta_c\treduction_pct\tc_optimize\tbreak_even\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.name,
                money::format_usd(r.c_base),
                money::format_usd(r.c_ours),
                money::format_usd(r.delta),
                format_percent(r.reduction_pct),
                money::format_usd(r.c_optimize),
                r.break_even
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub score: f64,
    pub cost: f64,
}

impl ParetoPoint {
    pub fn new(score: f64, cost: f64) -> Self {
        Self { score, cost }
    }

    /// At least as good on both axes and strictly better on one.
    pub fn dominates(&self, other: &ParetoPoint) -> bool {
        self.score >= other.score && self.cost <= other.cost && (self.score > other.score || self.cost < other.cost)
    }
}

/// Non-dominated points under (score up, cost down), duplicates removed,
/// sorted by ascending cost.
pub fn pareto_frontier(points: &[ParetoPoint]) -> Result<Vec<ParetoPoint>, ReportError> {
    if points.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut front: Vec<ParetoPoint> = Vec::new();
    for p in points {
        if points.iter().any(|q| q.dominates(p)) || front.contains(p) {
            continue;
        }
        front.push(*p);
    }
    front.sort_by(|a, b| a.cost.total_cmp(&b.cost).then(b.score.total_cmp(&a.score)));
    Ok(front)
}

/// Two whitespace-separated numeric columns: score, cost.
pub fn pareto_tsv(points: &[ParetoPoint]) -> String {
    points
        .iter()
        .map(|p| format!("{}\t{}\n", p.score, money::format_usd(p.cost)))
        .collect()
}

pub fn parse_pareto_tsv(text: &str) -> Result<Vec<ParetoPoint>, ReportError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split_whitespace().collect();
            let parse = |s: &str| s.parse::<f64>().ok();
            match cols.as_slice() {
                [s, c] => match (parse(s), parse(c)) {
                    (Some(s), Some(c)) => Ok(ParetoPoint::new(s, c)),
                    _ => Err(ReportError::Scenarios(format!("line {}: not numeric", i + 1))),
                },
                _ => Err(ReportError::Scenarios(format!("line {}: expected two columns", i + 1))),
            }
        })
        .collect()
}
