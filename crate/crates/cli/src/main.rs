//! `slim`: compress a workflow, audit run logs, and report cost economics.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};

use slim_core::compressor::StageOrder;
use slim_core::config::{ConfigError, EvaluatorConfig, RunConfig, StageName};
use slim_core::graph::WorkflowGraph;
use slim_core::report::{break_even, pareto_frontier, pareto_tsv, parse_pareto_tsv, EconReport, ParetoPoint};
use slim_core::runlog::{audit, parse_log, LogLine};
use slim_core::runner::{execute, FailureKind, RunStatus};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_EVALUATOR: u8 = 3;
const EXIT_BUDGET: u8 = 4;

#[derive(Parser)]
#[command(name = "slim", version, about = "Compress DAG multi-agent workflows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the compression pipeline.
    Run(RunArgs),
    /// Cost table and Pareto frontier from scenarios, logs or Pareto files.
    Report(ReportArgs),
    /// Check the digest and threshold chains of a run log.
    Audit { log: PathBuf },
    /// Validate a workflow document.
    Validate { workflow: PathBuf },
    /// Executions needed to amortize an optimization cost.
    BreakEven {
        #[arg(long)]
        c_optimize: f64,
        #[arg(long)]
        c_base: f64,
        #[arg(long)]
        c_ours: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    PruneFirst,
    QuantizeFirst,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    workflow: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    pricing: Option<PathBuf>,
    /// Synthetic task spec; selects the synthetic evaluator.
    #[arg(long)]
    synthetic: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated subset of prune,quantize,tune.
    #[arg(long, value_delimiter = ',')]
    stages: Option<Vec<String>>,
    #[arg(long, value_enum)]
    order: Option<OrderArg>,
    #[arg(long)]
    tau_p: Option<f64>,
    #[arg(long)]
    tau_q: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    probe_size: Option<usize>,
    /// Maximum USD per problem for the returned workflow.
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit with status 4 when no workflow meets the budget.
    #[arg(long)]
    budget_violation_error: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// JSON array of {name, c_base, c_ours, c_optimize}.
    #[arg(long)]
    scenarios: Option<PathBuf>,
    /// Run logs whose evaluated points feed the frontier.
    #[arg(long)]
    log: Vec<PathBuf>,
    /// Two-column score/cost files.
    #[arg(long)]
    pareto: Vec<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

fn config_failure(e: ConfigError) -> Failure {
    Failure::new(EXIT_CONFIG, format!("configuration error: {e}"))
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::new(EXIT_CONFIG, format!("cannot read {}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Report(args) => report(args),
        Command::Audit { log } => audit_cmd(&log),
        Command::Validate { workflow } => validate(&workflow),
        Command::BreakEven {
            c_optimize,
            c_base,
            c_ours,
        } => {
            println!("{}", break_even(c_optimize, c_base, c_ours));
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("slim: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn build_config(args: &RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path).map_err(config_failure)?,
        None => {
            let need = |v: &Option<PathBuf>, flag: &str| {
                v.clone()
                    .ok_or_else(|| Failure::new(EXIT_CONFIG, format!("--{flag} is required without --config")))
            };
            let seed = args
                .seed
                .ok_or_else(|| Failure::new(EXIT_CONFIG, "--seed is required without --config"))?;
            let spec = need(&args.synthetic, "synthetic")?;
            let text = format!(
                "workflow = {:?}\ndataset = {:?}\npricing = {:?}\nseed = {seed}\n[evaluator]\nkind = \"synthetic\"\nspec = {:?}\n",
                need(&args.workflow, "workflow")?,
                need(&args.dataset, "dataset")?,
                need(&args.pricing, "pricing")?,
                spec
            );
            RunConfig::from_toml(&text, Path::new("<flags>")).map_err(config_failure)?
        }
    };
    if args.config.is_some() {
        let set = |slot: &mut PathBuf, v: &Option<PathBuf>| {
            if let Some(v) = v {
                *slot = v.clone();
            }
        };
        set(&mut cfg.workflow, &args.workflow);
        set(&mut cfg.dataset, &args.dataset);
        set(&mut cfg.pricing, &args.pricing);
        if let Some(spec) = &args.synthetic {
            cfg.evaluator = EvaluatorConfig::Synthetic { spec: spec.clone() };
        }
        if let Some(seed) = args.seed {
            cfg.seed = seed;
        }
    }
    if let Some(stages) = &args.stages {
        cfg.stages = stages
            .iter()
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.parse::<StageName>())
            .collect::<Result<_, _>>()
            .map_err(config_failure)?;
    }
    if let Some(order) = args.order {
        cfg.order = match order {
            OrderArg::PruneFirst => StageOrder::PruneFirst,
            OrderArg::QuantizeFirst => StageOrder::QuantizeFirst,
        };
    }
    if let Some(t) = args.tau_p {
        cfg.prune.tau = t;
    }
    if let Some(t) = args.tau_q {
        cfg.quantize.tau = t;
    }
    if let Some(k) = args.top_k {
        cfg.prune.k = k;
        cfg.quantize.k = k;
    }
    if let Some(m) = args.probe_size {
        cfg.slices.probe = m;
    }
    if args.budget.is_some() {
        cfg.budget = args.budget;
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let cfg = build_config(&args)?;
    let started_at = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let artifacts = execute(&cfg, started_at).map_err(config_failure)?;
    artifacts.write_to(&cfg.out).map_err(|e| {
        Failure::new(
            EXIT_FAILURE,
            format!("cannot write artifacts to {}: {e}", cfg.out.display()),
        )
    })?;

    match artifacts.status {
        RunStatus::Completed {
            best,
            best_outcome,
            stages,
            evaluations,
            pool_size,
            warning,
        } => {
            let (base_score, base_cost) = stages
                .first()
                .map_or((best_outcome.avg_score, best_outcome.avg_cost_usd), |s| {
                    (s.baseline_score, s.baseline_cost)
                });
            println!("base: score {base_score:.4}, cost {base_cost:.6} USD/problem");
            println!(
                "best: score {:.4}, cost {:.6} USD/problem, {} nodes, digest {}",
                best_outcome.avg_score,
                best_outcome.avg_cost_usd,
                best.len(),
                &best.digest()[..12]
            );
            println!(
                "evaluations: {} probe, {} acceptance; pool {pool_size}",
                evaluations.probe, evaluations.acceptance
            );
            println!("artifacts: {}", cfg.out.display());
            if let Some(w) = warning {
                eprintln!("slim: warning: {w}");
                if args.budget_violation_error {
                    return Err(Failure::new(EXIT_BUDGET, "budget violated"));
                }
            }
            Ok(())
        }
        RunStatus::Aborted { kind, message, .. } => {
            let code = match kind {
                FailureKind::Config => EXIT_CONFIG,
                FailureKind::Evaluator => EXIT_EVALUATOR,
                FailureKind::Internal => EXIT_FAILURE,
            };
            Err(Failure::new(code, message))
        }
    }
}

fn points_from_log(lines: &[LogLine]) -> Vec<ParetoPoint> {
    let mut pts = Vec::new();
    for line in lines {
        match line {
            LogLine::Step(r) => pts.push(ParetoPoint::new(r.score_after, r.cost_after)),
            LogLine::Summary(s) => {
                for st in &s.stages {
                    pts.push(ParetoPoint::new(st.baseline_score, st.baseline_cost));
                }
            }
            LogLine::Abort { stages, .. } => {
                for st in stages {
                    pts.push(ParetoPoint::new(st.baseline_score, st.baseline_cost));
                }
            }
            LogLine::Header(_) => {}
        }
    }
    pts
}

fn report(args: ReportArgs) -> Result<(), Failure> {
    if args.scenarios.is_none() && args.log.is_empty() && args.pareto.is_empty() {
        return Err(Failure::new(
            EXIT_CONFIG,
            "nothing to report: pass --scenarios, --log or --pareto",
        ));
    }
    if let Some(path) = &args.scenarios {
        let table = EconReport::from_json(&read(path)?).map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?;
        print!("{}", table.to_tsv());
    }
    let mut points = Vec::new();
    for path in &args.log {
        let lines =
            parse_log(&read(path)?).map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", path.display())))?;
        points.extend(points_from_log(&lines));
    }
    for path in &args.pareto {
        points.extend(
            parse_pareto_tsv(&read(path)?)
                .map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", path.display())))?,
        );
    }
    if !args.log.is_empty() || !args.pareto.is_empty() {
        let front = pareto_frontier(&points).map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?;
        if args.scenarios.is_some() {
            println!();
        }
        println!("# pareto frontier: score\tcost");
        print!("{}", pareto_tsv(&front));
    }
    Ok(())
}

fn audit_cmd(path: &Path) -> Result<(), Failure> {
    let lines = parse_log(&read(path)?).map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", path.display())))?;
    let r = audit(&lines);
    println!("{} records, {} accepted", r.records, r.accepted);
    if r.is_ok() {
        println!("audit passed");
        Ok(())
    } else {
        for p in &r.problems {
            println!("problem: {p}");
        }
        Err(Failure::new(
            EXIT_FAILURE,
            format!("audit found {} problem(s)", r.problems.len()),
        ))
    }
}

fn validate(path: &Path) -> Result<(), Failure> {
    let text = read(path)?;
    let graph = match WorkflowGraph::from_document(&text) {
        Ok(g) => g,
        Err(e) => return Err(Failure::new(EXIT_FAILURE, format!("{}: {e}", path.display()))),
    };
    let report = graph.validate();
    for n in &report.notices {
        println!("notice: {n}");
    }
    println!(
        "valid: {} nodes, {} edges, digest {}",
        graph.len(),
        graph.edges().len(),
        graph.digest()
    );
    Ok(())
}
