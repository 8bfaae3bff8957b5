//! Single runs and parameter sweeps with their on-disk outputs.

use std::fs;
use std::path::{Path, PathBuf};

use drmpc_core::mpc::{ControllerKind, FallbackMode};
use drmpc_core::sim::{run_closed_loop, Outcome, Scenario, SimTrace};
use rayon::prelude::*;
use serde::Serialize;

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    LapCompleted = 0,
    Usage = 2,
    Collision = 3,
    InfeasibleAbort = 4,
    NumericFailure = 5,
    Io = 6,
    Scenario = 7,
    Incomplete = 8,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }

    pub fn from_outcome(o: &Outcome) -> Self {
        match o {
            Outcome::LapCompleted => ExitStatus::LapCompleted,
            Outcome::Collision { .. } => ExitStatus::Collision,
            Outcome::Aborted { .. } => ExitStatus::InfeasibleAbort,
            Outcome::NumericFailure { .. } => ExitStatus::NumericFailure,
            Outcome::Incomplete => ExitStatus::Incomplete,
        }
    }
}

/// Per-run overrides on top of the scenario file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub controller: Option<ControllerKind>,
    pub theta: Option<f64>,
    pub seed: Option<u64>,
    pub strict: bool,
    pub record_timing: bool,
}

impl RunOptions {
    pub fn apply(&self, base: &Scenario) -> (Scenario, ControllerKind, u64) {
        let mut s = base.clone();
        if let Some(t) = self.theta {
            s.mpc.risk.theta = t;
        }
        if self.strict {
            s.mpc.fallback = FallbackMode::Strict;
        }
        if self.record_timing {
            s.record_timing = true;
        }
        let kind = self.controller.unwrap_or(s.mpc.controller);
        s.mpc.controller = kind;
        let seed = self.seed.unwrap_or(s.seed);
        s.seed = seed;
        (s, kind, seed)
    }
}

/// Structured summary written next to each trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub scenario: String,
    pub scenario_hash: String,
    pub controller: String,
    pub theta: f64,
    pub seed: u64,
    pub outcome: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcome_stage: Option<usize>,
    pub stages: usize,
    pub accumulated_cost: f64,
    pub lap_completed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lap_time: Option<f64>,
    pub avg_solve_ms: f64,
    pub collision: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_clearance: Option<f64>,
    pub non_optimal_stages: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_risk_lhs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl Summary {
    pub fn from_trace(scenario: &Scenario, hash: &str, trace: &SimTrace) -> Self {
        let s = &trace.summary;
        let outcome_stage = match s.outcome {
            Outcome::Collision { stage } | Outcome::Aborted { stage, .. } | Outcome::NumericFailure { stage } => {
                Some(stage)
            }
            _ => None,
        };
        Self {
            scenario: scenario.name.clone(),
            scenario_hash: hash.to_string(),
            controller: s.controller.as_str().to_string(),
            theta: s.theta,
            seed: s.seed,
            outcome: s.outcome.as_str().to_string(),
            outcome_stage,
            stages: s.stages,
            accumulated_cost: s.accumulated_cost,
            lap_completed: s.lap_completed,
            lap_time: s.lap_time,
            avg_solve_ms: s.avg_solve_time * 1e3,
            collision: s.collision,
            min_clearance: s.min_clearance,
            non_optimal_stages: s.non_optimal_stages,
            max_risk_lhs: s.max_risk_lhs,
            message: s.message.clone(),
        }
    }
}

#[derive(Debug)]
pub enum RunError {
    Io(String),
    Scenario(String),
    Numeric(String),
}

impl RunError {
    pub fn exit_status(&self) -> ExitStatus {
        match self {
            RunError::Io(_) => ExitStatus::Io,
            RunError::Scenario(_) => ExitStatus::Scenario,
            RunError::Numeric(_) => ExitStatus::NumericFailure,
        }
    }
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Io(m) => write!(f, "I/O error: {m}"),
            RunError::Scenario(m) => write!(f, "scenario error: {m}"),
            RunError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Io(format!("{}: {e}", path.display()))
}

/// Runs one closed loop and writes `trace.csv` and `summary.toml` into
/// `out_dir`.
pub fn run_to_dir(base: &Scenario, opts: &RunOptions, hash: &str, out_dir: &Path) -> Result<Summary, RunError> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    // Fail on unwritable outputs before spending time in the loop.
    let trace_path = out_dir.join("trace.csv");
    let file = fs::File::create(&trace_path).map_err(|e| io_err(&trace_path, e))?;
    let (scenario, kind, seed) = opts.apply(base);
    let trace = run_closed_loop(&scenario, kind, seed).map_err(|e| match e {
        drmpc_core::error::Error::InvalidArgument(m) => RunError::Scenario(m),
        other => RunError::Numeric(other.to_string()),
    })?;
    trace
        .write_csv(std::io::BufWriter::new(file))
        .map_err(|e| io_err(&trace_path, e))?;
    let summary = Summary::from_trace(&scenario, hash, &trace);
    let summary_path = out_dir.join("summary.toml");
    let text = toml::to_string(&summary).map_err(|e| io_err(&summary_path, e))?;
    fs::write(&summary_path, text).map_err(|e| io_err(&summary_path, e))?;
    Ok(summary)
}

/// One row of the sweep table.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub theta: f64,
    pub seed: u64,
    pub result: Result<Summary, String>,
}

pub const SWEEP_COLUMNS: [&str; 13] = [
    "scenario_hash",
    "controller",
    "theta",
    "seed",
    "outcome",
    "accumulated_cost",
    "lap_time",
    "avg_solve_ms",
    "collision",
    "min_clearance",
    "non_optimal_stages",
    "max_risk_lhs",
    "error",
];

fn cell_dir(out: &Path, kind: ControllerKind, theta: f64, seed: u64) -> PathBuf {
    out.join(format!("{}_theta{theta:e}_seed{seed}", kind.as_str()))
}

/// Runs every `(θ, seed)` cell in parallel. A failing cell is reported in
/// its row and does not stop the others.
pub fn sweep(
    base: &Scenario,
    opts: &RunOptions,
    thetas: &[f64],
    seeds: &[u64],
    hash: &str,
    out_dir: &Path,
) -> Result<Vec<SweepRow>, RunError> {
    if thetas.is_empty() {
        return Err(RunError::Scenario("sweep needs at least one theta".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let kind = opts.controller.unwrap_or(base.mpc.controller);
    let cells: Vec<(f64, u64)> = thetas.iter().flat_map(|&t| seeds.iter().map(move |&s| (t, s))).collect();
    let rows: Vec<SweepRow> = cells
        .par_iter()
        .map(|&(theta, seed)| {
            let cell_opts = RunOptions {
                theta: Some(theta),
                seed: Some(seed),
                ..opts.clone()
            };
            let result = run_to_dir(base, &cell_opts, hash, &cell_dir(out_dir, kind, theta, seed)).map_err(|e| e.to_string());
            SweepRow { theta, seed, result }
        })
        .collect();
    let table = out_dir.join("sweep.csv");
    write_sweep_table(&rows, kind, hash, &table).map_err(|e| io_err(&table, e))?;
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_sweep_table(rows: &[SweepRow], kind: ControllerKind, hash: &str, path: &Path) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SWEEP_COLUMNS)?;
    for r in rows {
        let rec = match &r.result {
            Ok(s) => vec![
                hash.to_string(),
                s.controller.clone(),
                r.theta.to_string(),
                r.seed.to_string(),
                s.outcome.clone(),
                s.accumulated_cost.to_string(),
                opt(s.lap_time),
                s.avg_solve_ms.to_string(),
                s.collision.to_string(),
                opt(s.min_clearance),
                s.non_optimal_stages.to_string(),
                opt(s.max_risk_lhs),
                String::new(),
            ],
            Err(e) => {
                let mut v = vec![hash.to_string(), kind.as_str().to_string(), r.theta.to_string(), r.seed.to_string()];
                v.push("error".into());
                v.extend(std::iter::repeat_n(String::new(), 7));
                v.push(e.clone());
                v
            }
        };
        w.write_record(rec)?;
    }
    w.flush()
}
