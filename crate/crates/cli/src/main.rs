use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use drmpc_cli::{load_scenario, run_to_dir, scenario_hash, sweep, write_scenario, ExitStatus, RunOptions};
use drmpc_core::mpc::ControllerKind;

#[derive(Parser)]
#[command(name = "drmpc", version, about = "Closed-loop DR-MPC collision-avoidance simulator")]
struct Cli {
    /// Log level: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Drmpc,
    Saa,
}

impl From<Kind> for ControllerKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Drmpc => ControllerKind::Drmpc,
            Kind::Saa => ControllerKind::Saa,
        }
    }
}

#[derive(clap::Args)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long, short)]
    scenario: PathBuf,
    /// Controller; defaults to the scenario's.
    #[arg(long, value_enum)]
    controller: Option<Kind>,
    /// Abort on the first non-optimal solve instead of braking.
    #[arg(long)]
    strict: bool,
    /// Write solver wall times into the trace.
    #[arg(long)]
    record_timing: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed loop and write trace.csv and summary.toml.
    Run {
        #[command(flatten)]
        common: Common,
        /// Wasserstein radius; defaults to the scenario's.
        #[arg(long)]
        theta: Option<f64>,
        /// Master seed; defaults to the scenario's.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, short, default_value = "out")]
        out: PathBuf,
    },
    /// Run a grid of radii and seeds and write sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated radii.
        #[arg(long, value_delimiter = ',', required = true)]
        thetas: Vec<f64>,
        /// Comma-separated seeds; defaults to the scenario's.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, short, default_value = "out")]
        out: PathBuf,
    },
    /// Validate a scenario and print it with all defaults filled in.
    Check {
        #[arg(long, short)]
        scenario: PathBuf,
    },
}

fn exit(status: ExitStatus) -> ExitCode {
    ExitCode::from(status.code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                exit(ExitStatus::Usage)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log_level).init();

    let path = match &cli.command {
        Command::Run { common, .. } | Command::Sweep { common, .. } => &common.scenario,
        Command::Check { scenario } => scenario,
    };
    let loaded = match load_scenario(path) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: {e}");
            return exit(ExitStatus::Scenario);
        }
    };
    for k in &loaded.unknown_keys {
        log::warn!("unknown scenario key `{k}` ignored");
    }
    let scenario = loaded.scenario;
    let hash = match scenario_hash(&scenario) {
        Ok(h) => h,
        Err(e) => {
            eprintln!("error: {e}");
            return exit(ExitStatus::Scenario);
        }
    };

    match cli.command {
        Command::Check { .. } => match write_scenario(&scenario) {
            Ok(text) => {
                for k in &loaded.unknown_keys {
                    eprintln!("warning: unknown key `{k}`");
                }
                print!("{text}");
                println!("# sha256 {hash}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                exit(ExitStatus::Scenario)
            }
        },
        Command::Run {
            common,
            theta,
            seed,
            out,
        } => {
            let opts = RunOptions {
                controller: common.controller.map(Into::into),
                theta,
                seed,
                strict: common.strict,
                record_timing: common.record_timing,
            };
            match run_to_dir(&scenario, &opts, &hash, &out) {
                Ok(s) => {
                    println!(
                        "{} theta={} seed={} outcome={} stages={} cost={:.4} lap_time={} avg_solve_ms={:.3} min_clearance={}",
                        s.controller,
                        s.theta,
                        s.seed,
                        s.outcome,
                        s.stages,
                        s.accumulated_cost,
                        s.lap_time.map(|t| format!("{t:.2}")).unwrap_or_else(|| "-".into()),
                        s.avg_solve_ms,
                        s.min_clearance.map(|c| format!("{c:.4}")).unwrap_or_else(|| "-".into()),
                    );
                    let status = match s.outcome.as_str() {
                        "lap_completed" => ExitStatus::LapCompleted,
                        "collision" => ExitStatus::Collision,
                        "aborted" => ExitStatus::InfeasibleAbort,
                        "numeric_failure" => ExitStatus::NumericFailure,
                        _ => ExitStatus::Incomplete,
                    };
                    exit(status)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    exit(e.exit_status())
                }
            }
        }
        Command::Sweep {
            common,
            thetas,
            seeds,
            out,
        } => {
            let seeds = if seeds.is_empty() { vec![scenario.seed] } else { seeds };
            let opts = RunOptions {
                controller: common.controller.map(Into::into),
                strict: common.strict,
                record_timing: common.record_timing,
                ..RunOptions::default()
            };
            match sweep(&scenario, &opts, &thetas, &seeds, &hash, &out) {
                Ok(rows) => {
                    for r in &rows {
                        match &r.result {
                            Ok(s) => println!(
                                "theta={} seed={} outcome={} cost={:.4} lap_time={} collision={}",
                                r.theta,
                                r.seed,
                                s.outcome,
                                s.accumulated_cost,
                                s.lap_time.map(|t| format!("{t:.2}")).unwrap_or_else(|| "-".into()),
                                s.collision
                            ),
                            Err(e) => println!("theta={} seed={} error: {e}", r.theta, r.seed),
                        }
                    }
                    println!("table: {}", out.join("sweep.csv").display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    exit(e.exit_status())
                }
            }
        }
    }
}
