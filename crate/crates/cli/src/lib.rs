//! Scenario loading, single runs and parameter sweeps for the closed-loop
//! DR-MPC simulator.

pub mod runner;
pub mod scenario;

pub use runner::{run_to_dir, sweep, ExitStatus, RunError, RunOptions, Summary, SweepRow};
pub use scenario::{load_scenario, parse_scenario, scenario_hash, write_scenario, Loaded, ScenarioError};
