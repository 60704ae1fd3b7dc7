//! Experiment driver: configuration resolution, subcommands and artifacts.

pub mod commands;
pub mod config;
pub mod svg;

pub use commands::{
    cmd_calibrate, cmd_check_instances, cmd_compare, cmd_generate_sample, cmd_sensitivity, cmd_simulate, run_behavior,
    run_compare, BehaviorRun, CompareOutcome, SweepParam,
};
pub use config::{ConfigFile, Overrides, RunConfig, Scenario};
