//! Scenario runner and ablation suites.

mod ablation;
mod config;
mod run;

pub use ablation::{
    median, run_ablation_suite, run_variants, variants, AblationReport, AblationRow, Comparison,
    Group, GroupMiou, Suite, Variant, TAU_GRID,
};
pub use config::{
    AblationToggles, AugmentSpec, DataSpec, MemorySpec, Method, Preset, ScenarioConfig,
    ScheduleSpec, Seeds, TrainSpec, CONFIG_VERSION,
};
pub use run::{
    checkpoint_path, config_digest, evaluate, run_scenario, run_scenario_with, MemoryTrace,
    RunOptions, RunOutcome, StepTrace,
};

use std::path::PathBuf;

/// Environment variable naming the default output root.
pub const OUTPUT_ENV: &str = "CISS_LAB_OUT";

/// `$CISS_LAB_OUT`, or `./out` when unset.
pub fn default_output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"))
}
