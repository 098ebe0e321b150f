//! Experiment harness: configuration, suite runners and report emission.

pub mod config;
pub mod plot;
pub mod report;
pub mod suites;

use config::ExperimentConfig;
use hindex::par::Execution;
use report::RunReport;

/// Run the suite named in `cfg`.
pub fn run_suite(cfg: &ExperimentConfig, exec: Execution) -> RunReport {
    suites::Runner::new(cfg, exec).run()
}
