//! Configuration handling and run orchestration behind the `pseudopde` binary.

pub mod config;
pub mod output;
pub mod run;

pub use config::{check, parse_config, ConfigErrors, Phase, RunConfig};
pub use run::{run, RunOptions, RunOutcome, EXIT_ERROR, EXIT_NOT_CONVERGED, EXIT_OK};
