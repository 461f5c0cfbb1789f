//! Configuration, presets and the file-writing runner behind the `contmon`
//! binary.

pub mod config;
pub mod presets;
pub mod runner;

pub use config::{parse_config, to_json, ConfigError, ScenarioConfig, Violation};
pub use runner::{execute, rerun, run_to_dir, Manifest, RunError, RunOptions};
