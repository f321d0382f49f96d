//! Library surface of the `bvpo-lab` experiment harness, exposed so the
//! integration and acceptance suites can drive commands in-process.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod scenario;

pub use commands::{run_command, run_scenarios, Command};
pub use config::{load_scenarios, ScenarioConfig};
pub use error::{CliError, Result};
