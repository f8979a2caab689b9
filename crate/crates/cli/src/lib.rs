//! Command-line runner for the MMD-regularized transport solvers: configuration, CSV/JSON
//! I/O and the task drivers behind the `ipm-ot` binary.

pub mod config;
pub mod error;
pub mod io;
pub mod run;

pub use config::{load_config, parse_config, RunConfig, Task};
pub use error::{CliError, CliResult};
pub use run::run;
