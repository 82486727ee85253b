//! Experiment runner for continuous-time EP: configuration, CSV/JSON
//! artifacts, and the `simulate`, `infer`, `benchmark` and `validate`
//! pipelines behind the `ctep` binary.

pub mod benchmark;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;

pub use benchmark::{run_benchmark, BenchmarkReport, BenchmarkRow, MethodOutcome, ReplicateRecord};
pub use commands::{benchmark_cmd, infer_cmd, simulate, validate_cmd, Diagnostics};
pub use config::{load_config, parse_config, Experiment, ExperimentConfig, Method, Overrides};
pub use error::{CliError, Result};
