//! Experiment orchestration for the FB exploration workbench: run
//! configuration, the training loop, metrics and checkpoint files, multi-seed
//! sweeps, and diagnostics. The `fbee` binary wraps these as subcommands.

pub mod checkpoint;
pub mod config;
pub mod diagnostics;
pub mod metrics;
pub mod run;
pub mod sweep;

pub use config::RunConfig;
pub use run::{run, RunArtifacts};
pub use sweep::{sweep, SweepReport};
