//! Configuration, run orchestration, sweeps, and artifact plumbing.

pub mod config;
pub mod experiments;
pub mod pipeline;

pub use config::{Profile, RunConfig};
pub use experiments::{ablate, ablation_csv, emit_plotdata, reproduce, AblationRow, PlotKind, ReproduceSummary};
pub use pipeline::{run, RunOutcome, RunRecord};
