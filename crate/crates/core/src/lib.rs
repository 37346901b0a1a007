//! Offline black-box optimization by generative sequence modeling.
//!
//! The pipeline turns a static dataset of evaluations into sorted,
//! regret-budget-annotated trajectories ([`sortsample`]), fits a causally
//! masked transformer to them ([`model`], [`train`]), and rolls the model out
//! under a low budget to propose new points ([`rollout`]).

pub mod baselines;
pub mod dataset;
pub mod error;
pub mod functions;
pub mod harness;
pub mod model;
pub mod rollout;
pub mod seed;
pub mod sortsample;
pub mod theory;
pub mod train;

pub use dataset::{OfflineDataset, WithholdMode};
pub use error::{Error, Result};
pub use functions::{TaskKind, TaskSpec};
pub use seed::SeedStream;
pub use sortsample::{SortSampleParams, Strategy, Trajectory, TrajectoryDataset};
