//! Reference optimizers: surrogate gradient ascent, GP expected improvement
//! and local random search.

mod gp;
mod hypercube;
mod surrogate;

pub use gp::{ei, gp_ei_run, GpConfig, GpRun, GpState};
pub use hypercube::{random_hypercube_baseline, HypercubeResult};
pub use surrogate::{ascend, grad_ascent_baseline, train_surrogate, AscentPath, GradAscentConfig, GradAscentResult, SurrogateNet};
