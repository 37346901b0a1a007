//! Gaussian-process expected-improvement optimizer with fixed hyperparameters.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::functions::{TaskKind, TaskSpec};
use crate::rollout::Oracle;
use crate::seed::{derive_seed, rng_from};

const JITTER_START: f64 = 1e-8;
const JITTER_MAX: f64 = 1e-2;

/// Squared-exponential kernel settings on unit-scaled inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpConfig {
    pub signal_var: f64,
    /// Length-scale as a fraction of the unit-cube diagonal.
    pub length_frac: f64,
    pub noise_std: f64,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self { signal_var: 1.0, length_frac: 0.1, noise_std: 1e-3 }
    }
}

/// Posterior over standardized outputs.
#[derive(Clone, Debug)]
pub struct GpState {
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<f64>,
    pub length_scale: f64,
    pub signal_var: f64,
    pub noise_std: f64,
    pub jitter: f64,
    y_mean: f64,
    y_std: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl GpState {
    /// Conditions on `inputs` (already unit-scaled) and raw `outputs`.
    pub fn fit(inputs: Vec<Vec<f64>>, outputs: Vec<f64>, cfg: &GpConfig) -> Result<Self> {
        let n = inputs.len();
        if n == 0 || n != outputs.len() {
            return Err(Error::Config("GP needs matching, nonempty inputs and outputs".into()));
        }
        let dim = inputs[0].len();
        let length_scale = cfg.length_frac * (dim as f64).sqrt();
        let mean = outputs.iter().sum::<f64>() / n as f64;
        let var = outputs.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n as f64;
        let y_std = if var > 0.0 { var.sqrt() } else { 1.0 };
        let k = |a: &[f64], b: &[f64]| cfg.signal_var * (-0.5 * sq_dist(a, b) / (length_scale * length_scale)).exp();
        let base = DMatrix::from_fn(n, n, |i, j| k(&inputs[i], &inputs[j]));
        let y = DVector::from_iterator(n, outputs.iter().map(|v| (v - mean) / y_std));
        let noise = cfg.noise_std * cfg.noise_std;
        let mut jitter = 0.0;
        loop {
            let mut km = base.clone();
            for i in 0..n {
                km[(i, i)] += noise + jitter;
            }
            if let Some(chol) = Cholesky::new(km) {
                let alpha = chol.solve(&y);
                return Ok(Self {
                    inputs,
                    outputs,
                    length_scale,
                    signal_var: cfg.signal_var,
                    noise_std: cfg.noise_std,
                    jitter,
                    y_mean: mean,
                    y_std,
                    chol,
                    alpha,
                });
            }
            jitter = if jitter == 0.0 { JITTER_START } else { jitter * 10.0 };
            if jitter > JITTER_MAX {
                return Err(Error::Numerical(format!("kernel matrix of {n} points is not positive definite")));
            }
        }
    }

    fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        self.signal_var * (-0.5 * sq_dist(a, b) / (self.length_scale * self.length_scale)).exp()
    }

    /// Latent posterior mean and standard deviation in raw output units.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let ks = DVector::from_iterator(self.inputs.len(), self.inputs.iter().map(|xi| self.kernel(x, xi)));
        let mean = ks.dot(&self.alpha);
        let v = self.chol.l().solve_lower_triangular(&ks).expect("cholesky factor is invertible");
        let var = (self.signal_var - v.dot(&v)).max(0.0);
        (mean * self.y_std + self.y_mean, var.sqrt() * self.y_std)
    }
}

/// Closed-form expected improvement over `incumbent` for maximization.
pub fn ei(mean: f64, std: f64, incumbent: f64) -> f64 {
    let imp = mean - incumbent;
    if !(std > 0.0) {
        return imp.max(0.0);
    }
    let z = imp / std;
    let n = Normal::standard();
    (imp * n.cdf(z) + std * n.pdf(z)).max(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpRun {
    pub task: String,
    pub n_init: usize,
    pub points: Vec<Vec<f64>>,
    pub values: Vec<f64>,
}

impl GpRun {
    pub fn best_so_far(&self) -> Vec<f64> {
        self.values
            .iter()
            .scan(f64::NEG_INFINITY, |b, &v| {
                *b = b.max(v);
                Some(*b)
            })
            .collect()
    }

    /// Mean of the second half of the value sequence minus that of the first.
    pub fn half_gain(&self) -> f64 {
        let n = self.values.len();
        let h = n / 2;
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        mean(&self.values[n - h..]) - mean(&self.values[..h])
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "iter,value,best_so_far")?;
        for (i, (v, b)) in self.values.iter().zip(self.best_so_far()).enumerate() {
            writeln!(w, "{i},{v},{b}")?;
        }
        Ok(())
    }
}

/// `n_init` uniform points, then `iters` rounds of EI maximization over
/// fresh uniform candidate pools.
pub fn gp_ei_run(task: &TaskSpec, n_init: usize, iters: usize, candidates: usize, cfg: &GpConfig, seed: u64) -> Result<GpRun> {
    if task.kind() != TaskKind::Continuous {
        return Err(Error::Config("GP-EI needs a continuous task".into()));
    }
    if n_init == 0 || (iters > 0 && candidates == 0) {
        return Err(Error::Config("GP-EI needs n_init >= 1 and a nonempty candidate pool".into()));
    }
    let bounds = task.bounds();
    let unit = |x: &[f64]| -> Vec<f64> { x.iter().zip(&bounds).map(|(v, (lo, hi))| (v - lo) / (hi - lo)).collect() };
    let oracle = Oracle::new(task);
    let mut rng = rng_from(derive_seed(seed, "gp_init", 0));
    let mut points = Vec::with_capacity(n_init + iters);
    let mut values = Vec::with_capacity(n_init + iters);
    for _ in 0..n_init {
        let x = task.sample_uniform(&mut rng);
        values.push(oracle.eval(&x)?);
        points.push(x);
    }
    for it in 0..iters {
        let gp = GpState::fit(points.iter().map(|p| unit(p)).collect(), values.clone(), cfg)?;
        let incumbent = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut pool_rng = rng_from(derive_seed(seed, "gp_pool", it as u64));
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..candidates {
            let x = task.sample_uniform(&mut pool_rng);
            let (m, s) = gp.predict(&unit(&x));
            let a = ei(m, s, incumbent);
            if best.as_ref().map_or(true, |b| a > b.0) {
                best = Some((a, x));
            }
        }
        let x = best.expect("candidate pool is nonempty").1;
        values.push(oracle.eval(&x)?);
        points.push(x);
    }
    Ok(GpRun { task: task.name().to_string(), n_init, points, values })
}
