//! Forward-model gradient ascent.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::OfflineDataset;
use crate::error::{Error, Result};
use crate::functions::TaskKind;
use crate::rollout::Oracle;
use crate::seed::{derive_seed, rng_from};
use crate::train::{adam_step, AdamState, TrainConfig};

/// One-hidden-layer ReLU regressor `x -> y`.
///
/// Inputs are mapped to `[-1, 1]` by the task bounds and targets are
/// standardized; [`SurrogateNet::predict`] and [`SurrogateNet::input_grad`]
/// work in raw units.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateNet {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

impl SurrogateNet {
    pub fn new<R: Rng + ?Sized>(bounds: &[(f64, f64)], hidden: usize, y_mean: f64, y_std: f64, rng: &mut R) -> Self {
        let d = bounds.len();
        let n1 = Normal::new(0.0, (2.0 / d as f64).sqrt()).unwrap();
        let n2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).unwrap();
        Self {
            w1: Array2::from_shape_fn((d, hidden), |_| n1.sample(rng)),
            b1: Array1::zeros(hidden),
            w2: Array1::from_shape_fn(hidden, |_| n2.sample(rng)),
            b2: 0.0,
            x_lo: bounds.iter().map(|b| b.0).collect(),
            x_hi: bounds.iter().map(|b| b.1).collect(),
            y_mean,
            y_std: if y_std > 0.0 { y_std } else { 1.0 },
        }
    }

    fn encode(&self, x: &[f64]) -> Array1<f64> {
        x.iter()
            .enumerate()
            .map(|(k, &v)| 2.0 * (v - self.x_lo[k]) / (self.x_hi[k] - self.x_lo[k]) - 1.0)
            .collect()
    }

    fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        v.extend(self.w1.iter());
        v.extend(self.b1.iter());
        v.extend(self.w2.iter());
        v.push(self.b2);
        v
    }

    fn set_flat(&mut self, v: &[f64]) {
        let (a, rest) = v.split_at(self.w1.len());
        let (b, rest) = rest.split_at(self.b1.len());
        let (c, rest) = rest.split_at(self.w2.len());
        self.w1.iter_mut().zip(a).for_each(|(d, s)| *d = *s);
        self.b1.iter_mut().zip(b).for_each(|(d, s)| *d = *s);
        self.w2.iter_mut().zip(c).for_each(|(d, s)| *d = *s);
        self.b2 = rest[0];
    }

    /// Standardized output for encoded inputs (rows).
    fn forward_std(&self, z: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
        let pre = z.dot(&self.w1) + &self.b1;
        let h = pre.mapv(|v| v.max(0.0));
        let out = h.dot(&self.w2) + self.b2;
        (pre, out)
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let z = self.encode(x).insert_axis(Axis(0));
        let (_, out) = self.forward_std(&z);
        out[0] * self.y_std + self.y_mean
    }

    /// Gradient of the raw-unit prediction with respect to raw inputs.
    pub fn input_grad(&self, x: &[f64]) -> Vec<f64> {
        let z = self.encode(x).insert_axis(Axis(0));
        let (pre, _) = self.forward_std(&z);
        let gate: Array1<f64> = pre.row(0).iter().zip(&self.w2).map(|(&p, &w)| if p > 0.0 { w } else { 0.0 }).collect();
        let dz = self.w1.dot(&gate);
        dz.iter()
            .enumerate()
            .map(|(k, &g)| g * self.y_std * 2.0 / (self.x_hi[k] - self.x_lo[k]))
            .collect()
    }

    /// Mean squared error (standardized units) and its parameter gradient.
    fn loss_grad(&self, z: &Array2<f64>, y: &Array1<f64>) -> (f64, Vec<f64>) {
        let n = z.nrows() as f64;
        let (pre, out) = self.forward_std(z);
        let h = pre.mapv(|v| v.max(0.0));
        let diff = &out - y;
        let loss = diff.mapv(|v| v * v).sum() / n;
        let dout = diff.mapv(|v| 2.0 * v / n);
        let dw2 = h.t().dot(&dout);
        let db2 = dout.sum();
        let mut dpre = dout.insert_axis(Axis(1)).dot(&self.w2.view().insert_axis(Axis(0)));
        dpre.zip_mut_with(&pre, |d, &p| {
            if p <= 0.0 {
                *d = 0.0
            }
        });
        let dw1 = z.t().dot(&dpre);
        let db1 = dpre.sum_axis(Axis(0));
        let mut g = Vec::with_capacity(self.n_params());
        g.extend(dw1.iter());
        g.extend(db1.iter());
        g.extend(dw2.iter());
        g.push(db2);
        (loss, g)
    }

    /// Mean squared error in standardized units over the dataset.
    pub fn mse(&self, ds: &OfflineDataset) -> f64 {
        let (z, y) = self.encode_dataset(ds);
        self.loss_grad(&z, &y).0
    }

    fn encode_dataset(&self, ds: &OfflineDataset) -> (Array2<f64>, Array1<f64>) {
        let d = ds.dim();
        let mut z = Array2::zeros((ds.len(), d));
        for i in 0..ds.len() {
            z.row_mut(i).assign(&self.encode(ds.point(i)));
        }
        let y = ds.values().iter().map(|v| (v - self.y_mean) / self.y_std).collect();
        (z, y)
    }
}

/// Fits a surrogate with minibatch Adam (`batch_size`, `learning_rate`,
/// `epochs` and clipping taken from `cfg`).
pub fn train_surrogate(ds: &OfflineDataset, hidden: usize, cfg: &TrainConfig) -> Result<SurrogateNet> {
    cfg.validate()?;
    if ds.task().kind() != TaskKind::Continuous {
        return Err(Error::Config("surrogate gradient ascent needs a continuous task".into()));
    }
    let vals = ds.values();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut net = SurrogateNet::new(&ds.task().bounds(), hidden, mean, std, &mut rng_from(derive_seed(cfg.seed, "init", 0)));
    let (z, y) = net.encode_dataset(ds);
    let mut params = net.flat();
    let mut state = AdamState::new(params.len());
    let mut order: Vec<usize> = (0..ds.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_from(derive_seed(cfg.seed, "epoch", epoch as u64)));
        for chunk in order.chunks(cfg.batch_size) {
            let zb = z.select(Axis(0), chunk);
            let yb = y.select(Axis(0), chunk);
            let (loss, mut g) = net.loss_grad(&zb, &yb);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { loss, epoch: epoch + 1, batch: 0, windows: chunk.len() });
            }
            if let Some(clip) = cfg.grad_clip_norm {
                let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > clip {
                    g.iter_mut().for_each(|v| *v *= clip / norm);
                }
            }
            adam_step(&mut params, &g, &mut state, cfg);
            net.set_flat(&params);
        }
    }
    Ok(net)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradAscentConfig {
    pub steps: usize,
    pub step_size: f64,
    pub restarts: usize,
    pub hidden: usize,
    pub train: TrainConfig,
}

impl Default for GradAscentConfig {
    fn default() -> Self {
        Self { steps: 64, step_size: 0.1, restarts: 2, hidden: 128, train: TrainConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AscentPath {
    pub start_index: usize,
    pub points: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub clamped_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradAscentResult {
    pub paths: Vec<AscentPath>,
    pub best_point: Vec<f64>,
    pub best_value: f64,
    pub surrogate_mse: f64,
}

/// Trains a surrogate, then from `restarts` random dataset points takes
/// `steps` ascent steps on it. Each iterate is clamped to the domain and
/// every path point, the start included, is scored by the oracle.
pub fn grad_ascent_baseline(ds: &OfflineDataset, cfg: &GradAscentConfig, seed: u64) -> Result<GradAscentResult> {
    if cfg.restarts == 0 || !(cfg.step_size >= 0.0) {
        return Err(Error::Config("grad ascent needs restarts >= 1 and step_size >= 0".into()));
    }
    let tc = TrainConfig { seed: derive_seed(seed, "surrogate", 0), ..cfg.train.clone() };
    let net = train_surrogate(ds, cfg.hidden, &tc)?;
    ascend(ds, &net, cfg, seed)
}

/// Ascent on an already-trained surrogate.
pub fn ascend(ds: &OfflineDataset, net: &SurrogateNet, cfg: &GradAscentConfig, seed: u64) -> Result<GradAscentResult> {
    let task = ds.task();
    let oracle = Oracle::new(task);
    let mut rng = rng_from(derive_seed(seed, "restart", 0));
    let mut paths = Vec::with_capacity(cfg.restarts);
    for _ in 0..cfg.restarts {
        let start = rng.gen_range(0..ds.len());
        let mut x = ds.point(start).to_vec();
        let mut path = AscentPath { start_index: start, points: vec![x.clone()], values: vec![oracle.eval(&x)?], clamped_steps: 0 };
        for _ in 0..cfg.steps {
            let g = net.input_grad(&x);
            let next: Vec<f64> = x.iter().zip(&g).map(|(v, g)| v + cfg.step_size * g).collect();
            let (clamped, moved) = task.clamp(&next);
            path.clamped_steps += moved as usize;
            x = clamped;
            path.values.push(oracle.eval(&x)?);
            path.points.push(x.clone());
        }
        paths.push(path);
    }
    let (best_value, best_point) = paths
        .iter()
        .flat_map(|p| p.values.iter().zip(&p.points))
        .fold((f64::NEG_INFINITY, Vec::new()), |acc, (&v, x)| if v > acc.0 { (v, x.clone()) } else { acc });
    Ok(GradAscentResult { paths, best_point, best_value, surrogate_mse: net.mse(ds) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_offline;
    use crate::functions::TaskSpec;

    fn small() -> (OfflineDataset, GradAscentConfig) {
        let ds = generate_offline(&TaskSpec::branin(), 300, 0.1, 7).unwrap();
        let cfg = GradAscentConfig {
            hidden: 16,
            train: TrainConfig { epochs: 3, learning_rate: 1e-3, ..TrainConfig::default() },
            ..GradAscentConfig::default()
        };
        (ds, cfg)
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let (ds, _) = small();
        let net = SurrogateNet::new(&ds.task().bounds(), 32, -40.0, 30.0, &mut rng_from(1));
        let mut rng = rng_from(2);
        for _ in 0..20 {
            let x = ds.task().sample_uniform(&mut rng);
            let g = net.input_grad(&x);
            for k in 0..2 {
                let h = 1e-6;
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let num = (net.predict(&xp) - net.predict(&xm)) / (2.0 * h);
                let rel = (num - g[k]).abs() / num.abs().max(g[k].abs()).max(1e-8);
                assert!(rel < 1e-4, "{num} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn zero_step_returns_best_start() {
        let (ds, mut cfg) = small();
        cfg.step_size = 0.0;
        let r = grad_ascent_baseline(&ds, &cfg, 3).unwrap();
        let starts: Vec<f64> = r.paths.iter().map(|p| ds.values()[p.start_index]).collect();
        assert_eq!(r.best_value, starts.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }

    #[test]
    fn one_step_per_restart() {
        let (ds, mut cfg) = small();
        cfg.steps = 1;
        let r = grad_ascent_baseline(&ds, &cfg, 3).unwrap();
        assert_eq!(r.paths.len(), 2);
        assert!(r.paths.iter().all(|p| p.points.len() == 2 && p.values.len() == 2));
        assert!(r.paths.iter().flat_map(|p| &p.points).all(|x| ds.task().contains(x)));
    }

    #[test]
    fn training_reduces_error() {
        let (ds, cfg) = small();
        let vals = ds.values();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let untrained = SurrogateNet::new(&ds.task().bounds(), 16, mean, 1.0, &mut rng_from(0));
        let tc = TrainConfig { epochs: 40, ..cfg.train };
        let net = train_surrogate(&ds, 16, &tc).unwrap();
        // Predicting the mean scores 1.0 in standardized units.
        assert!(net.mse(&ds) < 0.9, "{}", net.mse(&ds));
        assert!(net.mse(&ds) < untrained.mse(&ds));
    }

    #[test]
    fn discrete_task_rejected() {
        let task = TaskSpec::hidden_pattern(4, 3).unwrap();
        let ds = generate_offline(&task, 50, 0.1, 0).unwrap();
        assert!(train_surrogate(&ds, 8, &TrainConfig::default()).is_err());
    }
}
