//! Minibatch Adam training over trajectory windows.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Batch, Gradients, HeadKind, InputScaling, ModelState, Real, Targets};
use crate::seed::{derive_seed, rng_from};
use crate::sortsample::TrajectoryDataset;

/// Windows per gradient shard. Shards are reduced in a fixed order, so the
/// result does not depend on the thread count.
const SHARD_WINDOWS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip_norm: Option<f64>,
    /// Random windows drawn per trajectory each epoch; `None` uses all
    /// `T - C + 1`.
    pub windows_per_traj: Option<usize>,
    /// Write `ckpt_epoch<k>.bin` every this many epochs (0 = final only).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 1e-4,
            epochs: 75,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip_norm: Some(1.0),
            windows_per_traj: None,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be finite and nonnegative", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("adam needs betas in [0, 1) and eps > 0".into()));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip_norm {c} must be positive")));
            }
        }
        if self.windows_per_traj == Some(0) {
            return Err(Error::Config("windows_per_traj must be at least 1".into()));
        }
        Ok(())
    }
}

/// A contiguous run of `len` timesteps starting at zero-based `start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Window {
    pub traj: usize,
    pub start: usize,
    pub len: usize,
}

impl Window {
    /// One-based timestep indices covered by the window.
    pub fn timesteps(&self) -> std::ops::RangeInclusive<usize> {
        self.start + 1..=self.start + self.len
    }
}

/// One epoch of shuffled windows, chunked into batches.
pub fn make_batches(
    trajs: &TrajectoryDataset,
    context_len: usize,
    batch_size: usize,
    windows_per_traj: Option<usize>,
    seed: u64,
) -> Result<Vec<Vec<Window>>> {
    if batch_size == 0 || context_len == 0 {
        return Err(Error::Config("batch_size and context_len must be positive".into()));
    }
    let mut rng = rng_from(seed);
    let mut windows = Vec::new();
    for (i, t) in trajs.trajectories.iter().enumerate() {
        let len = t.len();
        if len < context_len {
            return Err(Error::Config(format!("trajectory {i} has length {len} < context_len {context_len}")));
        }
        let starts = len - context_len + 1;
        match windows_per_traj {
            Some(k) if k < starts => {
                for s in index::sample(&mut rng, starts, k).into_iter() {
                    windows.push(Window { traj: i, start: s, len: context_len });
                }
            }
            _ => windows.extend((0..starts).map(|s| Window { traj: i, start: s, len: context_len })),
        }
    }
    windows.shuffle(&mut rng);
    Ok(windows.chunks(batch_size).map(<[Window]>::to_vec).collect())
}

/// Teacher-forced network inputs and targets for a set of equal-length windows.
pub fn assemble<F: Real>(
    trajs: &TrajectoryDataset,
    windows: &[Window],
    head: &HeadKind,
    scaling: &InputScaling,
) -> Result<(Batch<F>, Targets<F>)> {
    let steps = windows.first().map_or(0, |w| w.len);
    if windows.iter().any(|w| w.len != steps) {
        return Err(Error::Config("windows in a batch must share a length".into()));
    }
    let rows = windows.len() * steps;
    let d = head.dim();
    let mut budgets = Vec::with_capacity(rows);
    let mut timesteps = Vec::with_capacity(rows);
    let mut points = Array2::zeros((rows, head.input_width()));
    let mut cont = Array2::zeros((rows, d));
    let mut disc = Array2::zeros((rows, d));
    for (wi, w) in windows.iter().enumerate() {
        let traj = &trajs.trajectories[w.traj];
        for t in 0..steps {
            let r = wi * steps + t;
            let step = w.start + t;
            budgets.push(F::of(scaling.encode_budget(traj.budgets[step])));
            timesteps.push(step);
            let x = traj.point(step);
            crate::model::encode_point(head, scaling, x, points.row_mut(r).as_slice_mut().unwrap())?;
            for k in 0..d {
                match head {
                    HeadKind::Continuous { .. } => cont[[r, k]] = F::of(scaling.encode_coord(k, x[k])),
                    HeadKind::Discrete { .. } => disc[[r, k]] = x[k] as usize,
                }
            }
        }
    }
    let targets = match head {
        HeadKind::Continuous { .. } => Targets::Continuous(cont),
        HeadKind::Discrete { .. } => Targets::Discrete(disc),
    };
    Ok((Batch { windows: windows.len(), steps, budgets, points, timesteps }, targets))
}

/// First and second moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

/// Rescales `grads` in place to norm at most `max_norm`; returns the
/// original norm.
pub fn clip_gradients<F: Real>(grads: &mut Gradients<F>, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if norm > max_norm {
        let s = F::of(max_norm / norm);
        grads.values.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// One bias-corrected Adam update.
pub fn adam_step<F: Real>(params: &mut [F], grads: &[F], state: &mut AdamState, cfg: &TrainConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let g = g.as_f64();
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let update = cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        *p = F::of(p.as_f64() - update);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wallclock_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<F: Real> {
    pub model: ModelState<F>,
    pub curve: Vec<EpochStats>,
    /// Loss of the initial weights on the first epoch's batches.
    pub initial_loss: f64,
    pub final_checkpoint: Option<PathBuf>,
}

/// Mean loss and gradient of one batch, reduced over fixed shards.
pub fn batch_loss_and_grad<F: Real>(
    model: &ModelState<F>,
    trajs: &TrajectoryDataset,
    windows: &[Window],
) -> Result<(f64, Gradients<F>)> {
    let cfg = model.config();
    let terms = windows.iter().map(|w| w.len).sum::<usize>() * cfg.head.dim();
    let shards: Vec<Result<(f64, Gradients<F>)>> = windows
        .par_chunks(SHARD_WINDOWS)
        .map(|shard| {
            let (batch, targets) = assemble::<F>(trajs, shard, &cfg.head, &cfg.scaling)?;
            let (loss, grads) = model.loss_and_grad(&batch, &targets, Some(terms))?;
            Ok((loss, grads))
        })
        .collect();
    let mut total = Gradients::zeros(model.parameter_count());
    let mut loss = 0.0;
    for shard in shards {
        let (l, g) = shard?;
        loss += l;
        total.add_assign(&g);
    }
    Ok((loss, total))
}

/// Trains in place of `model`, writing telemetry and checkpoints under
/// `out_dir` when given.
///
/// A non-finite loss aborts with [`Error::NonFiniteLoss`]; the weights from
/// before the failing batch are saved as `ckpt_last_good.bin`.
pub fn train<F: Real>(
    mut model: ModelState<F>,
    trajs: &TrajectoryDataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    let c = model.config().context_len;
    if trajs.trajectories.iter().any(|t| t.len() > model.config().max_timestep) {
        return Err(Error::Config("trajectories are longer than the model's timestep table".into()));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut state = AdamState::new(model.parameter_count());
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut initial_loss = f64::NAN;
    let started = Instant::now();
    let mut final_checkpoint = None;
    for epoch in 1..=cfg.epochs {
        let batches = make_batches(
            trajs,
            c,
            cfg.batch_size,
            cfg.windows_per_traj,
            derive_seed(cfg.seed, "epoch", epoch as u64),
        )?;
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for (bi, windows) in batches.iter().enumerate() {
            let result = batch_loss_and_grad(&model, trajs, windows).and_then(|(loss, grads)| {
                if loss.is_finite() && grads.values.iter().all(|g| g.is_finite()) {
                    Ok((loss, grads))
                } else {
                    Err(Error::NonFiniteLoss { loss, epoch, batch: bi, windows: windows.len() })
                }
            });
            let (loss, mut grads) = match result {
                Ok(v) => v,
                Err(Error::NonFiniteLoss { loss, .. }) => {
                    if let Some(dir) = out_dir {
                        save_checkpoint(&model, &dir.join("ckpt_last_good.bin"))?;
                    }
                    return Err(Error::NonFiniteLoss { loss, epoch, batch: bi, windows: windows.len() });
                }
                Err(e) => return Err(e),
            };
            if epoch == 1 && bi == 0 {
                initial_loss = loss;
            }
            if let Some(clip) = cfg.grad_clip_norm {
                clip_gradients(&mut grads, clip);
            }
            adam_step(model.params_mut(), &grads.values, &mut state, cfg);
            debug_assert!(model.all_finite(), "non-finite parameter after step {}", state.step);
            loss_sum += loss * windows.len() as f64;
            count += windows.len();
        }
        let stats = EpochStats { epoch, mean_loss: loss_sum / count as f64, wallclock_s: started.elapsed().as_secs_f64() };
        if let Some(dir) = out_dir {
            append_telemetry(&dir.join("loss.csv"), &stats)?;
            let due = cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0;
            if due || epoch == cfg.epochs {
                let path = dir.join(format!("ckpt_epoch{epoch}.bin"));
                save_checkpoint(&model, &path)?;
                final_checkpoint = Some(path);
            }
        }
        curve.push(stats);
    }
    Ok(TrainOutcome { model, curve, initial_loss, final_checkpoint })
}

fn append_telemetry(path: &Path, s: &EpochStats) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "epoch,mean_loss,wallclock_s")?;
    }
    writeln!(f, "{},{:.8e},{:.3}", s.epoch, s.mean_loss, s.wallclock_s)?;
    Ok(())
}
