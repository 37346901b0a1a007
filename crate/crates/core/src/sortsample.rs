//! Trajectory synthesis from an offline dataset.
//!
//! Values are split into equal-width bins, each bin is scored by size and
//! closeness to the best value, a trajectory draws a score-proportional number
//! of points from every bin, the draw is sorted ascending, and every step is
//! annotated with the regret budget still to be spent from that step on.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{fmt_f64, parse_f64, OfflineDataset};
use crate::error::{Error, Result};
use crate::functions::{TaskKind, TaskSpec};
use crate::seed::{derive_seed, rng_from};

pub const TRAJ_FORMAT_VERSION: u32 = 1;
/// Floor applied to `K` and `tau` so the score stays finite.
pub const MIN_SMOOTHING: f64 = 1e-8;

/// Equal-width partition of the dataset's value range.
#[derive(Clone, Debug, PartialEq)]
pub struct BinPartition {
    edges: Vec<f64>,
    members: Vec<Vec<usize>>,
    y_best: f64,
    degenerate: bool,
}

impl BinPartition {
    pub fn n_bins(&self) -> usize {
        self.members.len()
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn members(&self) -> &[Vec<usize>] {
        &self.members
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    pub fn midpoints(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    /// Best dataset value.
    pub fn y_best(&self) -> f64 {
        self.y_best
    }

    /// True when every value was identical and all points share bin 1.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// Bin index of a value (bins are `(lo, hi]`, the first is closed below).
    pub fn bin_of(&self, y: f64) -> usize {
        if self.degenerate {
            return 0;
        }
        let j = self.edges.partition_point(|&e| e < y);
        j.saturating_sub(1).min(self.n_bins() - 1)
    }
}

/// Splits the value range into `n_bins` equal-width bins.
pub fn partition_bins(values: &[f64], n_bins: usize) -> Result<BinPartition> {
    if n_bins == 0 {
        return Err(Error::Config("n_bins must be at least 1".into()));
    }
    if values.is_empty() {
        return Err(Error::Config("cannot bin an empty dataset".into()));
    }
    let y_min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let y_max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = y_max - y_min;
    let degenerate = !(width > 0.0);
    let edges: Vec<f64> = (0..=n_bins)
        .map(|i| {
            if i == n_bins {
                y_max
            } else {
                y_min + width * (i as f64) / (n_bins as f64)
            }
        })
        .collect();
    let mut partition = BinPartition {
        edges,
        members: vec![Vec::new(); n_bins],
        y_best: y_max,
        degenerate,
    };
    for (i, &y) in values.iter().enumerate() {
        let b = partition.bin_of(y);
        partition.members[b].push(i);
    }
    Ok(partition)
}

/// Bin scores `|B| / (|B| + K) * exp(-|y_best - mid| / tau)`; empty bins score 0.
pub fn bin_scores(partition: &BinPartition, k: f64, tau: f64) -> Vec<f64> {
    let k = k.max(MIN_SMOOTHING);
    let tau = tau.max(MIN_SMOOTHING);
    partition
        .members
        .iter()
        .zip(partition.midpoints())
        .map(|(m, mid)| {
            if m.is_empty() {
                0.0
            } else {
                let size = m.len() as f64;
                size / (size + k) * (-(partition.y_best - mid).abs() / tau).exp()
            }
        })
        .collect()
}

/// `K = 0.03 N` and `tau` = the 10th percentile of the regrets `f_star - y`,
/// both floored at [`MIN_SMOOTHING`].
pub fn default_hyperparams(values: &[f64], f_star: f64) -> (f64, f64) {
    hyperparams_from_fractions(values, f_star, 0.03, 10.0)
}

/// `K = k_fraction * N`, `tau` = the given percentile of regrets.
pub fn hyperparams_from_fractions(values: &[f64], f_star: f64, k_fraction: f64, tau_percentile: f64) -> (f64, f64) {
    let k = (k_fraction * values.len() as f64).max(MIN_SMOOTHING);
    let regrets: Vec<f64> = values.iter().map(|&y| f_star - y).collect();
    let tau = percentile(&regrets, tau_percentile).max(MIN_SMOOTHING);
    (k, tau)
}

/// Linear-interpolation percentile (`p` in `[0, 100]`).
pub fn percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty slice");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (p / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Converts scores to per-bin counts summing to `t`: every bin above the
/// first gets `floor(t * s_i / sum(s))`, bin 1 takes the remainder.
pub fn allocate_counts(scores: &[f64], t: usize) -> Result<Vec<usize>> {
    if t == 0 {
        return Err(Error::Allocation("trajectory length must be at least 1".into()));
    }
    let total: f64 = scores.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Allocation(format!("bin scores sum to {total}")));
    }
    let mut counts: Vec<usize> = scores
        .iter()
        .map(|&s| ((t as f64) * s.max(0.0) / total).floor() as usize)
        .collect();
    let rest: usize = counts[1..].iter().sum();
    counts[0] = t - rest;
    Ok(counts)
}

/// How a trajectory's points are drawn and ordered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Uniform draw, draw order kept.
    Random,
    /// Uniform draw, sorted ascending.
    RandomSorted,
    /// Score-weighted per-bin draw, bins concatenated low to high.
    ReweightPartial,
    /// Score-weighted per-bin draw, fully sorted ascending.
    ReweightSorted,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Random,
        Strategy::RandomSorted,
        Strategy::ReweightPartial,
        Strategy::ReweightSorted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::RandomSorted => "random_sorted",
            Strategy::ReweightPartial => "reweight_partial",
            Strategy::ReweightSorted => "reweight_sorted",
        }
    }

    pub fn is_reweighted(self) -> bool {
        matches!(self, Strategy::ReweightPartial | Strategy::ReweightSorted)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy '{s}'")))
    }
}

/// One synthetic optimizer run: points, their values, and regret budgets.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub points: Array2<f64>,
    pub values: Vec<f64>,
    pub budgets: Vec<f64>,
    pub f_star_used: f64,
    /// Some bin had fewer points than requested and was drawn with replacement.
    pub fallback: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn point(&self, t: usize) -> &[f64] {
        self.points.row(t).to_slice().expect("standard layout")
    }

    /// Keeps the first `p` steps; budgets are not recomputed.
    pub fn truncated(&self, p: usize) -> Trajectory {
        let p = p.min(self.len());
        Trajectory {
            points: self.points.slice(ndarray::s![..p, ..]).to_owned(),
            values: self.values[..p].to_vec(),
            budgets: self.budgets[..p].to_vec(),
            f_star_used: self.f_star_used,
            fallback: self.fallback,
        }
    }
}

/// Regret budgets `R_t = sum_{j >= t} (f_star - v_j)`.
pub fn augment_rb(values: &[f64], f_star: f64) -> Result<Vec<f64>> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if f_star < max - 1e-9 {
        return Err(Error::Config(format!("f_star {f_star} below trajectory maximum {max}")));
    }
    let mut budgets = vec![0.0; values.len()];
    let mut acc = 0.0;
    for (t, &v) in values.iter().enumerate().rev() {
        acc += f_star - v;
        budgets[t] = acc;
    }
    Ok(budgets)
}

/// Per-dataset state shared by all trajectories of one build.
#[derive(Clone, Debug)]
pub struct Sampler<'a> {
    ds: &'a OfflineDataset,
    partition: BinPartition,
    counts: Vec<usize>,
    strategy: Strategy,
    length: usize,
    f_star: f64,
}

impl<'a> Sampler<'a> {
    pub fn new(ds: &'a OfflineDataset, params: &SortSampleParams, f_star: f64) -> Result<Self> {
        if params.length == 0 {
            return Err(Error::Config("trajectory length must be at least 1".into()));
        }
        let partition = partition_bins(ds.values(), params.n_bins)?;
        let scores = bin_scores(&partition, params.k, params.tau);
        let counts = allocate_counts(&scores, params.length)?;
        Ok(Self { ds, partition, counts, strategy: params.strategy, length: params.length, f_star })
    }

    pub fn partition(&self) -> &BinPartition {
        &self.partition
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Trajectory> {
        sample_trajectory(self.ds, &self.partition, &self.counts, self.strategy, self.f_star, rng)
    }

    pub fn length(&self) -> usize {
        self.length
    }
}

/// Draws `n` distinct elements of `pool` in draw order; any shortfall is
/// drawn with replacement. Returns whether that happened.
fn draw<R: Rng + ?Sized>(pool: &[usize], n: usize, rng: &mut R, out: &mut Vec<usize>) -> bool {
    let distinct = n.min(pool.len());
    out.extend(sample(rng, pool.len(), distinct).into_iter().map(|i| pool[i]));
    let deficit = n - distinct;
    for _ in 0..deficit {
        out.push(pool[rng.gen_range(0..pool.len())]);
    }
    deficit > 0
}

/// Builds one trajectory according to `strategy`.
pub fn sample_trajectory<R: Rng + ?Sized>(
    ds: &OfflineDataset,
    partition: &BinPartition,
    counts: &[usize],
    strategy: Strategy,
    f_star: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    let t: usize = counts.iter().sum();
    let mut idx = Vec::with_capacity(t);
    let mut fallback = false;
    if strategy.is_reweighted() {
        for (members, &n) in partition.members().iter().zip(counts) {
            if n == 0 {
                continue;
            }
            if members.is_empty() {
                return Err(Error::Allocation("positive count assigned to an empty bin".into()));
            }
            fallback |= draw(members, n, rng, &mut idx);
        }
    } else {
        let all: Vec<usize> = (0..ds.len()).collect();
        fallback |= draw(&all, t, rng, &mut idx);
    }
    let values = ds.values();
    if matches!(strategy, Strategy::RandomSorted | Strategy::ReweightSorted) {
        // Stable: ties keep draw order.
        idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    }
    let d = ds.dim();
    let mut points = Array2::zeros((t, d));
    let mut vals = Vec::with_capacity(t);
    for (r, &i) in idx.iter().enumerate() {
        points.row_mut(r).assign(&ds.points().row(i));
        vals.push(values[i]);
    }
    let budgets = augment_rb(&vals, f_star)?;
    Ok(Trajectory { points, values: vals, budgets, f_star_used: f_star, fallback })
}

/// Phase-1 hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SortSampleParams {
    pub k: f64,
    pub tau: f64,
    pub n_bins: usize,
    pub length: usize,
    pub strategy: Strategy,
    pub seed: u64,
}

/// A set of trajectories built from one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    pub task: TaskSpec,
    pub trajectories: Vec<Trajectory>,
    pub params: SortSampleParams,
    pub f_star_used: f64,
}

impl TrajectoryDataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn length(&self) -> usize {
        self.params.length
    }

    pub fn any_fallback(&self) -> bool {
        self.trajectories.iter().any(|t| t.fallback)
    }
}

/// Builds `num_trajs` trajectories. Trajectory `i` uses a sub-seed derived
/// from `(seed, i)`, so the result does not depend on the thread count.
pub fn build_traj_dataset(
    ds: &OfflineDataset,
    num_trajs: usize,
    params: &SortSampleParams,
    f_star: f64,
) -> Result<TrajectoryDataset> {
    let sampler = Sampler::new(ds, params, f_star)?;
    let trajectories = (0..num_trajs)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_from(derive_seed(params.seed, "trajectory", i as u64));
            sampler.sample(&mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryDataset { task: ds.task().clone(), trajectories, params: params.clone(), f_star_used: f_star })
}

pub fn traj_dataset_to_string(td: &TrajectoryDataset) -> String {
    let p = &td.params;
    let mut out = format!(
        "v{TRAJ_FORMAT_VERSION};{};{};{};{};{};{};{};{};{}\n",
        td.task.name(),
        p.length,
        td.len(),
        p.strategy,
        fmt_f64(p.k),
        fmt_f64(p.tau),
        p.n_bins,
        fmt_f64(td.f_star_used),
        p.seed
    );
    let discrete = td.task.kind() == TaskKind::Discrete;
    for tr in &td.trajectories {
        for t in 0..tr.len() {
            out.push_str(&fmt_f64(tr.budgets[t]));
            for &v in tr.point(t) {
                if discrete {
                    write!(out, ",{}", v as u64).unwrap();
                } else {
                    write!(out, ",{}", fmt_f64(v)).unwrap();
                }
            }
            write!(out, ",{}\n", fmt_f64(tr.values[t])).unwrap();
        }
    }
    out
}

pub fn save_traj_dataset(td: &TrajectoryDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, traj_dataset_to_string(td))?;
    Ok(())
}

pub fn load_traj_dataset(path: impl AsRef<Path>) -> Result<TrajectoryDataset> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    traj_dataset_from_str(&fs::read_to_string(path)?)
}

pub fn traj_dataset_from_str(text: &str) -> Result<TrajectoryDataset> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty trajectory file".into()))?;
    let fields: Vec<&str> = header.trim_end().split(';').collect();
    if fields.len() != 10 {
        return Err(Error::Format(format!("bad trajectory header '{header}'")));
    }
    if fields[0] != format!("v{TRAJ_FORMAT_VERSION}") {
        return Err(Error::Format(format!("unsupported trajectory version '{}'", fields[0])));
    }
    let bad = |what: &str| Error::Format(format!("bad {what} in trajectory header"));
    let task = TaskSpec::by_name(fields[1])?;
    let length: usize = fields[2].parse().map_err(|_| bad("T"))?;
    let num_trajs: usize = fields[3].parse().map_err(|_| bad("num_trajs"))?;
    let strategy: Strategy = fields[4].parse()?;
    let k = parse_f64(fields[5], "K")?;
    let tau = parse_f64(fields[6], "tau")?;
    let n_bins: usize = fields[7].parse().map_err(|_| bad("nbins"))?;
    let f_star = parse_f64(fields[8], "fstar")?;
    let seed: u64 = fields[9].parse().map_err(|_| bad("seed"))?;
    let d = task.dim();
    let mut trajectories = Vec::with_capacity(num_trajs);
    for j in 0..num_trajs {
        let mut points = Array2::zeros((length, d));
        let mut values = Vec::with_capacity(length);
        let mut budgets = Vec::with_capacity(length);
        for t in 0..length {
            let line = lines.next().ok_or_else(|| {
                Error::Format(format!("truncated at trajectory {j}, step {t}"))
            })?;
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != d + 2 {
                return Err(Error::Format(format!("row has {} fields, expected {}", cols.len(), d + 2)));
            }
            budgets.push(parse_f64(cols[0], "budget")?);
            for k in 0..d {
                points[[t, k]] = parse_f64(cols[1 + k], "coordinate")?;
            }
            values.push(parse_f64(cols[d + 1], "value")?);
        }
        trajectories.push(Trajectory { points, values, budgets, f_star_used: f_star, fallback: false });
    }
    Ok(TrajectoryDataset {
        task,
        trajectories,
        params: SortSampleParams { k, tau, n_bins, length, strategy, seed },
        f_star_used: f_star,
    })
}
