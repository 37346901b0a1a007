//! Multi-seed experiments: the Branin table, ablation sweeps, plot data.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{gp_ei_run, grad_ascent_baseline, GpConfig, GradAscentConfig};
use crate::dataset::OfflineDataset;
use crate::error::{Error, Result};
use crate::functions::TaskSpec;
use crate::harness::config::RunConfig;
use crate::harness::pipeline::{f_star_used, make_dataset, make_trajs, run, trained_model};
use crate::rollout::{irb_sweep, median, IrbPoint, RbMode};
use crate::seed::SeedStream;
use crate::sortsample::{Strategy, TrajectoryDataset};

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (zero for fewer than two values).
pub fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; NaN when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl SummaryRow {
    pub fn new(method: &str, per_seed: Vec<f64>) -> Self {
        Self { method: method.to_string(), mean: mean(&per_seed), std: std_dev(&per_seed), per_seed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReproduceSummary {
    pub task: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<SummaryRow>,
    /// Seeds on which the sequence model beat the dataset best.
    pub beats_dataset: usize,
}

/// Best value per seed for the sequence model, gradient ascent, and the
/// dataset itself.
pub fn reproduce(base: &RunConfig, seeds: &[u64]) -> Result<ReproduceSummary> {
    let mut seq = Vec::new();
    let mut dataset = Vec::new();
    for &s in seeds {
        let cfg = RunConfig { seed: s, ..base.clone() };
        let out = run(&cfg)?;
        seq.push(out.result.best_value);
        dataset.push(out.result.dataset_best);
    }
    let ascent = seeds
        .par_iter()
        .map(|&s| {
            let cfg = RunConfig { seed: s, ..base.clone() };
            let ds = make_dataset(&cfg)?;
            let r = grad_ascent_baseline(&ds, &GradAscentConfig::default(), SeedStream::new(s).derive("grad_ascent", 0))?;
            Ok(r.best_value)
        })
        .collect::<Result<Vec<_>>>()?;
    let beats_dataset = seq.iter().zip(&dataset).filter(|(b, d)| b > d).count();
    Ok(ReproduceSummary {
        task: base.task.name.clone(),
        seeds: seeds.to_vec(),
        rows: vec![
            SummaryRow::new("sequence_model", seq),
            SummaryRow::new("grad_ascent", ascent),
            SummaryRow::new("dataset_best", dataset),
        ],
        beats_dataset,
    })
}

pub const ABLATIONS: [&str; 11] = [
    "k_tau",
    "nbins",
    "prefix_len",
    "rhat",
    "rb_mode",
    "strategy",
    "query_budget",
    "ymax",
    "dataset_size",
    "noise",
    "model_size",
];

/// Default sweep values for an ablation.
pub fn default_sweep(name: &str, task: &TaskSpec) -> Result<Vec<String>> {
    let v: Vec<String> = match name {
        "k_tau" => vec!["0.03:10".into(), "0.01:50".into()],
        "nbins" => [1, 8, 32, 64].iter().map(|v| v.to_string()).collect(),
        "prefix_len" => [8, 16, 32].iter().map(|v| v.to_string()).collect(),
        "rhat" => ["0", "0.01", "0.1", "1", "10"].iter().map(|v| v.to_string()).collect(),
        "rb_mode" => RbMode::ALL.iter().map(|m| m.to_string()).collect(),
        "strategy" => [Strategy::Random, Strategy::RandomSorted, Strategy::ReweightSorted]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        "query_budget" => [16, 32, 64, 128].iter().map(|v| v.to_string()).collect(),
        "ymax" => [0.0, 0.5, 2.0, 5.0].iter().map(|d| (task.f_star() + d).to_string()).collect(),
        "dataset_size" => ["0.25", "0.5", "1"].iter().map(|v| v.to_string()).collect(),
        "noise" => ["0", "0.01", "0.05", "0.1"].iter().map(|v| v.to_string()).collect(),
        "model_size" => ["32:2", "64:4", "128:8"].iter().map(|v| v.to_string()).collect(),
        other => return Err(unknown_ablation(other)),
    };
    Ok(v)
}

fn unknown_ablation(name: &str) -> Error {
    Error::Config(format!("unknown ablation {name:?} (expected one of {})", ABLATIONS.join(", ")))
}

fn parse<T: std::str::FromStr>(name: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("bad {name} value {value:?}")))
}

fn parse_pair<A: std::str::FromStr, B: std::str::FromStr>(name: &str, value: &str) -> Result<(A, B)> {
    let (a, b) = value.split_once(':').ok_or_else(|| Error::Config(format!("{name} expects a:b, got {value:?}")))?;
    Ok((parse(name, a)?, parse(name, b)?))
}

/// Applies one sweep value to a copy of `base`.
pub fn apply_ablation(base: &RunConfig, name: &str, value: &str) -> Result<RunConfig> {
    let mut c = base.clone();
    match name {
        "k_tau" => (c.sortsample.k_fraction, c.sortsample.tau_percentile) = parse_pair(name, value)?,
        "nbins" => c.sortsample.n_bins = parse(name, value)?,
        "prefix_len" => c.rollout.prefix_len = parse(name, value)?,
        "rhat" => c.rollout.rb_values = vec![parse(name, value)?],
        "rb_mode" => c.rollout.rb_mode = value.parse()?,
        "strategy" => c.sortsample.strategy = value.parse()?,
        "query_budget" => c.rollout.query_budget = parse(name, value)?,
        "ymax" => c.sortsample.f_star = Some(parse(name, value)?),
        "dataset_size" => c.dataset.keep_fraction = parse(name, value)?,
        "noise" => c.dataset.noise = parse(name, value)?,
        "model_size" => (c.model.embed_dim, c.model.n_layers) = parse_pair(name, value)?,
        other => return Err(unknown_ablation(other)),
    }
    c.validate()?;
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: String,
    pub value: String,
    pub seed: u64,
    pub best: f64,
    pub median: f64,
    pub queries_used: usize,
}

/// One row per `(value, seed)` cell, in sweep-major order.
///
/// Cells that share a trained model reuse it through the cache directory.
pub fn ablate(name: &str, base: &RunConfig, values: &[String], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(values.len() * seeds.len());
    for value in values {
        let cfg = apply_ablation(base, name, value)?;
        for &seed in seeds {
            let out = run(&RunConfig { seed, ..cfg.clone() })?;
            rows.push(AblationRow {
                ablation: name.to_string(),
                value: value.clone(),
                seed,
                best: out.result.best_value,
                median: out.result.median_value,
                queries_used: out.result.queries_used,
            });
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("ablation,value,seed,best,median,queries_used\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{},{}", r.ablation, r.value, r.seed, r.best, r.median, r.queries_used).unwrap();
    }
    s
}

/// Mean best per sweep value, in sweep order.
pub fn mean_best_by_value(rows: &[AblationRow]) -> Vec<(String, f64, f64)> {
    let mut order: Vec<String> = Vec::new();
    for r in rows {
        if !order.contains(&r.value) {
            order.push(r.value.clone());
        }
    }
    order
        .into_iter()
        .map(|v| {
            let b: Vec<f64> = rows.iter().filter(|r| r.value == v).map(|r| r.best).collect();
            (v, mean(&b), std_dev(&b))
        })
        .collect()
}

/// Initial budgets for an IRB sweep: `1/n .. 1` of the median trajectory R₁.
pub fn irb_values(trajs: &TrajectoryDataset, n: usize) -> Vec<f64> {
    let r1: Vec<f64> = trajs.trajectories.iter().map(|t| t.budgets[0]).collect();
    let m = median(&r1);
    (1..=n).map(|i| m * i as f64 / n as f64).collect()
}

/// Evaluation budgets for an R̂ sweep, scaled by the median trajectory
/// budget at the first suffix step.
pub fn rhat_values(trajs: &TrajectoryDataset, prefix_len: usize, fractions: &[f64]) -> Vec<f64> {
    let r: Vec<f64> = trajs.trajectories.iter().map(|t| t.budgets[prefix_len]).collect();
    let m = median(&r);
    fractions.iter().map(|f| f * m).collect()
}

pub const RHAT_FRACTIONS: [f64; 6] = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0];

/// Plot-data kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    Hist,
    Irb,
    Gp,
}

impl std::str::FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hist" => Ok(PlotKind::Hist),
            "irb" => Ok(PlotKind::Irb),
            "gp" => Ok(PlotKind::Gp),
            _ => Err(Error::Config(format!("unknown plot kind {s:?} (expected hist, irb or gp)"))),
        }
    }
}

/// Value histograms of the dataset and of all trajectory points on shared
/// bins.
pub fn hist_csv(ds: &OfflineDataset, trajs: &TrajectoryDataset, n_bins: usize) -> String {
    let traj_values: Vec<f64> = trajs.trajectories.iter().flat_map(|t| t.values.iter().copied()).collect();
    let all = ds.values().iter().chain(&traj_values);
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let width = (hi - lo) / n_bins as f64;
    let count = |vals: &[f64]| {
        let mut c = vec![0usize; n_bins];
        for &v in vals {
            let i = if width > 0.0 { (((v - lo) / width) as usize).min(n_bins - 1) } else { 0 };
            c[i] += 1;
        }
        c
    };
    let mut s = String::from("source,bin_lo,bin_hi,count\n");
    for (name, counts) in [("dataset", count(ds.values())), ("trajectories", count(&traj_values))] {
        for (i, c) in counts.iter().enumerate() {
            let a = lo + width * i as f64;
            writeln!(s, "{name},{a},{},{c}", a + width).unwrap();
        }
    }
    s
}

pub fn irb_csv(points: &[IrbPoint]) -> String {
    let mut s = String::from("r1,realized_regret,steps\n");
    for p in points {
        writeln!(s, "{},{},{}", p.r1, p.realized_regret, p.steps).unwrap();
    }
    s
}

/// GP-EI runs behind the monotone-proposal observation.
pub const GP_TASKS: [&str; 3] = ["branin", "goldstein_price_neg", "sixhump_neg"];
pub const GP_INIT: usize = 5;
pub const GP_ITERS: usize = 40;
pub const GP_CANDIDATES: usize = 1024;

/// Writes the CSV files for `kind` under `dir` and returns their paths.
pub fn emit_plotdata(cfg: &RunConfig, kind: PlotKind, dir: &Path, runs: usize) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    match kind {
        PlotKind::Hist => {
            let ds = make_dataset(cfg)?;
            let trajs = make_trajs(cfg, &ds)?;
            let p = dir.join("hist.csv");
            fs::write(&p, hist_csv(&ds, &trajs, cfg.sortsample.n_bins))?;
            written.push(p);
        }
        PlotKind::Irb => {
            let ds = make_dataset(cfg)?;
            let trajs = make_trajs(cfg, &ds)?;
            let model = trained_model(cfg, &trajs, None)?.model;
            let pts = irb_sweep(
                &model,
                &ds,
                &irb_values(&trajs, 10),
                f_star_used(cfg, &ds),
                cfg.rollout.decode,
                SeedStream::new(cfg.seed).derive("irb", 0),
            )?;
            let p = dir.join("irb.csv");
            fs::write(&p, irb_csv(&pts))?;
            written.push(p);
        }
        PlotKind::Gp => {
            for name in GP_TASKS {
                let task = TaskSpec::by_name(name)?;
                for r in 0..runs {
                    let seed = SeedStream::new(cfg.seed).derive("gp", r as u64);
                    let run = gp_ei_run(&task, GP_INIT, GP_ITERS, GP_CANDIDATES, &GpConfig::default(), seed)?;
                    let p = dir.join(format!("gp_{name}_{r}.csv"));
                    let mut buf = Vec::new();
                    run.write_csv(&mut buf)?;
                    fs::write(&p, buf)?;
                    written.push(p);
                }
            }
        }
    }
    Ok(written)
}
