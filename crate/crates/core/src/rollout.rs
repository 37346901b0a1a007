//! Prefix construction, autoregressive unrolling and candidate scoring.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::OfflineDataset;
use crate::error::{Error, Result};
use crate::functions::TaskSpec;
use crate::model::{predict_next, Context, DecodeMode, ModelState, Real};
use crate::seed::{derive_seed, rng_from};
use crate::sortsample::{SortSampleParams, Sampler, Trajectory};

/// How the budget evolves over the generated suffix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RbMode {
    /// Feed the same budget at every step; no oracle calls while generating.
    #[default]
    Fixed,
    /// `R_{t+1} = R_t - (f* - f(x_t))`; stop once the budget is non-positive.
    Update,
    /// As `Update`, but an update that would make the budget negative is skipped.
    UpdateGuarded,
}

impl RbMode {
    pub const ALL: [RbMode; 3] = [RbMode::Fixed, RbMode::Update, RbMode::UpdateGuarded];

    pub fn as_str(self) -> &'static str {
        match self {
            RbMode::Fixed => "fixed",
            RbMode::Update => "update",
            RbMode::UpdateGuarded => "update_guarded",
        }
    }
}

impl fmt::Display for RbMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RbMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RbMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown rb_mode {s:?} (expected fixed, update or update_guarded)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    pub prefix_len: usize,
    pub total_len: usize,
    pub rb_values: Vec<f64>,
    pub rb_mode: RbMode,
    pub query_budget: usize,
    pub decode: DecodeMode,
    pub seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            prefix_len: 32,
            total_len: 64,
            rb_values: vec![0.0, 0.01, 0.05, 0.1],
            rb_mode: RbMode::Fixed,
            query_budget: 128,
            decode: DecodeMode::Greedy,
            seed: 0,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prefix_len == 0 || self.prefix_len >= self.total_len {
            return Err(Error::Config(format!(
                "prefix_len {} must satisfy 1 <= P < T = {}",
                self.prefix_len, self.total_len
            )));
        }
        if self.query_budget == 0 {
            return Err(Error::Config("query_budget must be at least 1".into()));
        }
        if self.rb_values.is_empty() || self.rb_values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("rb_values must be a nonempty list of finite numbers".into()));
        }
        if self.rb_values.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("rb_values must be ascending".into()));
        }
        Ok(())
    }

    pub fn suffix_len(&self) -> usize {
        self.total_len - self.prefix_len
    }
}

/// Ground-truth function with a call counter. Values are raw task units.
pub struct Oracle<'a> {
    task: &'a TaskSpec,
    calls: AtomicUsize,
}

impl<'a> Oracle<'a> {
    pub fn new(task: &'a TaskSpec) -> Self {
        Self { task, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    /// Evaluates an in-domain point.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.task.evaluate(x)
    }
}

/// One Phase-1 trajectory of the configured length, cut to its first `p`
/// steps. Budgets are those of the full trajectory.
pub fn build_prefix(ds: &OfflineDataset, params: &SortSampleParams, f_star: f64, p: usize, seed: u64) -> Result<Trajectory> {
    if p == 0 || p >= params.length {
        return Err(Error::Config(format!("prefix length {p} must satisfy 1 <= P < T = {}", params.length)));
    }
    let sampler = Sampler::new(ds, params, f_star)?;
    let full = sampler.sample(&mut rng_from(seed))?;
    Ok(full.truncated(p))
}

/// Generated suffix for one budget value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Unrolled {
    pub rhat: f64,
    /// Budget fed at each generated step.
    pub budgets: Vec<f64>,
    /// Model outputs before clamping.
    pub raw_points: Vec<Vec<f64>>,
    /// In-domain points that get scored.
    pub points: Vec<Vec<f64>>,
    pub out_of_domain: Vec<bool>,
    /// Raw oracle values; `None` for candidates not scored.
    pub values: Vec<Option<f64>>,
    /// Oracle calls made while generating (update modes only).
    pub generation_calls: usize,
    pub halted: bool,
}

/// Continues `prefix` for up to `steps` points starting from budget `rhat`.
///
/// Update modes call `oracle` after each point and stop early once
/// `max_calls` evaluations have been made. Regret is measured on the
/// dataset's value scale against `f_star`.
#[allow(clippy::too_many_arguments)]
pub fn unroll<F: Real, R: Rng + ?Sized>(
    model: &ModelState<F>,
    ds: &OfflineDataset,
    prefix: &Trajectory,
    rhat: f64,
    steps: usize,
    mode: RbMode,
    oracle: Option<&Oracle>,
    f_star: f64,
    max_calls: usize,
    decode: DecodeMode,
    rng: &mut R,
) -> Result<Unrolled> {
    if steps == 0 {
        return Err(Error::Config("unroll needs at least one step".into()));
    }
    if mode != RbMode::Fixed && oracle.is_none() {
        return Err(Error::Config(format!("rb_mode {mode} needs an oracle")));
    }
    let task = ds.task();
    let mut ctx = Context::default();
    for t in 0..prefix.len() {
        ctx.budgets.push(prefix.budgets[t]);
        ctx.points.push(prefix.point(t).to_vec());
    }
    ctx.budgets.push(rhat);
    let mut out = Unrolled {
        rhat,
        budgets: Vec::with_capacity(steps),
        raw_points: Vec::with_capacity(steps),
        points: Vec::with_capacity(steps),
        out_of_domain: Vec::with_capacity(steps),
        values: Vec::with_capacity(steps),
        generation_calls: 0,
        halted: false,
    };
    let mut r = rhat;
    for step in 0..steps {
        let raw = predict_next(model, &ctx, decode, rng)?;
        let (x, moved) = task.clamp(&raw);
        out.budgets.push(r);
        out.raw_points.push(raw);
        out.out_of_domain.push(moved);
        let mut value = None;
        if let (RbMode::Update | RbMode::UpdateGuarded, Some(o)) = (mode, oracle) {
            let v = o.eval(&x)?;
            out.generation_calls += 1;
            value = Some(v);
            let next = r - (f_star - ds.to_value_scale(v));
            match mode {
                RbMode::UpdateGuarded if next < 0.0 => {}
                _ => r = next,
            }
        }
        out.values.push(value);
        ctx.push(x.clone(), r);
        out.points.push(x);
        let last = step + 1 == steps;
        if !last && mode == RbMode::Update && r <= 0.0 {
            out.halted = true;
            break;
        }
        if !last && mode != RbMode::Fixed && out.generation_calls >= max_calls {
            out.halted = true;
            break;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub task: String,
    pub rb_mode: RbMode,
    pub query_budget: usize,
    pub suffixes: Vec<Unrolled>,
    pub queries_used: usize,
    /// Oracle calls made before the scoring pass; zero in fixed mode.
    pub generation_calls: usize,
    pub best_point: Vec<f64>,
    pub best_value: f64,
    pub median_value: f64,
    pub dataset_best: f64,
}

impl RolloutResult {
    pub fn evaluated_values(&self) -> Vec<f64> {
        self.suffixes.iter().flat_map(|s| s.values.iter().flatten().copied()).collect()
    }
}

/// Median with the midpoint convention for even counts.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Full Phase-3 evaluation: one fresh prefix per budget value, suffixes of
/// length `T - P`, oracle queries spent on lower budgets first.
pub fn evaluate<F: Real>(
    model: &ModelState<F>,
    ds: &OfflineDataset,
    params: &SortSampleParams,
    f_star: f64,
    cfg: &RolloutConfig,
) -> Result<RolloutResult> {
    cfg.validate()?;
    if params.length != cfg.total_len {
        return Err(Error::Config(format!(
            "rollout total_len {} differs from trajectory length {}",
            cfg.total_len, params.length
        )));
    }
    let task = ds.task();
    let oracle = Oracle::new(task);
    let mut suffixes = Vec::with_capacity(cfg.rb_values.len());
    let mut remaining = cfg.query_budget;
    for (i, &rhat) in cfg.rb_values.iter().enumerate() {
        let prefix = build_prefix(ds, params, f_star, cfg.prefix_len, derive_seed(cfg.seed, "prefix", i as u64))?;
        if cfg.rb_mode != RbMode::Fixed && remaining == 0 {
            break;
        }
        let mut rng = rng_from(derive_seed(cfg.seed, "decode", i as u64));
        let s = unroll(
            model,
            ds,
            &prefix,
            rhat,
            cfg.suffix_len(),
            cfg.rb_mode,
            Some(&oracle),
            f_star,
            remaining,
            cfg.decode,
            &mut rng,
        )?;
        remaining -= s.generation_calls;
        suffixes.push(s);
    }
    let generation_calls = oracle.calls();
    if cfg.rb_mode == RbMode::Fixed {
        debug_assert_eq!(generation_calls, 0);
        // Budget values are ascending, so this favours the lowest budgets.
        for s in &mut suffixes {
            for (x, v) in s.points.iter().zip(s.values.iter_mut()) {
                if remaining == 0 {
                    break;
                }
                *v = Some(oracle.eval(x)?);
                remaining -= 1;
            }
        }
    }
    let queries_used = oracle.calls();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for s in &suffixes {
        for (x, v) in s.points.iter().zip(&s.values) {
            if let Some(v) = *v {
                if best.as_ref().map_or(true, |b| v > b.0) {
                    best = Some((v, x.clone()));
                }
            }
        }
    }
    let (best_value, best_point) = best.ok_or_else(|| Error::Degenerate("no candidate was evaluated".into()))?;
    let mut result = RolloutResult {
        task: task.name().to_string(),
        rb_mode: cfg.rb_mode,
        query_budget: cfg.query_budget,
        suffixes,
        queries_used,
        generation_calls,
        best_point,
        best_value,
        median_value: f64::NAN,
        dataset_best: raw_dataset_best(ds),
    };
    result.median_value = median(&result.evaluated_values());
    Ok(result)
}

/// Best dataset value in raw task units.
pub fn raw_dataset_best(ds: &OfflineDataset) -> f64 {
    match ds.normalization() {
        Some(n) => n.invert(ds.best_value()),
        None => ds.best_value(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrbPoint {
    pub r1: f64,
    pub realized_regret: f64,
    pub steps: usize,
}

/// Unrolls from scratch with budget updates for each initial budget and
/// records the regret actually accumulated.
pub fn irb_sweep<F: Real>(
    model: &ModelState<F>,
    ds: &OfflineDataset,
    r1_values: &[f64],
    f_star: f64,
    decode: DecodeMode,
    seed: u64,
) -> Result<Vec<IrbPoint>> {
    let task = ds.task();
    let steps = model.config().max_timestep;
    r1_values
        .iter()
        .enumerate()
        .map(|(i, &r1)| {
            let mut rng = rng_from(derive_seed(seed, "irb", i as u64));
            let oracle = Oracle::new(task);
            let mut ctx = Context::new(r1);
            let mut r = r1;
            let mut regret = 0.0;
            let mut taken = 0;
            for _ in 0..steps {
                let raw = predict_next(model, &ctx, decode, &mut rng)?;
                let (x, _) = task.clamp(&raw);
                let step_regret = f_star - ds.to_value_scale(oracle.eval(&x)?);
                regret += step_regret;
                taken += 1;
                r -= step_regret;
                if r <= 0.0 || taken == steps {
                    break;
                }
                ctx.push(x, r);
            }
            Ok(IrbPoint { r1, realized_regret: regret, steps: taken })
        })
        .collect()
}

/// Best suffix value for each budget, all continuing the same prefix in
/// fixed mode with every suffix point scored.
pub fn rhat_sweep<F: Real>(
    model: &ModelState<F>,
    ds: &OfflineDataset,
    params: &SortSampleParams,
    f_star: f64,
    prefix_len: usize,
    rhat_values: &[f64],
    decode: DecodeMode,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let prefix = build_prefix(ds, params, f_star, prefix_len, derive_seed(seed, "prefix", 0))?;
    let oracle = Oracle::new(ds.task());
    rhat_values
        .iter()
        .enumerate()
        .map(|(i, &rhat)| {
            let mut rng = rng_from(derive_seed(seed, "decode", i as u64));
            let s = unroll(
                model,
                ds,
                &prefix,
                rhat,
                params.length - prefix_len,
                RbMode::Fixed,
                None,
                f_star,
                usize::MAX,
                decode,
                &mut rng,
            )?;
            let best = s
                .points
                .iter()
                .map(|x| oracle.eval(x))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max);
            Ok((rhat, best))
        })
        .collect()
}
