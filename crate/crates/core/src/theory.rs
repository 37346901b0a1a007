//! Monte-Carlo checks of the narrow-high-region propositions.
//!
//! For a function on a box, the ε-high set is `H = {x : f(x) >= y_min +
//! ε (y_max - y_min)}`. If no boundary point is ε-high and the Lipschitz
//! constant is at most `2 (ε Δ + y_min - f_b) / (b_1 - a_1)` (with `f_b` the
//! boundary reference value), then `|H| < |Hᶜ|`. The checker estimates every
//! quantity by sampling; `L̂` is a lower bound on the true constant.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from};

const SHARD: usize = 1 << 16;
const RANGE_GRID: usize = 100_000;
const LIPSCHITZ_PAIRS: usize = 100_000;
const BOUNDARY_SAMPLES: usize = 4096;

pub type Objective<'a> = &'a (dyn Fn(&[f64]) -> f64 + Sync);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsHighReport {
    pub name: String,
    pub epsilon: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub threshold: f64,
    pub lipschitz_estimate: f64,
    /// `f(a)` under the `f(a) <= f(b)` orientation in 1-D; the maximum over
    /// the face `x_1 = a_1` otherwise.
    pub boundary_value: f64,
    /// No sampled boundary point is ε-high.
    pub boundary_not_high: bool,
    pub premise_bound: f64,
    pub premise_holds: bool,
    pub vol_h: f64,
    pub vol_h_se: f64,
    pub vol_hc: f64,
    pub vol_hc_se: f64,
    pub total_volume: f64,
    pub sample_count: usize,
    /// `(vol_hc - vol_h)` in combined standard errors.
    pub separation_sigma: f64,
}

impl EpsHighReport {
    /// `|H| < |Hᶜ|` separated by at least `sigma` combined standard errors.
    pub fn conclusion_holds(&self, sigma: f64) -> bool {
        self.separation_sigma > sigma
    }
}

/// Right-hand side of the Lipschitz premise.
pub fn premise_bound(f_boundary: f64, y_min: f64, y_max: f64, epsilon: f64, interval: f64) -> Result<f64> {
    if !(y_max > y_min) || !(interval > 0.0) {
        return Err(Error::Config("premise bound needs y_max > y_min and a positive interval".into()));
    }
    Ok(2.0 * (epsilon * (y_max - y_min) + y_min - f_boundary) / interval)
}

fn uniform<R: Rng + ?Sized>(bounds: &[(f64, f64)], rng: &mut R) -> Vec<f64> {
    bounds.iter().map(|&(lo, hi)| rng.gen_range(lo..=hi)).collect()
}

fn grid_points(bounds: &[(f64, f64)], per_dim: usize) -> Vec<Vec<f64>> {
    let d = bounds.len();
    let total = per_dim.pow(d as u32);
    (0..total)
        .map(|mut idx| {
            bounds
                .iter()
                .map(|&(lo, hi)| {
                    let i = idx % per_dim;
                    idx /= per_dim;
                    lo + (hi - lo) * i as f64 / (per_dim - 1) as f64
                })
                .collect()
        })
        .collect()
}

/// Estimates the ε-high measure split and the premise for `f` on `bounds`.
pub fn eps_high_measure(
    name: &str,
    f: Objective,
    bounds: &[(f64, f64)],
    epsilon: f64,
    n_samples: usize,
    seed: u64,
) -> Result<EpsHighReport> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Config(format!("epsilon {epsilon} must lie in (0, 1)")));
    }
    if n_samples < 10_000 {
        return Err(Error::Config(format!("n_samples {n_samples} below the 10^4 minimum")));
    }
    if bounds.is_empty() || bounds.iter().any(|&(lo, hi)| !(hi > lo)) {
        return Err(Error::Config("bounds must be a nonempty list of lo < hi".into()));
    }
    let d = bounds.len();
    let total_volume: f64 = bounds.iter().map(|&(lo, hi)| hi - lo).product();

    // Samples, drawn in fixed shards so results do not depend on threads.
    let shards = n_samples.div_ceil(SHARD);
    let values: Vec<f64> = (0..shards)
        .into_par_iter()
        .flat_map_iter(|s| {
            let mut rng = rng_from(derive_seed(seed, "mc", s as u64));
            let n = SHARD.min(n_samples - s * SHARD);
            (0..n).map(move |_| f(&uniform(bounds, &mut rng))).collect::<Vec<_>>()
        })
        .collect();

    let per_dim = ((RANGE_GRID as f64).powf(1.0 / d as f64).floor() as usize).max(2);
    let grid: Vec<f64> = grid_points(bounds, per_dim).par_iter().map(|x| f(x)).collect();
    let (y_min, y_max) = values
        .iter()
        .chain(&grid)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(y_max - y_min > 1e-12 * y_max.abs().max(1.0)) {
        return Err(Error::Degenerate(format!("{name}: function is constant on the domain")));
    }
    let threshold = y_min + epsilon * (y_max - y_min);

    let n = values.len() as f64;
    let p = values.iter().filter(|&&v| v >= threshold).count() as f64 / n;
    let vol_h = p * total_volume;
    let vol_hc = (1.0 - p) * total_volume;
    let se = total_volume * (p * (1.0 - p) / n).sqrt();
    let combined = (2.0 * se * se).sqrt();
    let separation_sigma = if combined > 0.0 {
        (vol_hc - vol_h) / combined
    } else if vol_hc > vol_h {
        f64::INFINITY
    } else {
        f64::NEG_INFINITY
    };

    let lipschitz_estimate = estimate_lipschitz(f, bounds, seed);

    let (a1, b1) = bounds[0];
    let mut rng = rng_from(derive_seed(seed, "boundary", 0));
    let (boundary_value, boundary_not_high) = if d == 1 {
        let (fa, fb) = (f(&[a1]), f(&[b1]));
        (fa.min(fb), fa.max(fb) < threshold)
    } else {
        let mut face_max = f64::NEG_INFINITY;
        let mut any_high = false;
        for i in 0..BOUNDARY_SAMPLES {
            let mut x = uniform(bounds, &mut rng);
            let k = i % d;
            let (lo, hi) = bounds[k];
            x[k] = if (i / d) % 2 == 0 { lo } else { hi };
            let v = f(&x);
            any_high |= v >= threshold;
            if k == 0 && x[0] == a1 {
                face_max = face_max.max(v);
            }
        }
        (face_max, !any_high)
    };
    let premise = premise_bound(boundary_value, y_min, y_max, epsilon, b1 - a1)?;

    Ok(EpsHighReport {
        name: name.to_string(),
        epsilon,
        y_min,
        y_max,
        threshold,
        lipschitz_estimate,
        boundary_value,
        boundary_not_high,
        premise_bound: premise,
        premise_holds: lipschitz_estimate <= premise,
        vol_h,
        vol_h_se: se,
        vol_hc,
        vol_hc_se: se,
        total_volume,
        sample_count: values.len(),
        separation_sigma,
    })
}

/// Largest finite-difference slope: sorted neighbours in 1-D, random pairs
/// at log-uniform separations (1e-4 to 1 of the diagonal) otherwise.
fn estimate_lipschitz(f: Objective, bounds: &[(f64, f64)], seed: u64) -> f64 {
    let d = bounds.len();
    if d == 1 {
        let (lo, hi) = bounds[0];
        let mut rng = rng_from(derive_seed(seed, "lipschitz", 0));
        let mut xs: Vec<f64> = (0..LIPSCHITZ_PAIRS).map(|_| rng.gen_range(lo..=hi)).collect();
        xs.extend([lo, hi]);
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        let ys: Vec<f64> = xs.iter().map(|&x| f(&[x])).collect();
        return xs
            .windows(2)
            .zip(ys.windows(2))
            .map(|(x, y)| (y[1] - y[0]).abs() / (x[1] - x[0]))
            .fold(0.0, f64::max);
    }
    let diag = bounds.iter().map(|&(lo, hi)| (hi - lo).powi(2)).sum::<f64>().sqrt();
    let shards = LIPSCHITZ_PAIRS.div_ceil(SHARD);
    (0..shards)
        .into_par_iter()
        .map(|s| {
            let mut rng = rng_from(derive_seed(seed, "lipschitz", s as u64));
            let n = SHARD.min(LIPSCHITZ_PAIRS - s * SHARD);
            let mut best = 0.0_f64;
            for _ in 0..n {
                let x = uniform(bounds, &mut rng);
                let sep = diag * 10f64.powf(rng.gen_range(-4.0..=0.0));
                let dir: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..=1.0)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    continue;
                }
                let y: Vec<f64> = x
                    .iter()
                    .zip(&dir)
                    .zip(bounds)
                    .map(|((&xi, &di), &(lo, hi))| (xi + sep * di / norm).clamp(lo, hi))
                    .collect();
                let dist = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                if dist > 0.0 {
                    best = best.max((f(&x) - f(&y)).abs() / dist);
                }
            }
            best
        })
        .reduce(|| 0.0, f64::max)
}

/// A named analytic function with its domain and ε.
pub struct Fixture {
    pub name: &'static str,
    pub f: fn(&[f64]) -> f64,
    pub bounds: Vec<(f64, f64)>,
    pub epsilon: f64,
}

/// Functions whose Lipschitz premise holds analytically at the given ε.
///
/// Their maxima sit on the boundary, so the no-high-boundary hypothesis is
/// reported as false; the measure conclusion still holds analytically
/// (`|H|` is `1 - 0.8^(1/p)`, `1 - (2/π) asin 0.8`, and below half for the ramps).
pub fn premise_fixture_family() -> Vec<Fixture> {
    let unit = vec![(0.0, 1.0)];
    let square = vec![(0.0, 1.0), (0.0, 1.0)];
    vec![
        Fixture { name: "power_1", f: |x| x[0], bounds: unit.clone(), epsilon: 0.8 },
        Fixture { name: "power_1.25", f: |x| x[0].powf(1.25), bounds: unit.clone(), epsilon: 0.8 },
        Fixture { name: "power_1.5", f: |x| x[0].powf(1.5), bounds: unit.clone(), epsilon: 0.8 },
        Fixture { name: "half_sine", f: |x| (std::f64::consts::FRAC_PI_2 * x[0]).sin(), bounds: unit, epsilon: 0.8 },
        Fixture { name: "ramp_0.2", f: |x| x[0] + 0.2 * x[1], bounds: square.clone(), epsilon: 0.8 },
        Fixture { name: "ramp_0.1", f: |x| x[0] + 0.1 * x[1], bounds: square, epsilon: 0.8 },
    ]
}

/// Interior-peaked functions whose boundary is not ε-high.
pub fn interior_fixture_family() -> Vec<Fixture> {
    vec![
        Fixture { name: "tent", f: |x| 1.0 - (2.0 * x[0] - 1.0).abs(), bounds: vec![(0.0, 1.0)], epsilon: 0.6 },
        Fixture {
            name: "bump_2d",
            f: |x| (-((x[0] - 0.5).powi(2) + (x[1] - 0.5).powi(2)) / 0.02).exp(),
            bounds: vec![(0.0, 1.0), (0.0, 1.0)],
            epsilon: 0.6,
        },
    ]
}

pub fn check_fixture(fx: &Fixture, n_samples: usize, seed: u64) -> Result<EpsHighReport> {
    eps_high_measure(fx.name, &fx.f, &fx.bounds, fx.epsilon, n_samples, seed)
}
