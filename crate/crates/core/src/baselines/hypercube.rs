//! Uniform search in a small box around the dataset incumbent.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::OfflineDataset;
use crate::error::{Error, Result};
use crate::functions::TaskKind;
use crate::rollout::Oracle;
use crate::seed::rng_from;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypercubeResult {
    pub width: f64,
    pub points: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub best_value: f64,
}

/// `q` uniform samples from the intersection of the domain with the cube of
/// half-width `width * (hi - lo)` per dimension centred on the best dataset
/// point, each scored by the oracle.
pub fn random_hypercube_baseline(ds: &OfflineDataset, width: f64, q: usize, seed: u64) -> Result<HypercubeResult> {
    if !(width >= 0.0) || q == 0 {
        return Err(Error::Config("hypercube needs width >= 0 and q >= 1".into()));
    }
    let task = ds.task();
    if task.kind() != TaskKind::Continuous {
        return Err(Error::Config("hypercube baseline needs a continuous task".into()));
    }
    let center = ds.point(ds.best().0).to_vec();
    let boxes: Vec<(f64, f64)> = task
        .bounds()
        .iter()
        .zip(&center)
        .map(|(&(lo, hi), &c)| {
            let h = width * (hi - lo);
            ((c - h).max(lo), (c + h).min(hi))
        })
        .collect();
    let oracle = Oracle::new(task);
    let mut rng = rng_from(seed);
    let mut points = Vec::with_capacity(q);
    let mut values = Vec::with_capacity(q);
    for _ in 0..q {
        let x: Vec<f64> = boxes.iter().map(|&(lo, hi)| if hi > lo { rng.gen_range(lo..=hi) } else { lo }).collect();
        values.push(oracle.eval(&x)?);
        points.push(x);
    }
    let best_value = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(HypercubeResult { width, points, values, best_value })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_offline;
    use crate::functions::TaskSpec;
    use crate::rollout::raw_dataset_best;

    #[test]
    fn zero_width_repeats_incumbent() {
        let ds = generate_offline(&TaskSpec::branin(), 500, 0.1, 1).unwrap();
        let r = random_hypercube_baseline(&ds, 0.0, 8, 0).unwrap();
        assert!(r.points.iter().all(|p| p == ds.point(ds.best().0)));
        assert_eq!(r.best_value, raw_dataset_best(&ds));
    }

    #[test]
    fn full_width_covers_domain() {
        let ds = generate_offline(&TaskSpec::branin(), 500, 0.1, 1).unwrap();
        let r = random_hypercube_baseline(&ds, 1.0, 4000, 2).unwrap();
        assert!(r.points.iter().all(|p| ds.task().contains(p)));
        for k in 0..2 {
            let (lo, hi) = ds.task().bounds()[k];
            let min = r.points.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
            let max = r.points.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
            assert!(min < lo + 0.05 * (hi - lo) && max > hi - 0.05 * (hi - lo));
        }
    }

    #[test]
    fn narrow_box_stays_near_incumbent() {
        let ds = generate_offline(&TaskSpec::branin(), 5000, 0.1, 3).unwrap();
        let best = raw_dataset_best(&ds);
        let r = random_hypercube_baseline(&ds, 0.01, 256, 4).unwrap();
        // Dense grid over the same box: the best sample cannot beat its
        // maximum by more than the grid spacing allows.
        let c = ds.point(ds.best().0);
        let mut grid_max = f64::NEG_INFINITY;
        for i in 0..=50 {
            for j in 0..=50 {
                let x = [
                    (c[0] - 0.15 + 0.3 * i as f64 / 50.0).clamp(-5.0, 10.0),
                    (c[1] - 0.15 + 0.3 * j as f64 / 50.0).clamp(0.0, 15.0),
                ];
                grid_max = grid_max.max(ds.task().evaluate(&x).unwrap());
            }
        }
        assert!(r.best_value <= grid_max + 0.05);
        assert!(grid_max >= best);
        assert!(r.best_value >= best - 0.5 && r.best_value <= ds.task().f_star());
    }
}
