//! Autoregressive next-point prediction.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};
use serde::{Deserialize, Serialize};

use super::transformer::group_softmax;
use super::{Batch, HeadKind, ModelState, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DecodeMode {
    #[default]
    Greedy,
    Sample { temperature: f64 },
}

/// A partial trajectory `R_1, x_1, ..., R_t` in task units.
///
/// `budgets` has one more entry than `points`. Discrete points hold symbol
/// indices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Context {
    pub budgets: Vec<f64>,
    pub points: Vec<Vec<f64>>,
}

impl Context {
    pub fn new(first_budget: f64) -> Self {
        Self { budgets: vec![first_budget], points: Vec::new() }
    }

    /// Current timestep count `t`.
    pub fn len(&self) -> usize {
        self.budgets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.budgets.is_empty()
    }

    /// Appends `x_t` and the next budget `R_{t+1}`.
    pub fn push(&mut self, point: Vec<f64>, next_budget: f64) {
        self.points.push(point);
        self.budgets.push(next_budget);
    }

    /// Builds the network batch over the last `C` timesteps.
    pub(crate) fn to_batch<F: Real>(&self, model: &ModelState<F>) -> Result<Batch<F>> {
        let cfg = model.config();
        let t = self.budgets.len();
        if t == 0 || self.points.len() + 1 != t {
            return Err(Error::Config("context needs one more budget than points".into()));
        }
        if t > cfg.max_timestep {
            return Err(Error::Context { len: t, max: cfg.max_timestep });
        }
        let start = t.saturating_sub(cfg.context_len);
        let steps = t - start;
        let sc = &cfg.scaling;
        let width = cfg.head.input_width();
        let mut points = Array2::zeros((steps, width));
        for (row, x) in self.points[start..].iter().enumerate() {
            encode_point(&cfg.head, sc, x, points.row_mut(row).as_slice_mut().unwrap())?;
        }
        Ok(Batch {
            windows: 1,
            steps,
            budgets: self.budgets[start..].iter().map(|&r| F::of(sc.encode_budget(r))).collect(),
            points,
            timesteps: (start..t).collect(),
        })
    }
}

/// Writes one point-token input row.
pub(crate) fn encode_point<F: Real>(head: &HeadKind, sc: &super::InputScaling, x: &[f64], out: &mut [F]) -> Result<()> {
    if x.len() != head.dim() {
        return Err(Error::Domain(format!("point has {} coordinates, expected {}", x.len(), head.dim())));
    }
    match *head {
        HeadKind::Continuous { .. } => {
            for (k, (&v, o)) in x.iter().zip(out.iter_mut()).enumerate() {
                *o = F::of(sc.encode_coord(k, v));
            }
        }
        HeadKind::Discrete { vocab, .. } => {
            out.iter_mut().for_each(|o| *o = F::zero());
            for (k, &v) in x.iter().enumerate() {
                let s = v as usize;
                if v < 0.0 || v.fract() != 0.0 || s >= vocab {
                    return Err(Error::Domain(format!("symbol {v} outside vocabulary {vocab}")));
                }
                out[k * vocab + s] = F::one();
            }
        }
    }
    Ok(())
}

/// Predicts `x_t` for the last budget in `ctx`, in task units.
pub fn predict_next<F: Real, R: Rng + ?Sized>(
    model: &ModelState<F>,
    ctx: &Context,
    mode: DecodeMode,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let batch = ctx.to_batch(model)?;
    let out = model.forward(&batch)?.predictions;
    let last: Vec<f64> = out.row(out.nrows() - 1).iter().map(|v| v.as_f64()).collect();
    let cfg = model.config();
    let temperature = match mode {
        DecodeMode::Greedy => 0.0,
        DecodeMode::Sample { temperature } if temperature >= 0.0 => temperature,
        DecodeMode::Sample { temperature } => {
            return Err(Error::Config(format!("temperature {temperature} must be nonnegative")))
        }
    };
    match cfg.head {
        HeadKind::Continuous { .. } => {
            let std = cfg.head_variance.sqrt() * temperature;
            Ok(last
                .iter()
                .enumerate()
                .map(|(k, &m)| {
                    let noise: f64 = if std > 0.0 { StandardNormal.sample(rng) } else { 0.0 };
                    cfg.scaling.decode_coord(k, m + std * noise)
                })
                .collect())
        }
        HeadKind::Discrete { vocab, .. } => Ok(last
            .chunks(vocab)
            .map(|logits| {
                if temperature == 0.0 {
                    argmax(logits) as f64
                } else {
                    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
                    let probs = group_softmax(&scaled, vocab);
                    match WeightedIndex::new(&probs) {
                        Ok(dist) => dist.sample(rng) as f64,
                        Err(_) => argmax(logits) as f64,
                    }
                }
            })
            .collect()),
    }
}

/// First index of the maximum.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
