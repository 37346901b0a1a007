//! Black-box objectives, their domains, and known optima.
//!
//! Everything here is maximized. Classical minimization benchmarks are
//! registered already negated, so `f_star` is always the largest attainable
//! value.

use std::f64::consts::PI;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from;

/// Global maximum of the Branin task in its maximization form.
pub const BRANIN_MAX: f64 = -0.397_887_357_729_738_2;
/// Global maximum of the negated six-hump camel function.
pub const SIXHUMP_NEG_MAX: f64 = 1.031_628_453_489_877;
/// Global maximum of the negated Goldstein-Price function.
pub const GOLDSTEIN_PRICE_NEG_MAX: f64 = -3.0;
/// Pairwise bonus of the hidden-pattern task.
pub const HIDDEN_PATTERN_BONUS: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Continuous,
    Discrete,
}

impl TaskKind {
    pub fn code(self) -> char {
        match self {
            TaskKind::Continuous => 'c',
            TaskKind::Discrete => 'd',
        }
    }
}

/// Search space of a task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Domain {
    /// Axis-aligned box, one closed interval per dimension.
    Box(Vec<(f64, f64)>),
    /// Fixed-length sequences over `vocab` symbols.
    Symbols { dim: usize, vocab: usize },
}

#[derive(Clone, Debug, PartialEq)]
enum Objective {
    Branin,
    GoldsteinPriceNeg,
    SixHumpNeg,
    HiddenPattern { pattern: Vec<usize> },
}

/// A registered black-box task: objective, domain, and optimum.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    name: String,
    domain: Domain,
    f_star: f64,
    objective: Objective,
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

impl TaskSpec {
    pub fn branin() -> Self {
        Self {
            name: "branin".into(),
            domain: Domain::Box(vec![(-5.0, 10.0), (0.0, 15.0)]),
            f_star: BRANIN_MAX,
            objective: Objective::Branin,
        }
    }

    pub fn goldstein_price_neg() -> Self {
        Self {
            name: "goldstein_price_neg".into(),
            domain: Domain::Box(vec![(-2.0, 2.0), (-2.0, 2.0)]),
            f_star: GOLDSTEIN_PRICE_NEG_MAX,
            objective: Objective::GoldsteinPriceNeg,
        }
    }

    pub fn sixhump_neg() -> Self {
        Self {
            name: "sixhump_neg".into(),
            domain: Domain::Box(vec![(-3.0, 3.0), (-2.0, 2.0)]),
            f_star: SIXHUMP_NEG_MAX,
            objective: Objective::SixHumpNeg,
        }
    }

    /// Hidden-pattern task over `vocab` symbols of length `dim`. The pattern
    /// is a fixed function of `(dim, vocab)`.
    pub fn hidden_pattern(dim: usize, vocab: usize) -> Result<Self> {
        if dim == 0 || vocab < 2 {
            return Err(Error::Config(format!(
                "hidden pattern needs dim >= 1 and vocab >= 2, got dim={dim} vocab={vocab}"
            )));
        }
        let mut rng = rng_from(0x5eed_0000 ^ ((dim as u64) << 16) ^ vocab as u64);
        let pattern = (0..dim).map(|_| rng.gen_range(0..vocab)).collect();
        let name = if (dim, vocab) == (8, 4) {
            "hidden_pattern".to_string()
        } else {
            format!("hidden_pattern_d{dim}_v{vocab}")
        };
        Ok(Self {
            name,
            domain: Domain::Symbols { dim, vocab },
            f_star: dim as f64 + HIDDEN_PATTERN_BONUS * (dim as f64 - 1.0),
            objective: Objective::HiddenPattern { pattern },
        })
    }

    /// Looks a task up in the registry.
    ///
    /// Accepted names: `branin`, `goldstein_price_neg`, `sixhump_neg`,
    /// `hidden_pattern` (d=8, V=4) and `hidden_pattern_d<d>_v<V>`.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "branin" => Ok(Self::branin()),
            "goldstein_price_neg" => Ok(Self::goldstein_price_neg()),
            "sixhump_neg" => Ok(Self::sixhump_neg()),
            "hidden_pattern" => Self::hidden_pattern(8, 4),
            other => {
                if let Some(rest) = other.strip_prefix("hidden_pattern_d") {
                    if let Some((d, v)) = rest.split_once("_v") {
                        if let (Ok(d), Ok(v)) = (d.parse(), v.parse()) {
                            return Self::hidden_pattern(d, v);
                        }
                    }
                }
                Err(Error::Config(format!("unknown task '{other}'")))
            }
        }
    }

    /// Names of the fixed registry entries.
    pub fn registered_names() -> &'static [&'static str] {
        &["branin", "goldstein_price_neg", "sixhump_neg", "hidden_pattern"]
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn kind(&self) -> TaskKind {
        match self.domain {
            Domain::Box(_) => TaskKind::Continuous,
            Domain::Symbols { .. } => TaskKind::Discrete,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.domain {
            Domain::Box(b) => b.len(),
            Domain::Symbols { dim, .. } => *dim,
        }
    }

    /// Vocabulary size for discrete tasks.
    pub fn vocab(&self) -> Option<usize> {
        match self.domain {
            Domain::Symbols { vocab, .. } => Some(vocab),
            Domain::Box(_) => None,
        }
    }

    /// Per-dimension bounds. Discrete tasks report `[0, V-1]`.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        match &self.domain {
            Domain::Box(b) => b.clone(),
            Domain::Symbols { dim, vocab } => vec![(0.0, (*vocab - 1) as f64); *dim],
        }
    }

    /// Known maximum value of the objective.
    pub fn f_star(&self) -> f64 {
        self.f_star
    }

    /// The hidden optimum of the discrete task.
    pub fn hidden_pattern_optimum(&self) -> Option<&[usize]> {
        match &self.objective {
            Objective::HiddenPattern { pattern } => Some(pattern),
            _ => None,
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.check(x).is_ok()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Domain(format!(
                "{}: expected {} coordinates, got {}",
                self.name,
                self.dim(),
                x.len()
            )));
        }
        match &self.domain {
            Domain::Box(bounds) => {
                for (k, (&v, &(lo, hi))) in x.iter().zip(bounds).enumerate() {
                    if !(lo..=hi).contains(&v) {
                        return Err(Error::Domain(format!(
                            "{}: coordinate {k} = {v} outside [{lo}, {hi}]",
                            self.name
                        )));
                    }
                }
            }
            Domain::Symbols { vocab, .. } => {
                for (k, &v) in x.iter().enumerate() {
                    if v.fract() != 0.0 || v < 0.0 || v >= *vocab as f64 {
                        return Err(Error::Domain(format!(
                            "{}: symbol {k} = {v} not in vocabulary [0, {vocab})",
                            self.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Oracle evaluation.
    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        Ok(match &self.objective {
            Objective::Branin => branin(x[0], x[1]),
            Objective::GoldsteinPriceNeg => -goldstein_price(x[0], x[1]),
            Objective::SixHumpNeg => -six_hump_camel(x[0], x[1]),
            Objective::HiddenPattern { pattern } => hidden_pattern_score(x, pattern),
        })
    }

    /// Projects a point onto the domain. Returns the projected point and
    /// whether anything moved. Discrete coordinates are rounded.
    pub fn clamp(&self, x: &[f64]) -> (Vec<f64>, bool) {
        let out: Vec<f64> = match &self.domain {
            Domain::Box(bounds) => x
                .iter()
                .zip(bounds)
                .map(|(&v, &(lo, hi))| if v.is_nan() { lo } else { v.clamp(lo, hi) })
                .collect(),
            Domain::Symbols { vocab, .. } => x
                .iter()
                .map(|&v| if v.is_nan() { 0.0 } else { v.round().clamp(0.0, (*vocab - 1) as f64) })
                .collect(),
        };
        let moved = out.iter().zip(x).any(|(a, b)| a.to_bits() != b.to_bits());
        (out, moved)
    }

    /// Uniform sample from the domain.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match &self.domain {
            Domain::Box(bounds) => bounds.iter().map(|&(lo, hi)| rng.gen_range(lo..=hi)).collect(),
            Domain::Symbols { dim, vocab } => {
                (0..*dim).map(|_| rng.gen_range(0..*vocab) as f64).collect()
            }
        }
    }
}

/// Known optimum value of a task.
pub fn task_optimum(task: &TaskSpec) -> f64 {
    task.f_star()
}

/// Branin in maximization form: `a(x2 - b x1^2 + c x1 - r)^2 + s(1-t)cos(x1) + s`
/// with `a=-1, b=5.1/(4 pi^2), c=5/pi, r=6, s=-10, t=1/(8 pi)`. The three
/// optima reach `BRANIN_MAX`.
pub fn branin(x1: f64, x2: f64) -> f64 {
    let a = -1.0;
    let b = 5.1 / (4.0 * PI * PI);
    let c = 5.0 / PI;
    let r = 6.0;
    let s = -10.0;
    let t = 1.0 / (8.0 * PI);
    a * (x2 - b * x1 * x1 + c * x1 - r).powi(2) + s * (1.0 - t) * x1.cos() + s
}

pub fn goldstein_price(x: f64, y: f64) -> f64 {
    let a = 1.0
        + (x + y + 1.0).powi(2)
            * (19.0 - 14.0 * x + 3.0 * x * x - 14.0 * y + 6.0 * x * y + 3.0 * y * y);
    let b = 30.0
        + (2.0 * x - 3.0 * y).powi(2)
            * (18.0 - 32.0 * x + 12.0 * x * x + 48.0 * y - 36.0 * x * y + 27.0 * y * y);
    a * b
}

pub fn six_hump_camel(x: f64, y: f64) -> f64 {
    (4.0 - 2.1 * x * x + x.powi(4) / 3.0) * x * x + x * y + (-4.0 + 4.0 * y * y) * y * y
}

fn hidden_pattern_score(x: &[f64], pattern: &[usize]) -> f64 {
    let matches: Vec<f64> = x
        .iter()
        .zip(pattern)
        .map(|(&v, &p)| if v as usize == p { 1.0 } else { 0.0 })
        .collect();
    let single: f64 = matches.iter().sum();
    let pairs: f64 = matches.windows(2).map(|w| w[0] * w[1]).sum();
    single + HIDDEN_PATTERN_BONUS * pairs
}

/// Hidden-pattern score for an explicit pattern, validating the vocabulary.
pub fn eval_hidden_pattern(x: &[usize], pattern: &[usize], vocab: usize) -> Result<f64> {
    if x.len() != pattern.len() {
        return Err(Error::Domain(format!(
            "expected {} symbols, got {}",
            pattern.len(),
            x.len()
        )));
    }
    if let Some(bad) = x.iter().find(|&&s| s >= vocab) {
        return Err(Error::Domain(format!("symbol {bad} not in vocabulary [0, {vocab})")));
    }
    let xf: Vec<f64> = x.iter().map(|&s| s as f64).collect();
    Ok(hidden_pattern_score(&xf, pattern))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn branin_optima_and_origin() {
        let t = TaskSpec::branin();
        for x in [[-PI, 12.275], [PI, 2.275], [9.42478, 2.475]] {
            let v = t.evaluate(&x).unwrap();
            assert!((v - -0.397887).abs() < 1e-5, "{x:?} -> {v}");
        }
        // -36 - 10 (1 - 1/(8 pi)) - 10
        assert!((t.evaluate(&[0.0, 0.0]).unwrap() - -55.602_112_642_3).abs() < 1e-4);
    }

    #[test]
    fn branin_rejects_out_of_bounds() {
        let t = TaskSpec::branin();
        assert!(matches!(t.evaluate(&[-5.1, 0.0]), Err(Error::Domain(_))));
        assert!(matches!(t.evaluate(&[0.0, 15.5]), Err(Error::Domain(_))));
        assert!(matches!(t.evaluate(&[0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn goldstein_price_values() {
        let t = TaskSpec::goldstein_price_neg();
        assert!((t.evaluate(&[0.0, -1.0]).unwrap() - -3.0).abs() < 1e-6);
        assert!((t.evaluate(&[0.0, 0.0]).unwrap() - -600.0).abs() < 1e-3);
        assert!(t.evaluate(&[2.5, 0.0]).is_err());
    }

    #[test]
    fn sixhump_values() {
        let t = TaskSpec::sixhump_neg();
        assert!((t.evaluate(&[0.0898, -0.7126]).unwrap() - 1.0316).abs() < 1e-3);
        assert!((t.evaluate(&[-0.0898, 0.7126]).unwrap() - 1.0316).abs() < 1e-3);
        assert_eq!(t.evaluate(&[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn hidden_pattern_values() {
        let t = TaskSpec::hidden_pattern(8, 4).unwrap();
        let p: Vec<f64> = t.hidden_pattern_optimum().unwrap().iter().map(|&s| s as f64).collect();
        assert_eq!(t.evaluate(&p).unwrap(), 11.5);
        let miss: Vec<f64> = p.iter().map(|&s| ((s as usize + 1) % 4) as f64).collect();
        assert_eq!(t.evaluate(&miss).unwrap(), 0.0);
        assert!(t.evaluate(&[4.0; 8]).is_err());
        assert!(t.evaluate(&[0.5; 8]).is_err());
    }

    #[test]
    fn hidden_pattern_exhaustive_small() {
        // d=4, V=4: direct formula application on a few inputs.
        let pattern = [1, 3, 3, 0];
        assert_eq!(eval_hidden_pattern(&[1, 3, 0, 0], &pattern, 4).unwrap(), 3.0 + 0.5);
        assert_eq!(eval_hidden_pattern(&[1, 3, 3, 0], &pattern, 4).unwrap(), 4.0 + 1.5);
        assert_eq!(eval_hidden_pattern(&[1, 0, 3, 2], &pattern, 4).unwrap(), 2.0);
        assert!(eval_hidden_pattern(&[1, 0, 3, 4], &pattern, 4).is_err());
    }

    #[test]
    fn optimum_registry() {
        assert!((task_optimum(&TaskSpec::by_name("branin").unwrap()) - -0.397887).abs() < 1e-6);
        assert_eq!(task_optimum(&TaskSpec::by_name("hidden_pattern").unwrap()), 11.5);
        assert!((task_optimum(&TaskSpec::by_name("sixhump_neg").unwrap()) - 1.0316).abs() < 1e-4);
        assert_eq!(TaskSpec::by_name("hidden_pattern_d5_v3").unwrap().dim(), 5);
        assert!(TaskSpec::by_name("rosenbrock").is_err());
    }

    #[test]
    fn clamp_projects_into_domain() {
        let t = TaskSpec::branin();
        let (p, moved) = t.clamp(&[-7.0, 3.0]);
        assert_eq!(p, vec![-5.0, 3.0]);
        assert!(moved);
        let (_, moved) = t.clamp(&[1.0, 3.0]);
        assert!(!moved);
        let d = TaskSpec::hidden_pattern(3, 4).unwrap();
        assert_eq!(d.clamp(&[-1.0, 2.4, 9.0]).0, vec![0.0, 2.0, 3.0]);
    }

    #[test]
    fn random_queries_never_exceed_optimum() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for name in TaskSpec::registered_names() {
            let t = TaskSpec::by_name(name).unwrap();
            for _ in 0..200_000 {
                let x = t.sample_uniform(&mut rng);
                assert!(t.evaluate(&x).unwrap() <= t.f_star() + 1e-6, "{name} at {x:?}");
            }
        }
    }
}
