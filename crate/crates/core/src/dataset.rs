//! Offline datasets: generation, truncation, normalization, perturbation, and
//! the on-disk CSV format.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::index::sample;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functions::{TaskKind, TaskSpec};
use crate::seed::rng_from;

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Affine value normalization anchors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub y_min: f64,
    pub y_max: f64,
}

impl Normalization {
    pub fn apply(&self, y: f64) -> f64 {
        (y - self.y_min) / (self.y_max - self.y_min)
    }

    pub fn invert(&self, y: f64) -> f64 {
        y * (self.y_max - self.y_min) + self.y_min
    }
}

/// A fixed set of past evaluations of a task.
#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    task: TaskSpec,
    points: Array2<f64>,
    values: Vec<f64>,
    normalization: Option<Normalization>,
}

/// How `withhold` picks the points to drop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WithholdMode {
    Random,
    Top,
}

impl OfflineDataset {
    pub fn new(task: TaskSpec, points: Array2<f64>, values: Vec<f64>) -> Result<Self> {
        Self::with_normalization(task, points, values, None)
    }

    fn with_normalization(
        task: TaskSpec,
        points: Array2<f64>,
        values: Vec<f64>,
        normalization: Option<Normalization>,
    ) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("dataset must hold at least one point".into()));
        }
        if points.nrows() != values.len() || points.ncols() != task.dim() {
            return Err(Error::Config(format!(
                "dataset shape {}x{} does not match {} values of a {}-d task",
                points.nrows(),
                points.ncols(),
                values.len(),
                task.dim()
            )));
        }
        for row in points.rows() {
            if !task.contains(row.as_slice().expect("standard layout")) {
                return Err(Error::Domain(format!("point {row} outside the {task} domain")));
            }
        }
        Ok(Self { task, points, values, normalization })
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        self.points.row(i).to_slice().expect("standard layout")
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn normalization(&self) -> Option<Normalization> {
        self.normalization
    }

    pub fn is_normalized(&self) -> bool {
        self.normalization.is_some()
    }

    /// Index and value of the best point (first index on ties).
    pub fn best(&self) -> (usize, f64) {
        let mut best = (0, self.values[0]);
        for (i, &v) in self.values.iter().enumerate() {
            if v > best.1 {
                best = (i, v);
            }
        }
        best
    }

    pub fn best_value(&self) -> f64 {
        self.best().1
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Optimum estimate on the dataset's value scale.
    pub fn f_star(&self) -> f64 {
        match self.normalization {
            Some(n) => n.apply(self.task.f_star()),
            None => self.task.f_star(),
        }
    }

    /// Converts a raw oracle value to this dataset's value scale.
    pub fn to_value_scale(&self, raw: f64) -> f64 {
        match self.normalization {
            Some(n) => n.apply(raw),
            None => raw,
        }
    }

    fn subset(&self, keep: &[usize]) -> Self {
        let d = self.dim();
        let mut points = Array2::zeros((keep.len(), d));
        let mut values = Vec::with_capacity(keep.len());
        for (r, &i) in keep.iter().enumerate() {
            points.row_mut(r).assign(&self.points.row(i));
            values.push(self.values[i]);
        }
        Self { task: self.task.clone(), points, values, normalization: self.normalization }
    }

    /// Indices sorted ascending by value, ties by index.
    fn ascending_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.values[a].total_cmp(&self.values[b]).then(a.cmp(&b)));
        idx
    }

    /// Keeps the `keep` lowest-valued points, preserving original order.
    fn keep_lowest(&self, keep: usize) -> Self {
        let mut idx = self.ascending_order();
        idx.truncate(keep);
        idx.sort_unstable();
        self.subset(&idx)
    }
}

/// Samples `n_raw` uniform points, evaluates them, and removes the top
/// `cut_fraction` by value.
pub fn generate_offline(
    task: &TaskSpec,
    n_raw: usize,
    cut_fraction: f64,
    seed: u64,
) -> Result<OfflineDataset> {
    if n_raw < 10 {
        return Err(Error::Config(format!("n_raw must be at least 10, got {n_raw}")));
    }
    if !(0.0..1.0).contains(&cut_fraction) {
        return Err(Error::Config(format!("cut fraction {cut_fraction} not in [0, 1)")));
    }
    let mut rng = rng_from(seed);
    let d = task.dim();
    let mut points = Array2::zeros((n_raw, d));
    let mut values = Vec::with_capacity(n_raw);
    for i in 0..n_raw {
        let x = task.sample_uniform(&mut rng);
        values.push(task.evaluate(&x)?);
        points.row_mut(i).assign(&ndarray::ArrayView1::from(&x));
    }
    let full = OfflineDataset::new(task.clone(), points, values)?;
    let keep = ((n_raw as f64) * (1.0 - cut_fraction)).round().max(1.0) as usize;
    Ok(full.keep_lowest(keep))
}

/// Maps every value through `(y - y_min) / (y_max - y_min)`.
pub fn normalize_values(ds: &OfflineDataset, y_min: f64, y_max: f64) -> Result<OfflineDataset> {
    if !(y_max > y_min) {
        return Err(Error::Config(format!("normalization needs y_max > y_min, got [{y_min}, {y_max}]")));
    }
    if ds.is_normalized() {
        return Err(Error::Config("dataset is already normalized".into()));
    }
    let norm = Normalization { y_min, y_max };
    let mut out = ds.clone();
    out.values.iter_mut().for_each(|v| *v = norm.apply(*v));
    out.normalization = Some(norm);
    Ok(out)
}

/// Default normalization anchors for a task: the smallest value seen in
/// `n_samples` uniform draws, and the known optimum.
pub fn default_anchors(task: &TaskSpec, n_samples: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = rng_from(seed);
    let mut lo = f64::INFINITY;
    for _ in 0..n_samples {
        lo = lo.min(task.evaluate(&task.sample_uniform(&mut rng))?);
    }
    Ok((lo, task.f_star()))
}

/// Adds zero-mean Gaussian noise with std `scale_fraction * max|values|`.
pub fn add_value_noise(ds: &OfflineDataset, scale_fraction: f64, seed: u64) -> Result<OfflineDataset> {
    if !(scale_fraction >= 0.0) {
        return Err(Error::Config(format!("noise scale must be >= 0, got {scale_fraction}")));
    }
    let mut out = ds.clone();
    if scale_fraction == 0.0 {
        return Ok(out);
    }
    let max_abs = ds.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let sigma = scale_fraction * max_abs;
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = rng_from(seed);
    out.values.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    Ok(out)
}

/// Removes a `fraction` of the dataset, either uniformly at random or the
/// best-valued points.
pub fn withhold(ds: &OfflineDataset, fraction: f64, mode: WithholdMode, seed: u64) -> Result<OfflineDataset> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("withhold fraction {fraction} not in [0, 1)")));
    }
    let keep = ((ds.len() as f64) * (1.0 - fraction)).round().max(1.0) as usize;
    if keep >= ds.len() {
        return Ok(ds.clone());
    }
    Ok(match mode {
        WithholdMode::Top => ds.keep_lowest(keep),
        WithholdMode::Random => {
            let mut rng = rng_from(seed);
            let mut idx = sample(&mut rng, ds.len(), keep).into_vec();
            idx.sort_unstable();
            ds.subset(&idx)
        }
    })
}

pub(crate) fn fmt_f64(v: f64) -> String {
    // 17 significant digits round-trip every f64.
    format!("{v:.16e}")
}

fn fmt_coord(kind: TaskKind, v: f64) -> String {
    match kind {
        TaskKind::Continuous => fmt_f64(v),
        TaskKind::Discrete => format!("{}", v as u64),
    }
}

pub(crate) fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| Error::Format(format!("bad {what} '{s}': {e}")))
}

/// Serializes a dataset to its text form.
pub fn dataset_to_string(ds: &OfflineDataset) -> String {
    let mut out = String::new();
    let kind = ds.task.kind();
    write!(
        out,
        "v{DATASET_FORMAT_VERSION};task={};kind={};dim={};n={};normalized={}",
        ds.task.name(),
        kind.code(),
        ds.dim(),
        ds.len(),
        u8::from(ds.is_normalized())
    )
    .unwrap();
    if let Some(n) = ds.normalization {
        write!(out, ";ymin={};ymax={}", fmt_f64(n.y_min), fmt_f64(n.y_max)).unwrap();
    }
    out.push('\n');
    for (row, y) in ds.points.rows().into_iter().zip(&ds.values) {
        for v in row {
            out.push_str(&fmt_coord(kind, *v));
            out.push(',');
        }
        out.push_str(&fmt_f64(*y));
        out.push('\n');
    }
    out
}

pub fn save_dataset(ds: &OfflineDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, dataset_to_string(ds))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<OfflineDataset> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    dataset_from_str(&fs::read_to_string(path)?)
}

pub(crate) fn parse_header(line: &str) -> Result<(u32, Vec<(String, String)>)> {
    let mut parts = line.trim_end().split(';');
    let version = parts
        .next()
        .and_then(|v| v.strip_prefix('v'))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad header '{line}'")))?;
    let mut kv = Vec::new();
    for p in parts {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad header field '{p}'")))?;
        kv.push((k.to_string(), v.to_string()));
    }
    Ok((version, kv))
}

fn header_value<'a>(kv: &'a [(String, String)], key: &str) -> Result<&'a str> {
    kv.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Format(format!("header missing '{key}'")))
}

pub fn dataset_from_str(text: &str) -> Result<OfflineDataset> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty dataset file".into()))?;
    let (version, kv) = parse_header(header)?;
    if version != DATASET_FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let task = TaskSpec::by_name(header_value(&kv, "task")?)?;
    let kind = header_value(&kv, "kind")?;
    if kind.len() != 1 || kind.chars().next() != Some(task.kind().code()) {
        return Err(Error::Format(format!("kind '{kind}' does not match task {task}")));
    }
    let dim: usize = header_value(&kv, "dim")?
        .parse()
        .map_err(|_| Error::Format("bad dim".into()))?;
    if dim != task.dim() {
        return Err(Error::Format(format!("header dim {dim} but task {task} has dim {}", task.dim())));
    }
    let n: usize = header_value(&kv, "n")?
        .parse()
        .map_err(|_| Error::Format("bad n".into()))?;
    let normalization = match header_value(&kv, "normalized")? {
        "0" => None,
        "1" => Some(Normalization {
            y_min: parse_f64(header_value(&kv, "ymin")?, "ymin")?,
            y_max: parse_f64(header_value(&kv, "ymax")?, "ymax")?,
        }),
        other => return Err(Error::Format(format!("bad normalized flag '{other}'"))),
    };
    let mut points = Array2::zeros((n, dim));
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let line = lines
            .next()
            .ok_or_else(|| Error::Format(format!("truncated: expected {n} rows, found {i}")))?;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(Error::Format(format!(
                "row {i} has {} fields, expected {}",
                fields.len(),
                dim + 1
            )));
        }
        for (k, f) in fields[..dim].iter().enumerate() {
            points[[i, k]] = parse_f64(f, "coordinate")?;
        }
        values.push(parse_f64(fields[dim], "value")?);
    }
    if lines.any(|l| !l.trim().is_empty()) {
        return Err(Error::Format(format!("more than the declared {n} rows")));
    }
    OfflineDataset::with_normalization(task, points, values, normalization)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functions::TaskSpec;

    fn tiny(values: &[f64]) -> OfflineDataset {
        let n = values.len();
        let pts = Array2::from_shape_fn((n, 2), |(i, k)| (i as f64 * 0.1 + k as f64).min(10.0));
        OfflineDataset::new(TaskSpec::branin(), pts, values.to_vec()).unwrap()
    }

    #[test]
    fn generate_cuts_top_fraction() {
        let t = TaskSpec::branin();
        let ds = generate_offline(&t, 5000, 0.10, 1).unwrap();
        assert_eq!(ds.len(), 4500);
        let best = ds.best_value();
        assert!((-7.5..=-5.0).contains(&best), "best {best}");

        let full = generate_offline(&t, 5000, 0.0, 1).unwrap();
        assert_eq!(full.len(), 5000);
        assert!(full.best_value() > -1.5);
        // Points are a prefix-order subset of the uncut draw.
        assert!(full.best_value() > best);
    }

    #[test]
    fn generate_small_dataset() {
        let ds = generate_offline(&TaskSpec::branin(), 50, 0.10, 4).unwrap();
        assert_eq!(ds.len(), 45);
        // The kept values are exactly the 45 smallest of the same draw.
        let mut all = generate_offline(&TaskSpec::branin(), 50, 0.0, 4).unwrap().values().to_vec();
        all.sort_by(f64::total_cmp);
        let mut kept = ds.values().to_vec();
        kept.sort_by(f64::total_cmp);
        assert_eq!(kept, all[..45]);
    }

    #[test]
    fn generate_rejects_bad_inputs() {
        assert!(generate_offline(&TaskSpec::branin(), 9, 0.1, 0).is_err());
        assert!(generate_offline(&TaskSpec::branin(), 100, 1.0, 0).is_err());
    }

    #[test]
    fn normalization_anchors() {
        let ds = tiny(&[-10.0, -5.0, 0.0]);
        let n = normalize_values(&ds, -10.0, 0.0).unwrap();
        assert_eq!(n.values(), &[0.0, 0.5, 1.0]);
        assert!(n.is_normalized());
        assert!((n.f_star() - (BRANIN_F_STAR_NORM)).abs() < 1e-12);
        assert!(matches!(normalize_values(&ds, 1.0, 1.0), Err(Error::Config(_))));
    }

    const BRANIN_F_STAR_NORM: f64 = (crate::functions::BRANIN_MAX + 10.0) / 10.0;

    #[test]
    fn zero_noise_is_identity() {
        let ds = tiny(&[-3.0, -2.0, -1.0]);
        assert_eq!(add_value_noise(&ds, 0.0, 9).unwrap(), ds);
        assert!(add_value_noise(&ds, -1.0, 9).is_err());
    }

    #[test]
    fn withhold_modes() {
        let ds = tiny(&[5.0, 1.0, 4.0, 2.0, 3.0, 0.0]);
        assert_eq!(withhold(&ds, 0.0, WithholdMode::Top, 0).unwrap(), ds);
        let top = withhold(&ds, 0.5, WithholdMode::Top, 0).unwrap();
        assert_eq!(top.values(), &[1.0, 2.0, 0.0]);
        let rnd = withhold(&ds, 0.5, WithholdMode::Random, 0).unwrap();
        assert_eq!(rnd.len(), 3);
        assert!(withhold(&ds, 1.0, WithholdMode::Random, 0).is_err());
    }

    #[test]
    fn text_round_trip_and_errors() {
        let ds = generate_offline(&TaskSpec::branin(), 30, 0.1, 5).unwrap();
        let text = dataset_to_string(&ds);
        assert_eq!(dataset_from_str(&text).unwrap(), ds);

        let truncated: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
        assert!(matches!(dataset_from_str(&truncated), Err(Error::Format(_))));

        let bad_dim = text.replacen("dim=2", "dim=3", 1);
        assert!(matches!(dataset_from_str(&bad_dim), Err(Error::Format(_))));

        let norm = normalize_values(&ds, -400.0, ds.task().f_star()).unwrap();
        assert_eq!(dataset_from_str(&dataset_to_string(&norm)).unwrap(), norm);
    }

    #[test]
    fn discrete_round_trip() {
        let t = TaskSpec::hidden_pattern(8, 4).unwrap();
        let ds = generate_offline(&t, 40, 0.0, 2).unwrap();
        let text = dataset_to_string(&ds);
        assert!(text.starts_with("v1;task=hidden_pattern;kind=d;dim=8;n=40;normalized=0\n"));
        assert_eq!(dataset_from_str(&text).unwrap(), ds);
    }
}
