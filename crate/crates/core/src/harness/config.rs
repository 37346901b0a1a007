//! Run configuration: one TOML file with a section per module.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functions::{TaskKind, TaskSpec};
use crate::model::{DecodeMode, HeadKind};
use crate::rollout::{RbMode, RolloutConfig};
use crate::sortsample::Strategy;
use crate::train::TrainConfig;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "TRAJOPT_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct DatasetSection {
    pub n_raw: usize,
    pub cut_fraction: f64,
    /// Gaussian value noise as a fraction of `max|y|`.
    pub noise: f64,
    /// Fraction of points kept after generation (dataset-size ablation).
    pub keep_fraction: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { n_raw: 5000, cut_fraction: 0.1, noise: 0.0, keep_fraction: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct SortSampleSection {
    /// `K = k_fraction * N`.
    pub k_fraction: f64,
    /// `tau` is this percentile of the dataset regrets.
    pub tau_percentile: f64,
    pub n_bins: usize,
    pub length: usize,
    pub num_trajs: usize,
    pub strategy: Strategy,
    /// Replaces the task optimum when computing regrets.
    pub f_star: Option<f64>,
}

impl Default for SortSampleSection {
    fn default() -> Self {
        Self {
            k_fraction: 0.03,
            tau_percentile: 10.0,
            n_bins: 32,
            length: 64,
            num_trajs: 400,
            strategy: Strategy::ReweightSorted,
            f_star: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub context_len: usize,
    pub head_variance: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { embed_dim: 128, n_heads: 4, n_layers: 8, context_len: 32, head_variance: 1.0 }
    }
}

/// Training settings; the seed comes from the master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub grad_clip_norm: Option<f64>,
    pub windows_per_traj: Option<usize>,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            grad_clip_norm: t.grad_clip_norm,
            windows_per_traj: t.windows_per_traj,
            checkpoint_every: t.checkpoint_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct RolloutSection {
    pub prefix_len: usize,
    pub rb_values: Vec<f64>,
    pub rb_mode: RbMode,
    pub query_budget: usize,
    pub decode: DecodeMode,
}

impl Default for RolloutSection {
    fn default() -> Self {
        let r = RolloutConfig::default();
        Self {
            prefix_len: r.prefix_len,
            rb_values: r.rb_values,
            rb_mode: r.rb_mode,
            query_budget: r.query_budget,
            decode: r.decode,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Trained models keyed by everything that affects training.
    pub cache_dir: Option<PathBuf>,
}

impl Default for OutputSection {
    fn default() -> Self {
        let root = std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        Self { dir: root, cache_dir: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskSection,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub sortsample: SortSampleSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub rollout: RolloutSection,
    #[serde(default)]
    pub output: OutputSection,
}

/// Named parameter sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// Published per-task settings.
    Paper,
    /// A smaller model and schedule sized for a single CPU core.
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            _ => Err(Error::Config(format!("unknown profile {s:?} (expected paper or desk)"))),
        }
    }
}

impl RunConfig {
    /// Defaults for `task` under `profile`.
    pub fn preset(task: &str, profile: Profile) -> Result<Self> {
        let spec = TaskSpec::by_name(task)?;
        let mut cfg = RunConfig {
            seed: 0,
            task: TaskSection { name: spec.name().to_string() },
            dataset: DatasetSection::default(),
            sortsample: SortSampleSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            rollout: RolloutSection::default(),
            output: OutputSection::default(),
        };
        if spec.kind() == TaskKind::Discrete {
            // Small symbol task: most of the space is kept, short trajectories.
            cfg.dataset.n_raw = 2000;
            cfg.dataset.cut_fraction = 0.5;
            cfg.sortsample.n_bins = 8;
            cfg.sortsample.length = 32;
            cfg.sortsample.num_trajs = 200;
            cfg.model.context_len = 16;
            cfg.rollout.prefix_len = 16;
            cfg.rollout.query_budget = 64;
        }
        if profile == Profile::Desk {
            cfg.model.embed_dim = 32;
            cfg.model.n_layers = 2;
            cfg.train.learning_rate = 1e-3;
            cfg.train.batch_size = 64;
            cfg.train.windows_per_traj = Some(4);
            cfg.train.epochs = if spec.kind() == TaskKind::Discrete { 30 } else { 60 };
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn task_spec(&self) -> Result<TaskSpec> {
        TaskSpec::by_name(&self.task.name)
    }

    pub fn head(&self) -> Result<HeadKind> {
        let t = self.task_spec()?;
        Ok(match t.vocab() {
            Some(vocab) => HeadKind::Discrete { dim: t.dim(), vocab },
            None => HeadKind::Continuous { dim: t.dim() },
        })
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            grad_clip_norm: t.grad_clip_norm,
            windows_per_traj: t.windows_per_traj,
            checkpoint_every: t.checkpoint_every,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn rollout_config(&self, seed: u64) -> RolloutConfig {
        let r = &self.rollout;
        RolloutConfig {
            prefix_len: r.prefix_len,
            total_len: self.sortsample.length,
            rb_values: r.rb_values.clone(),
            rb_mode: r.rb_mode,
            query_budget: r.query_budget,
            decode: r.decode,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task_spec()?;
        let d = &self.dataset;
        if !(0.0..1.0).contains(&d.cut_fraction) || !(d.noise >= 0.0) || !(d.keep_fraction > 0.0 && d.keep_fraction <= 1.0) {
            return Err(Error::Config("dataset: cut_fraction in [0, 1), noise >= 0, keep_fraction in (0, 1]".into()));
        }
        let s = &self.sortsample;
        if s.n_bins == 0 || s.length == 0 || s.num_trajs == 0 || !(s.k_fraction > 0.0) {
            return Err(Error::Config("sortsample: n_bins, length, num_trajs and k_fraction must be positive".into()));
        }
        if !(0.0..=100.0).contains(&s.tau_percentile) {
            return Err(Error::Config("sortsample: tau_percentile must be in [0, 100]".into()));
        }
        if self.model.context_len > s.length {
            return Err(Error::Config(format!(
                "model.context_len {} exceeds trajectory length {}",
                self.model.context_len, s.length
            )));
        }
        self.train_config(0).validate()?;
        self.rollout_config(0).validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for task in ["branin", "hidden_pattern"] {
            for profile in [Profile::Paper, Profile::Desk] {
                let cfg = RunConfig::preset(task, profile).unwrap();
                cfg.validate().unwrap();
                assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
            }
        }
    }

    #[test]
    fn paper_branin_settings() {
        let c = RunConfig::preset("branin", Profile::Paper).unwrap();
        assert_eq!((c.model.n_heads, c.model.n_layers, c.model.embed_dim, c.model.context_len), (4, 8, 128, 32));
        assert_eq!((c.sortsample.length, c.rollout.prefix_len, c.sortsample.n_bins, c.sortsample.num_trajs), (64, 32, 32, 400));
        assert_eq!(c.train.epochs, 75);
        assert_eq!(c.rollout.rb_values, vec![0.0, 0.01, 0.05, 0.1]);
    }

    #[test]
    fn partial_file_takes_defaults() {
        let c = RunConfig::from_toml("seed = 3\n[task]\nname = \"sixhump_neg\"\n[model]\nn_layers = 2\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.model.n_layers, 2);
        assert_eq!(c.model.embed_dim, 128);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(RunConfig::from_toml("seed = 0\n[task]\nname = \"nope\"\n").is_err());
        assert!(RunConfig::from_toml("seed = 0\n[task]\nname = \"branin\"\n[model]\ncontext_len = 100\n").is_err());
        assert!(RunConfig::from_toml("seed = 0\n[task]\nname = \"branin\"\n[rollout]\nprefix_len = 64\n").is_err());
        assert!(RunConfig::from_toml("seed = 0\n[task]\nname = \"branin\"\n[bogus]\n").is_err());
    }
}
