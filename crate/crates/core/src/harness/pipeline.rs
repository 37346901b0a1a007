//! Phase orchestration, the trained-model cache, and run records.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{add_value_noise, generate_offline, load_dataset, save_dataset, withhold, OfflineDataset, WithholdMode};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::model::{init_model, load_checkpoint, save_checkpoint, InputScaling, ModelConfig, ModelState};
use crate::rollout::{evaluate, RolloutResult};
use crate::seed::SeedStream;
use crate::sortsample::{
    build_traj_dataset, hyperparams_from_fractions, load_traj_dataset, save_traj_dataset, SortSampleParams,
    TrajectoryDataset,
};
use crate::train::{train, EpochStats};

pub const DATASET_FILE: &str = "dataset.csv";
pub const TRAJS_FILE: &str = "trajs.csv";
pub const MODEL_FILE: &str = "model.bin";
pub const RESULT_FILE: &str = "result.json";
pub const RECORD_FILE: &str = "record.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(sha256_hex(&fs::read(path)?))
}

/// Generates the offline dataset, then applies the size and noise settings.
pub fn make_dataset(cfg: &RunConfig) -> Result<OfflineDataset> {
    let seeds = SeedStream::new(cfg.seed);
    let d = &cfg.dataset;
    let mut ds = generate_offline(&cfg.task_spec()?, d.n_raw, d.cut_fraction, seeds.derive("dataset", 0))?;
    if d.keep_fraction < 1.0 {
        ds = withhold(&ds, 1.0 - d.keep_fraction, WithholdMode::Random, seeds.derive("withhold", 0))?;
    }
    if d.noise > 0.0 {
        ds = add_value_noise(&ds, d.noise, seeds.derive("noise", 0))?;
    }
    Ok(ds)
}

/// The optimum estimate used for regrets.
pub fn f_star_used(cfg: &RunConfig, ds: &OfflineDataset) -> f64 {
    cfg.sortsample.f_star.unwrap_or_else(|| ds.f_star())
}

pub fn sortsample_params(cfg: &RunConfig, ds: &OfflineDataset) -> SortSampleParams {
    let s = &cfg.sortsample;
    let (k, tau) = hyperparams_from_fractions(ds.values(), f_star_used(cfg, ds), s.k_fraction, s.tau_percentile);
    SortSampleParams {
        k,
        tau,
        n_bins: s.n_bins,
        length: s.length,
        strategy: s.strategy,
        seed: SeedStream::new(cfg.seed).derive("trajs", 0),
    }
}

pub fn make_trajs(cfg: &RunConfig, ds: &OfflineDataset) -> Result<TrajectoryDataset> {
    build_traj_dataset(ds, cfg.sortsample.num_trajs, &sortsample_params(cfg, ds), f_star_used(cfg, ds))
}

pub fn model_config(cfg: &RunConfig, trajs: &TrajectoryDataset) -> Result<ModelConfig> {
    let m = &cfg.model;
    let mut mc = ModelConfig::new(cfg.head()?, m.n_heads, m.n_layers, m.context_len, cfg.sortsample.length);
    mc.embed_dim = m.embed_dim;
    mc.head_variance = m.head_variance;
    mc.scaling = InputScaling::fit(trajs);
    mc.validate()?;
    Ok(mc)
}

/// Hash of every setting that influences the trained weights.
pub fn training_key(cfg: &RunConfig) -> String {
    let parts = serde_json::json!({
        "seed": cfg.seed,
        "task": cfg.task,
        "dataset": cfg.dataset,
        "sortsample": cfg.sortsample,
        "model": cfg.model,
        "train": cfg.train,
    });
    sha256_hex(parts.to_string().as_bytes())
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub model: ModelState<f32>,
    /// Empty when the model came from the cache.
    pub curve: Vec<EpochStats>,
    pub cached: bool,
}

/// Trains a model for `cfg`, or loads it from the cache directory.
///
/// `train_dir` receives loss telemetry and periodic checkpoints.
pub fn trained_model(cfg: &RunConfig, trajs: &TrajectoryDataset, train_dir: Option<&Path>) -> Result<Trained> {
    let cache_path = cfg.output.cache_dir.as_ref().map(|d| d.join(format!("{}.bin", training_key(cfg))));
    if let Some(p) = cache_path.as_ref().filter(|p| p.exists()) {
        let model = load_checkpoint(p)?;
        if model.config() == &model_config(cfg, trajs)? {
            return Ok(Trained { model, curve: Vec::new(), cached: true });
        }
    }
    let seeds = SeedStream::new(cfg.seed);
    let model = init_model::<f32>(model_config(cfg, trajs)?, seeds.derive("init", 0))?;
    let out = train(model, trajs, &cfg.train_config(seeds.derive("train", 0)), train_dir)?;
    if let Some(p) = &cache_path {
        save_checkpoint(&out.model, p)?;
    }
    Ok(Trained { model: out.model, curve: out.curve, cached: false })
}

/// Everything produced by one in-memory run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dataset: OfflineDataset,
    pub trajs: TrajectoryDataset,
    pub params: SortSampleParams,
    pub f_star: f64,
    pub trained: Trained,
    pub result: RolloutResult,
}

/// Dataset, trajectories, model and rollout, without touching the output
/// directory.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let dataset = make_dataset(cfg)?;
    let trajs = make_trajs(cfg, &dataset)?;
    let trained = trained_model(cfg, &trajs, None)?;
    let outcome = rollout_with(cfg, &dataset, &trained.model)?;
    Ok(RunOutcome {
        params: sortsample_params(cfg, &dataset),
        f_star: f_star_used(cfg, &dataset),
        dataset,
        trajs,
        trained,
        result: outcome,
    })
}

pub fn rollout_with(cfg: &RunConfig, ds: &OfflineDataset, model: &ModelState<f32>) -> Result<RolloutResult> {
    let rc = cfg.rollout_config(SeedStream::new(cfg.seed).derive("rollout", 0));
    evaluate(model, ds, &sortsample_params(cfg, ds), f_star_used(cfg, ds), &rc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

/// Provenance for the files in one output directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    /// Hash over the config hash and the input artifacts of the last phase.
    pub input_hash: String,
    pub artifacts: BTreeMap<String, Artifact>,
    pub wallclock_s: BTreeMap<String, f64>,
}

impl RunRecord {
    pub fn load_or_new(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        let path = dir.join(RECORD_FILE);
        let hash = sha256_hex(cfg.to_toml().as_bytes());
        if path.exists() {
            let rec: RunRecord = serde_json::from_str(&fs::read_to_string(&path)?)?;
            if rec.config_hash == hash {
                return Ok(rec);
            }
        }
        Ok(RunRecord { config_hash: hash, ..Default::default() })
    }

    fn add(&mut self, phase: &str, path: &Path, seconds: f64) -> Result<()> {
        let sha256 = file_sha256(path)?;
        self.artifacts.insert(phase.to_string(), Artifact { path: path.to_path_buf(), sha256 });
        self.wallclock_s.insert(phase.to_string(), seconds);
        Ok(())
    }

    fn set_inputs(&mut self, inputs: &[&Path]) -> Result<()> {
        let mut h = Sha256::new();
        h.update(self.config_hash.as_bytes());
        for p in inputs {
            h.update(file_sha256(p)?.as_bytes());
        }
        self.input_hash = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        Ok(())
    }

    /// Checks that every recorded artifact exists with its recorded hash.
    pub fn verify(&self) -> Result<()> {
        for (phase, a) in &self.artifacts {
            if file_sha256(&a.path)? != a.sha256 {
                return Err(Error::Format(format!("{phase} artifact {} changed since it was recorded", a.path.display())));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(RECORD_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path))
    }
}

/// Writes `dataset.csv` under `dir`.
pub fn stage_gen_data(cfg: &RunConfig, dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let t = Instant::now();
    let path = dir.join(DATASET_FILE);
    save_dataset(&make_dataset(cfg)?, &path)?;
    let mut rec = RunRecord::load_or_new(dir, cfg)?;
    rec.set_inputs(&[])?;
    rec.add("gen-data", &path, t.elapsed().as_secs_f64())?;
    rec.save(dir)?;
    Ok(path)
}

/// Reads `dataset.csv`, writes `trajs.csv`.
pub fn stage_build_trajs(cfg: &RunConfig, dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let t = Instant::now();
    let ds_path = require(dir.join(DATASET_FILE))?;
    let ds = load_dataset(&ds_path)?;
    let path = dir.join(TRAJS_FILE);
    save_traj_dataset(&make_trajs(cfg, &ds)?, &path)?;
    let mut rec = RunRecord::load_or_new(dir, cfg)?;
    rec.set_inputs(&[&ds_path])?;
    rec.add("build-trajs", &path, t.elapsed().as_secs_f64())?;
    rec.save(dir)?;
    Ok(path)
}

/// Reads `trajs.csv`, writes `model.bin` plus telemetry under `train/`.
pub fn stage_train(cfg: &RunConfig, dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let t = Instant::now();
    let tr_path = require(dir.join(TRAJS_FILE))?;
    let trajs = load_traj_dataset(&tr_path)?;
    let trained = trained_model(cfg, &trajs, Some(&dir.join("train")))?;
    let path = dir.join(MODEL_FILE);
    save_checkpoint(&trained.model, &path)?;
    let mut rec = RunRecord::load_or_new(dir, cfg)?;
    rec.set_inputs(&[&tr_path])?;
    rec.add("train", &path, t.elapsed().as_secs_f64())?;
    rec.save(dir)?;
    Ok(path)
}

/// Reads `dataset.csv` and `model.bin`, writes `result.json`.
pub fn stage_rollout(cfg: &RunConfig, dir: &Path) -> Result<RolloutResult> {
    cfg.validate()?;
    let t = Instant::now();
    let ds_path = require(dir.join(DATASET_FILE))?;
    let model_path = require(dir.join(MODEL_FILE))?;
    let ds = load_dataset(&ds_path)?;
    let model = load_checkpoint(&model_path)?;
    let result = rollout_with(cfg, &ds, &model)?;
    let path = dir.join(RESULT_FILE);
    fs::write(&path, serde_json::to_string_pretty(&result)? + "\n")?;
    let mut rec = RunRecord::load_or_new(dir, cfg)?;
    rec.set_inputs(&[&ds_path, &model_path])?;
    rec.add("rollout", &path, t.elapsed().as_secs_f64())?;
    rec.save(dir)?;
    Ok(result)
}
