//! Causally masked transformer over interleaved (budget, point) tokens.
//!
//! Each trajectory timestep contributes two tokens, `R_t` then `x_t`. Both are
//! linearly embedded, summed with a learned slot embedding (position inside
//! the window) and a learned timestep embedding (absolute step in the
//! trajectory), and passed through pre-norm GPT blocks. The prediction for
//! `x_t` is read from the output at the `R_t` token, so it can only see
//! `R_{<=t}` and `x_{<t}`.
//!
//! Parameters live in one flat buffer addressed through a [`ParamLayout`];
//! gradients and optimizer moments reuse the same layout.

mod checkpoint;
mod decode;
mod transformer;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use decode::{predict_next, Context, DecodeMode};
pub(crate) use decode::encode_point;
pub use transformer::{loss, Batch, ForwardOutput, Targets};

use std::iter::Sum;

use ndarray::{ArrayView1, ArrayView2, NdFloat};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functions::{TaskKind, TaskSpec};
use crate::seed::rng_from;
use crate::sortsample::TrajectoryDataset;

/// Floating-point type the network can run in.
pub trait Real: NdFloat + Sum + Default + 'static {
    fn of(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite constant")
    }
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("float converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Output head shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadKind {
    /// Gaussian mean over `dim` coordinates.
    Continuous { dim: usize },
    /// `dim` independent categorical distributions over `vocab` symbols.
    Discrete { dim: usize, vocab: usize },
}

impl HeadKind {
    pub fn for_task(task: &TaskSpec) -> Self {
        match task.kind() {
            TaskKind::Continuous => HeadKind::Continuous { dim: task.dim() },
            TaskKind::Discrete => HeadKind::Discrete {
                dim: task.dim(),
                vocab: task.vocab().expect("discrete task has a vocabulary"),
            },
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            HeadKind::Continuous { dim } | HeadKind::Discrete { dim, .. } => dim,
        }
    }

    /// Width of the point-token input (one-hot for discrete).
    pub fn input_width(&self) -> usize {
        match *self {
            HeadKind::Continuous { dim } => dim,
            HeadKind::Discrete { dim, vocab } => dim * vocab,
        }
    }

    pub fn output_width(&self) -> usize {
        self.input_width()
    }
}

/// Fixed affine maps from task units into network units.
///
/// Budgets are divided by `rb_scale`; continuous coordinates are mapped from
/// `[lo, hi]` onto `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub rb_scale: f64,
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
}

impl InputScaling {
    pub fn identity(dim: usize) -> Self {
        Self { rb_scale: 1.0, x_lo: vec![-1.0; dim], x_hi: vec![1.0; dim] }
    }

    /// Budgets scaled by the largest initial budget of the trajectory set;
    /// coordinates by the task bounds.
    pub fn fit(trajs: &TrajectoryDataset) -> Self {
        let rb_scale = trajs
            .trajectories
            .iter()
            .filter_map(|t| t.budgets.first().copied())
            .fold(0.0_f64, f64::max);
        let bounds = trajs.task.bounds();
        Self {
            rb_scale: if rb_scale > 0.0 { rb_scale } else { 1.0 },
            x_lo: bounds.iter().map(|b| b.0).collect(),
            x_hi: bounds.iter().map(|b| b.1).collect(),
        }
    }

    pub fn encode_budget(&self, r: f64) -> f64 {
        r / self.rb_scale
    }

    pub fn encode_coord(&self, k: usize, v: f64) -> f64 {
        let (lo, hi) = (self.x_lo[k], self.x_hi[k]);
        2.0 * (v - lo) / (hi - lo) - 1.0
    }

    pub fn decode_coord(&self, k: usize, v: f64) -> f64 {
        let (lo, hi) = (self.x_lo[k], self.x_hi[k]);
        (v + 1.0) * 0.5 * (hi - lo) + lo
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Timesteps per window; each contributes two tokens.
    pub context_len: usize,
    /// Number of timestep embeddings (trajectory length).
    pub max_timestep: usize,
    pub head: HeadKind,
    /// Fixed variance of the continuous Gaussian head.
    pub head_variance: f64,
    pub scaling: InputScaling,
}

impl ModelConfig {
    /// Defaults: 128-wide embeddings with the given depth and window.
    pub fn new(head: HeadKind, n_heads: usize, n_layers: usize, context_len: usize, max_timestep: usize) -> Self {
        let dim = head.dim();
        Self {
            embed_dim: 128,
            n_heads,
            n_layers,
            context_len,
            max_timestep,
            head,
            head_variance: 1.0,
            scaling: InputScaling::identity(dim),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return fail("embed_dim, n_heads and n_layers must be positive".into());
        }
        if self.embed_dim % self.n_heads != 0 {
            return fail(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            ));
        }
        if self.context_len == 0 || self.context_len > self.max_timestep {
            return fail(format!(
                "context_len {} must be in [1, max_timestep = {}]",
                self.context_len, self.max_timestep
            ));
        }
        if self.head.dim() == 0 {
            return fail("head dimension must be positive".into());
        }
        if let HeadKind::Discrete { vocab, .. } = self.head {
            if vocab < 2 {
                return fail("vocabulary must have at least 2 symbols".into());
            }
        }
        if !(self.head_variance > 0.0) {
            return fail("head_variance must be positive".into());
        }
        let d = self.head.dim();
        let s = &self.scaling;
        if s.x_lo.len() != d || s.x_hi.len() != d || !(s.rb_scale > 0.0) {
            return fail("input scaling does not match the head dimension".into());
        }
        if s.x_lo.iter().zip(&s.x_hi).any(|(lo, hi)| !(hi > lo)) {
            return fail("input scaling bounds must satisfy lo < hi".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let e = self.embed_dim;
        let embeds = 2 * e + (self.head.input_width() + 1) * e + 2 * self.context_len * e + self.max_timestep * e;
        let block = 12 * e * e + 13 * e;
        let head = 2 * e + (e + 1) * self.head.output_width();
        embeds + self.n_layers * block + head
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BlockIds {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub fc_w: usize,
    pub fc_b: usize,
    pub out_w: usize,
    pub out_b: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Ids {
    pub rb_w: usize,
    pub rb_b: usize,
    pub x_w: usize,
    pub x_b: usize,
    pub pos: usize,
    pub time: usize,
    pub blocks: Vec<BlockIds>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub head_w: usize,
    pub head_b: usize,
}

/// Names, shapes and offsets of every tensor in the flat buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
    total: usize,
    pub(crate) ids: Ids,
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

impl ParamLayout {
    fn build(cfg: &ModelConfig) -> (Self, Vec<Init>) {
        let e = cfg.embed_dim;
        let std = 0.02;
        let resid_std = 0.02 / ((2 * cfg.n_layers) as f64).sqrt();
        let mut specs = Vec::new();
        let mut inits = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>, init: Init| {
            let numel: usize = shape.iter().product();
            specs.push(ParamSpec { name, shape, offset: total });
            inits.push(init);
            total += numel;
            specs.len() - 1
        };
        let rb_w = push("embed.budget.weight".into(), vec![1, e], Init::Normal(std));
        let rb_b = push("embed.budget.bias".into(), vec![e], Init::Zeros);
        let x_w = push("embed.point.weight".into(), vec![cfg.head.input_width(), e], Init::Normal(std));
        let x_b = push("embed.point.bias".into(), vec![e], Init::Zeros);
        let pos = push("embed.slot".into(), vec![2 * cfg.context_len, e], Init::Normal(std));
        let time = push("embed.timestep".into(), vec![cfg.max_timestep, e], Init::Normal(std));
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            blocks.push(BlockIds {
                ln1_g: push(p("ln1.gamma"), vec![e], Init::Ones),
                ln1_b: push(p("ln1.beta"), vec![e], Init::Zeros),
                qkv_w: push(p("attn.qkv.weight"), vec![e, 3 * e], Init::Normal(std)),
                qkv_b: push(p("attn.qkv.bias"), vec![3 * e], Init::Zeros),
                proj_w: push(p("attn.proj.weight"), vec![e, e], Init::Normal(resid_std)),
                proj_b: push(p("attn.proj.bias"), vec![e], Init::Zeros),
                ln2_g: push(p("ln2.gamma"), vec![e], Init::Ones),
                ln2_b: push(p("ln2.beta"), vec![e], Init::Zeros),
                fc_w: push(p("mlp.fc.weight"), vec![e, 4 * e], Init::Normal(std)),
                fc_b: push(p("mlp.fc.bias"), vec![4 * e], Init::Zeros),
                out_w: push(p("mlp.proj.weight"), vec![4 * e, e], Init::Normal(resid_std)),
                out_b: push(p("mlp.proj.bias"), vec![e], Init::Zeros),
            });
        }
        let lnf_g = push("ln_f.gamma".into(), vec![e], Init::Ones);
        let lnf_b = push("ln_f.beta".into(), vec![e], Init::Zeros);
        let head_w = push("head.weight".into(), vec![e, cfg.head.output_width()], Init::Normal(std));
        let head_b = push("head.bias".into(), vec![cfg.head.output_width()], Init::Zeros);
        let ids = Ids { rb_w, rb_b, x_w, x_b, pos, time, blocks, lnf_g, lnf_b, head_w, head_b };
        (Self { specs, total, ids }, inits)
    }

    pub fn new(cfg: &ModelConfig) -> Self {
        Self::build(cfg).0
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn find(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    pub(crate) fn range(&self, id: usize) -> std::ops::Range<usize> {
        let s = &self.specs[id];
        s.offset..s.offset + s.numel()
    }

    pub(crate) fn mat<'a, F>(&self, buf: &'a [F], id: usize) -> ArrayView2<'a, F> {
        let s = &self.specs[id];
        let (r, c) = match s.shape[..] {
            [r, c] => (r, c),
            [n] => (1, n),
            _ => unreachable!("tensors are 1-d or 2-d"),
        };
        ArrayView2::from_shape((r, c), &buf[self.range(id)]).expect("layout matches buffer")
    }

    pub(crate) fn vec<'a, F>(&self, buf: &'a [F], id: usize) -> ArrayView1<'a, F> {
        ArrayView1::from(&buf[self.range(id)])
    }

    /// Adds `src` (any shape with the right element count, standard order)
    /// into the tensor `id` of `buf`.
    pub(crate) fn accumulate<F: Real>(&self, buf: &mut [F], id: usize, src: impl IntoIterator<Item = F>) {
        let range = self.range(id);
        let mut n = 0;
        for (d, s) in buf[range.clone()].iter_mut().zip(src) {
            *d += s;
            n += 1;
        }
        debug_assert_eq!(n, range.len());
    }
}

/// Weights plus configuration of the sequence model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<F: Real = f32> {
    config: ModelConfig,
    layout: ParamLayout,
    params: Vec<F>,
}

/// Gradient buffer with the layout of its model.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<F: Real = f32> {
    pub values: Vec<F>,
}

impl<F: Real> Gradients<F> {
    pub fn zeros(n: usize) -> Self {
        Self { values: vec![F::zero(); n] }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
    }

    pub fn add_assign(&mut self, other: &Gradients<F>) {
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }
}

/// Gaussian initialization (std 0.02, residual projections shrunk by
/// `1/sqrt(2 n_layers)`), deterministic in `seed`.
pub fn init_model<F: Real>(config: ModelConfig, seed: u64) -> Result<ModelState<F>> {
    config.validate()?;
    let (layout, inits) = ParamLayout::build(&config);
    let mut rng = rng_from(seed);
    let mut params = vec![F::zero(); layout.total];
    for (spec, init) in layout.specs.iter().zip(inits) {
        let slot = &mut params[spec.offset..spec.offset + spec.numel()];
        match init {
            Init::Zeros => {}
            Init::Ones => slot.iter_mut().for_each(|v| *v = F::one()),
            Init::Normal(std) => {
                let normal = Normal::new(0.0, std).expect("positive std");
                slot.iter_mut().for_each(|v| *v = F::of(normal.sample(&mut rng)));
            }
        }
    }
    Ok(ModelState { config, layout, params })
}

impl<F: Real> ModelState<F> {
    pub(crate) fn from_parts(config: ModelConfig, params: Vec<F>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.total {
            return Err(Error::Format(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    /// Order-sensitive checksum of the raw parameter bits.
    pub fn checksum(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in &self.params {
            h.update(v.as_f64().to_le_bytes());
        }
        u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
    }

    /// Converts the weights to another float type.
    pub fn cast<G: Real>(&self) -> ModelState<G> {
        ModelState {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|v| G::of(v.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(e: usize, h: usize, l: usize) -> ModelConfig {
        let mut c = ModelConfig::new(HeadKind::Continuous { dim: 2 }, h, l, 32, 64);
        c.embed_dim = e;
        c
    }

    #[test]
    fn init_is_deterministic() {
        let a: ModelState<f32> = init_model(cfg(32, 4, 2), 9).unwrap();
        let b: ModelState<f32> = init_model(cfg(32, 4, 2), 9).unwrap();
        let c: ModelState<f32> = init_model(cfg(32, 4, 2), 10).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        // E=128, 4 heads, 8 layers, C=32, T=64, d=2:
        // budget embed 1*128+128, point embed 2*128+128, slots 64*128,
        // timesteps 64*128, per block 2*128 + 128*384+384 + 128*128+128
        // + 2*128 + 128*512+512 + 512*128+128, final norm 256, head 128*2+2.
        let block = 256 + 128 * 384 + 384 + 128 * 128 + 128 + 256 + 128 * 512 + 512 + 512 * 128 + 128;
        let expected = 256 + 384 + 64 * 128 + 64 * 128 + 8 * block + 256 + 258;
        let m: ModelState<f32> = init_model(cfg(128, 4, 8), 0).unwrap();
        assert_eq!(m.parameter_count(), expected);
        assert_eq!(m.config().parameter_count(), expected);
    }

    #[test]
    fn rejects_indivisible_heads() {
        assert!(matches!(init_model::<f32>(cfg(127, 4, 1), 0), Err(Error::Config(_))));
        let mut c = cfg(32, 4, 1);
        c.context_len = 65;
        assert!(init_model::<f32>(c, 0).is_err());
    }

    #[test]
    fn residual_projections_are_shrunk() {
        let m: ModelState<f64> = init_model(cfg(64, 4, 8), 1).unwrap();
        let std_of = |name: &str| {
            let s = m.layout().find(name).unwrap();
            let v = &m.params()[s.offset..s.offset + s.numel()];
            (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
        };
        assert!((std_of("blocks.0.attn.qkv.weight") - 0.02).abs() < 0.002);
        assert!((std_of("blocks.0.mlp.proj.weight") - 0.005).abs() < 0.0006);
    }
}
