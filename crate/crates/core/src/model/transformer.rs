//! Batched forward pass, loss, and hand-written reverse pass.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::{Gradients, HeadKind, ModelState, Real};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// A batch of windows, already mapped into network units.
///
/// Row `b * steps + t` of the per-step arrays belongs to window `b`, step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<F: Real> {
    pub windows: usize,
    pub steps: usize,
    /// Scaled budgets, one per step.
    pub budgets: Vec<F>,
    /// Point-token inputs, `(windows * steps) x input_width`.
    pub points: Array2<F>,
    /// Zero-based absolute timestep of every step.
    pub timesteps: Vec<usize>,
}

/// Training targets for every step of a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets<F: Real> {
    /// `(windows * steps) x dim` coordinates in network units.
    Continuous(Array2<F>),
    /// `(windows * steps) x dim` symbol indices.
    Discrete(Array2<usize>),
}

/// Per-step predictions: means (`rows x dim`) or logits (`rows x dim*vocab`).
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<F: Real> {
    pub predictions: Array2<F>,
}

struct LnCache<F: Real> {
    xhat: Array2<F>,
    rstd: Array1<F>,
}

struct BlockCache<F: Real> {
    ln1: LnCache<F>,
    a1: Array2<F>,
    qkv: Array2<F>,
    probs: Vec<Array2<F>>,
    att: Array2<F>,
    ln2: LnCache<F>,
    a2: Array2<F>,
    fc: Array2<F>,
    act: Array2<F>,
}

pub(crate) struct Cache<F: Real> {
    blocks: Vec<BlockCache<F>>,
    lnf: LnCache<F>,
    z_sel: Array2<F>,
}

fn layer_norm<F: Real>(x: &Array2<F>, g: ArrayView2<F>, b: ArrayView2<F>) -> (Array2<F>, LnCache<F>) {
    let e = F::of(x.ncols() as f64);
    let eps = F::of(LN_EPS);
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / e;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<F>() / e;
        *r = F::one() / (var + eps).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| v * rs);
    }
    let y = &xhat * &g + &b;
    (y, LnCache { xhat, rstd })
}

/// Returns dx; accumulates dgamma/dbeta.
fn layer_norm_back<F: Real>(
    dy: &Array2<F>,
    cache: &LnCache<F>,
    g: ArrayView2<F>,
    dg: &mut Array1<F>,
    db: &mut Array1<F>,
) -> Array2<F> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let e = F::of(dy.ncols() as f64);
    let mut dx = dy * &g;
    for ((mut row, xh), &rs) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.rstd) {
        let mean_d = row.sum() / e;
        let mean_dx = row.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>() / e;
        Zip::from(&mut row).and(&xh).for_each(|d, &x| *d = rs * (*d - mean_d - x * mean_dx));
    }
    dx
}

fn gelu<F: Real>(x: F) -> F {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + F::of(0.044715) * x * x * x);
    F::of(0.5) * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let k = F::of(0.044715);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let half = F::of(0.5);
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * k * x * x)
}

fn add_bias<F: Real>(m: &mut Array2<F>, b: ArrayView2<F>) {
    *m += &b;
}

fn softmax_inplace<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl<F: Real> ModelState<F> {
    fn check_batch(&self, batch: &Batch<F>) -> Result<()> {
        let cfg = &self.config;
        if batch.steps > cfg.context_len {
            return Err(Error::Context { len: batch.steps, max: cfg.context_len });
        }
        let rows = batch.windows * batch.steps;
        if batch.budgets.len() != rows
            || batch.timesteps.len() != rows
            || batch.points.dim() != (rows, cfg.head.input_width())
        {
            return Err(Error::Config("batch arrays disagree with windows x steps".into()));
        }
        if let Some(&t) = batch.timesteps.iter().find(|&&t| t >= cfg.max_timestep) {
            return Err(Error::Config(format!("timestep {t} beyond max_timestep {}", cfg.max_timestep)));
        }
        Ok(())
    }

    /// Predictions for every step of the batch.
    pub fn forward(&self, batch: &Batch<F>) -> Result<ForwardOutput<F>> {
        self.check_batch(batch)?;
        Ok(ForwardOutput { predictions: self.forward_cached(batch).0 })
    }

    fn embed(&self, batch: &Batch<F>) -> Array2<F> {
        let lay = &self.layout;
        let ids = &lay.ids;
        let p = &self.params[..];
        let e = self.config.embed_dim;
        let (nw, l) = (batch.windows, batch.steps);
        let n = 2 * l;
        let x_emb = batch.points.dot(&lay.mat(p, ids.x_w)) + &lay.vec(p, ids.x_b);
        let rb_w = lay.vec(p, ids.rb_w);
        let rb_b = lay.vec(p, ids.rb_b);
        let pos = lay.mat(p, ids.pos);
        let time = lay.mat(p, ids.time);
        let mut h = Array2::zeros((nw * n, e));
        for w in 0..nw {
            for t in 0..l {
                let r = w * l + t;
                let ts = time.row(batch.timesteps[r]);
                let budget = batch.budgets[r];
                let mut row_r = h.row_mut(w * n + 2 * t);
                Zip::from(&mut row_r)
                    .and(&rb_w)
                    .and(&rb_b)
                    .and(&pos.row(2 * t))
                    .and(&ts)
                    .for_each(|o, &wr, &br, &ps, &tm| *o = wr * budget + br + ps + tm);
                let mut row_x = h.row_mut(w * n + 2 * t + 1);
                Zip::from(&mut row_x)
                    .and(&x_emb.row(r))
                    .and(&pos.row(2 * t + 1))
                    .and(&ts)
                    .for_each(|o, &xe, &ps, &tm| *o = xe + ps + tm);
            }
        }
        h
    }

    pub(crate) fn forward_cached(&self, batch: &Batch<F>) -> (Array2<F>, Cache<F>) {
        let cfg = &self.config;
        let lay = &self.layout;
        let p = &self.params[..];
        let e = cfg.embed_dim;
        let nh = cfg.n_heads;
        let hd = cfg.head_dim();
        let (nw, l) = (batch.windows, batch.steps);
        let n = 2 * l;
        let scale = F::of(1.0 / (hd as f64).sqrt());

        let mut h = self.embed(batch);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for ids in &lay.ids.blocks {
            let (a1, ln1) = layer_norm(&h, lay.mat(p, ids.ln1_g), lay.mat(p, ids.ln1_b));
            let mut qkv = a1.dot(&lay.mat(p, ids.qkv_w));
            add_bias(&mut qkv, lay.mat(p, ids.qkv_b));
            let mut att = Array2::zeros((nw * n, e));
            let mut probs = Vec::with_capacity(nw * nh);
            for w in 0..nw {
                let rows = w * n..(w + 1) * n;
                for hh in 0..nh {
                    let c = hh * hd;
                    let q = qkv.slice(s![rows.clone(), c..c + hd]);
                    let k = qkv.slice(s![rows.clone(), e + c..e + c + hd]);
                    let v = qkv.slice(s![rows.clone(), 2 * e + c..2 * e + c + hd]);
                    let mut sc = q.dot(&k.t());
                    for (i, mut row) in sc.rows_mut().into_iter().enumerate() {
                        let row = row.as_slice_mut().expect("owned row is contiguous");
                        for v in row[..=i].iter_mut() {
                            *v *= scale;
                        }
                        for v in row[i + 1..].iter_mut() {
                            *v = F::neg_infinity();
                        }
                        softmax_inplace(row);
                    }
                    att.slice_mut(s![rows.clone(), c..c + hd]).assign(&sc.dot(&v));
                    probs.push(sc);
                }
            }
            let mut y = att.dot(&lay.mat(p, ids.proj_w));
            add_bias(&mut y, lay.mat(p, ids.proj_b));
            h += &y;

            let (a2, ln2) = layer_norm(&h, lay.mat(p, ids.ln2_g), lay.mat(p, ids.ln2_b));
            let mut fc = a2.dot(&lay.mat(p, ids.fc_w));
            add_bias(&mut fc, lay.mat(p, ids.fc_b));
            let act = fc.mapv(gelu);
            let mut m = act.dot(&lay.mat(p, ids.out_w));
            add_bias(&mut m, lay.mat(p, ids.out_b));
            h += &m;
            blocks.push(BlockCache { ln1, a1, qkv, probs, att, ln2, a2, fc, act });
        }
        let ids = &lay.ids;
        let (z, lnf) = layer_norm(&h, lay.mat(p, ids.lnf_g), lay.mat(p, ids.lnf_b));
        let mut z_sel = Array2::zeros((nw * l, e));
        for w in 0..nw {
            for t in 0..l {
                z_sel.row_mut(w * l + t).assign(&z.row(w * n + 2 * t));
            }
        }
        let mut out = z_sel.dot(&lay.mat(p, ids.head_w));
        add_bias(&mut out, lay.mat(p, ids.head_b));
        (out, Cache { blocks, lnf, z_sel })
    }

    /// Reverse pass from `d_out` (gradient of the loss w.r.t. predictions).
    pub(crate) fn backward(&self, batch: &Batch<F>, cache: &Cache<F>, d_out: &Array2<F>) -> Gradients<F> {
        let cfg = &self.config;
        let lay = &self.layout;
        let ids = &lay.ids;
        let p = &self.params[..];
        let e = cfg.embed_dim;
        let nh = cfg.n_heads;
        let hd = cfg.head_dim();
        let (nw, l) = (batch.windows, batch.steps);
        let n = 2 * l;
        let scale = F::of(1.0 / (hd as f64).sqrt());
        let mut grads = Gradients::zeros(lay.total());
        let g = &mut grads.values;

        // Head.
        lay.accumulate(g, ids.head_w, cache.z_sel.t().dot(d_out));
        lay.accumulate(g, ids.head_b, d_out.sum_axis(Axis(0)));
        let dz_sel = d_out.dot(&lay.mat(p, ids.head_w).t());
        let mut dz = Array2::zeros((nw * n, e));
        for w in 0..nw {
            for t in 0..l {
                dz.row_mut(w * n + 2 * t).assign(&dz_sel.row(w * l + t));
            }
        }
        let mut dgam = Array1::zeros(e);
        let mut dbet = Array1::zeros(e);
        let mut dh = layer_norm_back(&dz, &cache.lnf, lay.mat(p, ids.lnf_g), &mut dgam, &mut dbet);
        lay.accumulate(g, ids.lnf_g, dgam);
        lay.accumulate(g, ids.lnf_b, dbet);

        for (bids, bc) in ids.blocks.iter().zip(&cache.blocks).rev() {
            // MLP branch.
            lay.accumulate(g, bids.out_w, bc.act.t().dot(&dh));
            lay.accumulate(g, bids.out_b, dh.sum_axis(Axis(0)));
            let mut dfc = dh.dot(&lay.mat(p, bids.out_w).t());
            Zip::from(&mut dfc).and(&bc.fc).for_each(|d, &x| *d = *d * gelu_grad(x));
            lay.accumulate(g, bids.fc_w, bc.a2.t().dot(&dfc));
            lay.accumulate(g, bids.fc_b, dfc.sum_axis(Axis(0)));
            let da2 = dfc.dot(&lay.mat(p, bids.fc_w).t());
            let mut dgam = Array1::zeros(e);
            let mut dbet = Array1::zeros(e);
            dh += &layer_norm_back(&da2, &bc.ln2, lay.mat(p, bids.ln2_g), &mut dgam, &mut dbet);
            lay.accumulate(g, bids.ln2_g, dgam);
            lay.accumulate(g, bids.ln2_b, dbet);

            // Attention branch.
            lay.accumulate(g, bids.proj_w, bc.att.t().dot(&dh));
            lay.accumulate(g, bids.proj_b, dh.sum_axis(Axis(0)));
            let datt = dh.dot(&lay.mat(p, bids.proj_w).t());
            let mut dqkv = Array2::zeros((nw * n, 3 * e));
            for w in 0..nw {
                let rows = w * n..(w + 1) * n;
                for hh in 0..nh {
                    let c = hh * hd;
                    let pm = &bc.probs[w * nh + hh];
                    let q = bc.qkv.slice(s![rows.clone(), c..c + hd]);
                    let k = bc.qkv.slice(s![rows.clone(), e + c..e + c + hd]);
                    let v = bc.qkv.slice(s![rows.clone(), 2 * e + c..2 * e + c + hd]);
                    let d_o = datt.slice(s![rows.clone(), c..c + hd]);
                    let mut ds = d_o.dot(&v.t());
                    let dv = pm.t().dot(&d_o);
                    for (mut drow, prow) in ds.rows_mut().into_iter().zip(pm.rows()) {
                        let dot: F = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                        Zip::from(&mut drow).and(&prow).for_each(|d, &pv| *d = pv * (*d - dot) * scale);
                    }
                    let dq = ds.dot(&k);
                    let dk = ds.t().dot(&q);
                    dqkv.slice_mut(s![rows.clone(), c..c + hd]).assign(&dq);
                    dqkv.slice_mut(s![rows.clone(), e + c..e + c + hd]).assign(&dk);
                    dqkv.slice_mut(s![rows.clone(), 2 * e + c..2 * e + c + hd]).assign(&dv);
                }
            }
            lay.accumulate(g, bids.qkv_w, bc.a1.t().dot(&dqkv));
            lay.accumulate(g, bids.qkv_b, dqkv.sum_axis(Axis(0)));
            let da1 = dqkv.dot(&lay.mat(p, bids.qkv_w).t());
            let mut dgam = Array1::zeros(e);
            let mut dbet = Array1::zeros(e);
            dh += &layer_norm_back(&da1, &bc.ln1, lay.mat(p, bids.ln1_g), &mut dgam, &mut dbet);
            lay.accumulate(g, bids.ln1_g, dgam);
            lay.accumulate(g, bids.ln1_b, dbet);
        }

        // Embeddings.
        let mut d_rb_w = Array1::zeros(e);
        let mut d_rb_b = Array1::zeros(e);
        let mut d_x = Array2::zeros((nw * l, e));
        let mut d_pos = Array2::zeros((n, e));
        let mut d_time = Array2::<F>::zeros((cfg.max_timestep, e));
        for w in 0..nw {
            for t in 0..l {
                let r = w * l + t;
                let row_r = dh.row(w * n + 2 * t);
                let row_x = dh.row(w * n + 2 * t + 1);
                d_rb_w.scaled_add(batch.budgets[r], &row_r);
                d_rb_b += &row_r;
                d_x.row_mut(r).assign(&row_x);
                let mut pr = d_pos.row_mut(2 * t);
                pr += &row_r;
                let mut px = d_pos.row_mut(2 * t + 1);
                px += &row_x;
                let mut tm = d_time.row_mut(batch.timesteps[r]);
                tm += &row_r;
                tm += &row_x;
            }
        }
        lay.accumulate(g, ids.rb_w, d_rb_w);
        lay.accumulate(g, ids.rb_b, d_rb_b);
        lay.accumulate(g, ids.x_w, batch.points.t().dot(&d_x));
        lay.accumulate(g, ids.x_b, d_x.sum_axis(Axis(0)));
        // Slots beyond this window's length get zero gradient.
        let mut d_pos_full = Array2::zeros((2 * cfg.context_len, e));
        d_pos_full.slice_mut(s![..n, ..]).assign(&d_pos);
        lay.accumulate(g, ids.pos, d_pos_full);
        lay.accumulate(g, ids.time, d_time);
        grads
    }

    /// Loss and gradient. The loss is a sum over this batch's terms divided
    /// by `normalizer` (defaults to the batch's own term count, i.e. a mean).
    pub fn loss_and_grad(
        &self,
        batch: &Batch<F>,
        targets: &Targets<F>,
        normalizer: Option<usize>,
    ) -> Result<(f64, Gradients<F>)> {
        self.check_batch(batch)?;
        let (out, cache) = self.forward_cached(batch);
        let count = normalizer.unwrap_or(out.nrows() * self.config.head.dim());
        let (loss, d_out) = loss_terms(&self.config.head, &out, targets, count)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { loss, epoch: 0, batch: 0, windows: batch.windows });
        }
        Ok((loss, self.backward(batch, &cache, &d_out)))
    }
}

/// Mean squared error (continuous) or mean cross-entropy (discrete) over all
/// steps and coordinates.
pub fn loss<F: Real>(head: &HeadKind, predictions: &Array2<F>, targets: &Targets<F>) -> Result<f64> {
    let count = predictions.nrows() * head.dim();
    Ok(loss_terms(head, predictions, targets, count)?.0)
}

fn loss_terms<F: Real>(
    head: &HeadKind,
    out: &Array2<F>,
    targets: &Targets<F>,
    count: usize,
) -> Result<(f64, Array2<F>)> {
    let inv = F::of(1.0 / count as f64);
    match (head, targets) {
        (HeadKind::Continuous { dim }, Targets::Continuous(t)) => {
            if t.dim() != (out.nrows(), *dim) || out.ncols() != *dim {
                return Err(Error::Config("target shape does not match predictions".into()));
            }
            let diff = out - t;
            let loss = diff.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / count as f64;
            Ok((loss, diff.mapv(|v| v * F::of(2.0) * inv)))
        }
        (HeadKind::Discrete { dim, vocab }, Targets::Discrete(t)) => {
            if t.dim() != (out.nrows(), *dim) || out.ncols() != dim * vocab {
                return Err(Error::Config("target shape does not match predictions".into()));
            }
            let mut grad = out.clone();
            let mut loss = 0.0;
            for (mut row, trow) in grad.rows_mut().into_iter().zip(t.rows()) {
                let row = row.as_slice_mut().expect("owned row is contiguous");
                for (k, &sym) in trow.iter().enumerate() {
                    if sym >= *vocab {
                        return Err(Error::Domain(format!("target symbol {sym} outside vocabulary {vocab}")));
                    }
                    let chunk = &mut row[k * vocab..(k + 1) * vocab];
                    softmax_inplace(chunk);
                    loss -= chunk[sym].as_f64().max(f64::MIN_POSITIVE).ln();
                    chunk[sym] -= F::one();
                    chunk.iter_mut().for_each(|v| *v *= inv);
                }
            }
            Ok((loss / count as f64, grad))
        }
        _ => Err(Error::Config("target kind does not match the model head".into())),
    }
}

/// Row-wise softmax over each `vocab`-wide group of logits.
pub(crate) fn group_softmax<F: Real>(logits: &[F], vocab: usize) -> Vec<F> {
    let mut out = logits.to_vec();
    for chunk in out.chunks_mut(vocab) {
        softmax_inplace(chunk);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::{init_model, ModelConfig};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(head: HeadKind, e: usize, heads: usize, layers: usize, c: usize, t: usize) -> ModelConfig {
        let mut cfg = ModelConfig::new(head.clone(), heads, layers, c, t);
        cfg.embed_dim = e;
        cfg.scaling = super::super::InputScaling::identity(head.dim());
        cfg
    }

    fn random_batch(rng: &mut ChaCha8Rng, head: &HeadKind, windows: usize, steps: usize, start: usize) -> (Batch<f64>, Targets<f64>) {
        let rows = windows * steps;
        let budgets = (0..rows).map(|_| rng.gen_range(0.0..1.0)).collect();
        let timesteps = (0..rows).map(|r| start + r % steps).collect();
        match *head {
            HeadKind::Continuous { dim } => {
                let points = Array2::from_shape_fn((rows, dim), |_| rng.gen_range(-1.0..1.0));
                let targets = Array2::from_shape_fn((rows, dim), |_| rng.gen_range(-1.0..1.0));
                (Batch { windows, steps, budgets, points, timesteps }, Targets::Continuous(targets))
            }
            HeadKind::Discrete { dim, vocab } => {
                let syms = Array2::from_shape_fn((rows, dim), |_| rng.gen_range(0..vocab));
                let mut points = Array2::zeros((rows, dim * vocab));
                for ((r, k), &s) in syms.indexed_iter() {
                    points[[r, k * vocab + s]] = 1.0;
                }
                let targets = Array2::from_shape_fn((rows, dim), |_| rng.gen_range(0..vocab));
                (Batch { windows, steps, budgets, points, timesteps }, Targets::Discrete(targets))
            }
        }
    }

    fn check_gradients(head: HeadKind, seed: u64) {
        let cfg = tiny_config(head.clone(), 8, 2, 1, 2, 4);
        let mut model: ModelState<f64> = init_model(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        // Larger weights so every path carries signal.
        for v in model.params_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
        let (batch, targets) = random_batch(&mut rng, &head, 3, 2, 1);
        let (_, grads) = model.loss_and_grad(&batch, &targets, None).unwrap();
        let eps = 1e-4;
        let n = model.parameter_count();
        let mut worst = 0.0_f64;
        for _ in 0..100 {
            let i = rng.gen_range(0..n);
            let orig = model.params()[i];
            model.params_mut()[i] = orig + eps;
            let lp = loss(&model.config.head, &model.forward(&batch).unwrap().predictions, &targets).unwrap();
            model.params_mut()[i] = orig - eps;
            let lm = loss(&model.config.head, &model.forward(&batch).unwrap().predictions, &targets).unwrap();
            model.params_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let analytic = grads.values[i];
            let denom = numeric.abs().max(analytic.abs()).max(1e-6);
            let rel = (numeric - analytic).abs() / denom;
            worst = worst.max(rel);
            assert!(rel < 1e-4, "param {i}: analytic {analytic} numeric {numeric} rel {rel}");
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn continuous_gradients_match_finite_differences() {
        check_gradients(HeadKind::Continuous { dim: 1 }, 1);
        check_gradients(HeadKind::Continuous { dim: 1 }, 2);
    }

    #[test]
    fn discrete_gradients_match_finite_differences() {
        check_gradients(HeadKind::Discrete { dim: 2, vocab: 3 }, 3);
    }

    #[test]
    fn loss_values() {
        let head = HeadKind::Continuous { dim: 2 };
        let p = Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(loss(&head, &p, &Targets::Continuous(p.clone())).unwrap(), 0.0);
        // Two steps: errors (1, 0) and (0, 2): (1 + 0 + 0 + 4) / 4.
        let t = Array2::from_shape_vec((2, 2), vec![0.0, 2.0, 3.0, 2.0]).unwrap();
        assert!((loss(&head, &p, &Targets::Continuous(t)).unwrap() - 1.25).abs() < 1e-12);

        let head = HeadKind::Discrete { dim: 1, vocab: 4 };
        let logits = Array2::<f64>::zeros((3, 4));
        let t = Array2::from_shape_vec((3, 1), vec![0, 2, 3]).unwrap();
        assert!((loss(&head, &logits, &Targets::Discrete(t)).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn context_overflow_is_rejected() {
        let head = HeadKind::Continuous { dim: 1 };
        let model: ModelState<f64> = init_model(tiny_config(head.clone(), 8, 2, 1, 2, 4), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (batch, _) = random_batch(&mut rng, &head, 1, 3, 0);
        assert!(matches!(model.forward(&batch), Err(Error::Context { len: 3, max: 2 })));
    }

    #[test]
    fn future_tokens_do_not_leak() {
        let head = HeadKind::Continuous { dim: 2 };
        let model: ModelState<f64> = init_model(tiny_config(head.clone(), 16, 4, 2, 6, 10), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (batch, _) = random_batch(&mut rng, &head, 1, 6, 2);
            let base = model.forward(&batch).unwrap().predictions;
            let t = rng.gen_range(0..6);
            let mut pert = batch.clone();
            // Point x_t and everything after step t may change freely.
            for r in t..6 {
                for k in 0..2 {
                    pert.points[[r, k]] = rng.gen_range(-3.0..3.0);
                }
                if r > t {
                    pert.budgets[r] = rng.gen_range(-3.0..3.0);
                }
            }
            let out = model.forward(&pert).unwrap().predictions;
            for r in 0..=t {
                for k in 0..2 {
                    assert!((out[[r, k]] - base[[r, k]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn logits_softmax_rows_sum_to_one() {
        let head = HeadKind::Discrete { dim: 3, vocab: 5 };
        let model: ModelState<f64> = init_model(tiny_config(head.clone(), 16, 2, 1, 4, 4), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (batch, _) = random_batch(&mut rng, &head, 2, 4, 0);
        let out = model.forward(&batch).unwrap().predictions;
        for row in out.rows() {
            let probs = group_softmax(row.as_slice().unwrap(), 5);
            for chunk in probs.chunks(5) {
                assert!((chunk.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn masked_future_parameters_get_zero_gradient() {
        // Single-step loss: slots beyond step 0 and unused timesteps get no gradient.
        let head = HeadKind::Continuous { dim: 1 };
        let model: ModelState<f64> = init_model(tiny_config(head.clone(), 8, 2, 1, 3, 5), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (batch, targets) = random_batch(&mut rng, &head, 2, 1, 0);
        let (_, grads) = model.loss_and_grad(&batch, &targets, None).unwrap();
        let lay = model.layout();
        let pos = lay.find("embed.slot").unwrap();
        let e = 8;
        // Slot 0 (R_1) carries gradient; slot 1 (x_1) cannot affect the R_1 output.
        let slot = |k: usize| &grads.values[pos.offset + k * e..pos.offset + (k + 1) * e];
        assert!(slot(0).iter().any(|&v| v != 0.0));
        assert!(slot(1).iter().all(|&v| v == 0.0));
        let xw = lay.find("embed.point.weight").unwrap();
        assert!(grads.values[xw.offset..xw.offset + xw.numel()].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn perfect_predictions_zero_head_gradient() {
        let head = HeadKind::Continuous { dim: 2 };
        let model: ModelState<f64> = init_model(tiny_config(head.clone(), 8, 2, 1, 3, 5), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (batch, _) = random_batch(&mut rng, &head, 2, 3, 0);
        let preds = model.forward(&batch).unwrap().predictions;
        let (l, grads) = model.loss_and_grad(&batch, &Targets::Continuous(preds), None).unwrap();
        assert_eq!(l, 0.0);
        let hw = model.layout().find("head.weight").unwrap();
        assert!(grads.values[hw.offset..hw.offset + hw.numel()].iter().all(|&v| v == 0.0));
    }
}
