//! Training: softmax cross-entropy, backpropagation through time, RMSProp
//! with momentum, the step-decay learning-rate schedule, the epoch loop and
//! a finite-difference gradient checker.

use std::io::Write as _;
use std::path::Path;

use ndarray::{concatenate, Array1, Array2, ArrayView1, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bench::f_measure;
use crate::error::{Error, Result};
use crate::grid::{curvature_vjp, dirac, heaviside, EpsParam, Field};
use crate::rls::{
    forward_batch, forward_frozen, init_params, predict_mask, stack_fields, ForwardCache, ParamSet,
    RlsConfig, CLASSES,
};
use crate::seed;
use crate::synth::Sample;

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Gradients share the parameter layout.
pub type GradSet = ParamSet;

/// Anything the optimizer can update: an ordered list of flat blocks.
pub trait Trainable: Clone {
    fn blocks(&self) -> Vec<(&'static str, &[f64])>;
    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])>;

    fn scale(&mut self, factor: f64) {
        for (_, b) in self.blocks_mut() {
            b.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

impl Trainable for ParamSet {
    fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        ParamSet::blocks(self)
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        ParamSet::blocks_mut(self)
    }
}

/// How the backward pass treats the step input's dependence on `φ_{t-1}`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BpttMode {
    /// `x_t` is treated as data: no gradient through curvature or region means.
    #[default]
    Truncated,
    /// Differentiates curvature and the region-mean quotients as well.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub eta0: f64,
    pub eta_floor: f64,
    pub halve_every: usize,
    pub epochs: usize,
    pub rho_m: f64,
    pub rms_decay: f64,
    pub rms_eps: f64,
    /// Per-block L2 cap applied to gradients before the RMS accumulator.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub bptt: BpttMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta0: 1e-3,
            eta_floor: 1e-5,
            halve_every: 200,
            epochs: 500,
            rho_m: 0.9,
            rms_decay: 0.9,
            rms_eps: 1e-8,
            grad_clip: 1.0,
            batch_size: 1,
            seed: 0,
            bptt: BpttMode::Truncated,
        }
    }
}

impl TrainConfig {
    /// The long schedule: 5000 epochs.
    pub fn full_scale() -> Self {
        TrainConfig {
            epochs: 5000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train.{m}")));
        if !(self.eta_floor > 0.0 && self.eta_floor <= self.eta0) {
            return bad("requires 0 < eta_floor <= eta0");
        }
        if !(0.0..1.0).contains(&self.rho_m) {
            return bad("rho_m must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.rms_decay) {
            return bad("rms_decay must be in [0, 1)");
        }
        if !(self.rms_eps > 0.0) {
            return bad("rms_eps must be > 0");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be > 0");
        }
        if self.halve_every == 0 {
            return bad("halve_every must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        Ok(())
    }
}

/// `max(eta_floor, eta0 · 0.5^⌊epoch / halve_every⌋)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let halvings = (epoch / cfg.halve_every.max(1)).min(4096) as i32;
    (cfg.eta0 * 0.5f64.powi(halvings)).max(cfg.eta_floor)
}

/// Pixel-major one-hot targets (`[1, 0]` background, `[0, 1]` foreground).
pub fn one_hot(mask: &[f64]) -> Vec<f64> {
    mask.iter()
        .flat_map(|&m| if m > 0.5 { [0.0, 1.0] } else { [1.0, 0.0] })
        .collect()
}

/// `−Σ_n Σ_k y_nk · log ŷ_nk` with `ŷ` floored at [`PROB_FLOOR`].
pub fn cross_entropy(y_hat: &[f64], y: &[f64]) -> Result<f64> {
    if y_hat.len() != y.len() || y.len() % CLASSES != 0 {
        return Err(Error::Dimension(format!(
            "cross_entropy: {} predictions vs {} targets",
            y_hat.len(),
            y.len()
        )));
    }
    Ok(-y
        .iter()
        .zip(y_hat)
        .map(|(&t, &p)| if t == 0.0 { 0.0 } else { t * p.clamp(PROB_FLOOR, 1.0).ln() })
        .sum::<f64>())
}

/// One-hot targets for an `N × B` mask batch, as `K·N × B`.
pub fn one_hot_batch(masks: &Array2<f64>) -> Array2<f64> {
    let (n, b) = masks.dim();
    Array2::from_shape_fn((CLASSES * n, b), |(r, c)| {
        let fg = masks[[r / CLASSES, c]] > 0.5;
        let k = r % CLASSES;
        if (k == 1) == fg {
            1.0
        } else {
            0.0
        }
    })
}

/// Summed cross-entropy over the batch.
pub fn batch_loss(y_hat: &Array2<f64>, targets: &Array2<f64>) -> f64 {
    Zip::from(y_hat)
        .and(targets)
        .fold(0.0, |acc, &p, &t| if t == 0.0 { acc } else { acc - t * p.clamp(PROB_FLOOR, 1.0).ln() })
}

fn column_field(a: &Array2<f64>, b: usize, h: usize, w: usize) -> Field {
    Field::from_vec(h, w, a.column(b).to_vec()).expect("grid column")
}

/// Reverse-mode gradients of the summed batch loss through the head and the
/// unrolled recurrence. `targets` is the one-hot `K·N × B` matrix.
pub fn backward(
    cache: &ForwardCache,
    targets: &Array2<f64>,
    params: &ParamSet,
    eps: EpsParam,
    mode: BpttMode,
) -> Result<GradSet> {
    let n = cache.height * cache.width;
    if targets.dim() != cache.y_hat.dim() {
        return Err(Error::Dimension(format!(
            "targets {:?} vs predictions {:?}",
            targets.dim(),
            cache.y_hat.dim()
        )));
    }
    if params.pixels() != n {
        return Err(Error::Dimension("cache and parameters disagree on grid size".into()));
    }

    let mut grads = params.zeros_like();
    let d_logits = &cache.y_hat - targets;
    grads.v = params.v.outer(d_logits.view(), cache.phi_last().view());
    grads.b_v = d_logits.sum_axis(Axis(1));
    let mut d_phi = params.v.apply_t(d_logits.view());

    let steps = cache.steps.len();
    let mut daz = Vec::with_capacity(steps);
    let mut dar = Vec::with_capacity(steps);
    let mut dao = Vec::with_capacity(steps);
    let mut dxs = Vec::with_capacity(steps);
    let mut gated = Vec::with_capacity(steps);

    for t in (0..steps).rev() {
        let s = &cache.steps[t];
        let prev = if t == 0 { &cache.phi0 } else { &cache.steps[t - 1].phi };

        let mut d_z = Array2::zeros(prev.raw_dim());
        let mut d_ao = Array2::zeros(prev.raw_dim());
        let mut d_prev = &d_phi * &s.z;
        Zip::from(&mut d_z)
            .and(&mut d_ao)
            .and(&d_phi)
            .and(prev)
            .and(&s.z)
            .and(&s.o)
            .for_each(|dz, dao, &g, &p, &z, &o| {
                *dz = g * (p - o) * z * (1.0 - z);
                *dao = g * (1.0 - z) * (1.0 - o * o);
            });

        let d_gated = params.w_o.apply_t(d_ao.view());
        let mut d_ar = Array2::zeros(prev.raw_dim());
        Zip::from(&mut d_ar)
            .and(&mut d_prev)
            .and(&d_gated)
            .and(prev)
            .and(&s.r)
            .for_each(|dar, dp, &dg, &p, &r| {
                *dp += dg * r;
                *dar = dg * p * r * (1.0 - r);
            });

        let mut dx = params.u_z.apply_t(d_z.view());
        dx += &params.u_r.apply_t(d_ar.view());
        dx += &params.u_o.apply_t(d_ao.view());

        d_prev += &params.w_z.apply_t(d_z.view());
        d_prev += &params.w_r.apply_t(d_ar.view());

        if mode == BpttMode::Full {
            d_prev += &drive_backward(cache, t, prev, &dx, params, eps);
        }

        gated.push(prev * &s.r);
        daz.push(d_z);
        dar.push(d_ar);
        dao.push(d_ao);
        dxs.push(dx);
        d_phi = d_prev;
    }
    // Collected newest-first; restore time order to pair with cached inputs.
    for v in [&mut daz, &mut dar, &mut dao, &mut dxs, &mut gated] {
        v.reverse();
    }

    let cat = |parts: Vec<ndarray::ArrayView2<f64>>| concatenate(Axis(1), &parts).expect("same rows");
    let prev_of = |t: usize| if t == 0 { cache.phi0.view() } else { cache.steps[t - 1].phi.view() };

    let xs = cat(cache.steps.iter().map(|s| s.x.view()).collect());
    let prevs = cat((0..steps).map(prev_of).collect());
    let fit_in = cat(cache.steps.iter().map(|s| s.fit_in.view()).collect());
    let fit_out = cat(cache.steps.iter().map(|s| s.fit_out.view()).collect());
    let daz = cat(daz.iter().map(|a| a.view()).collect());
    let dar = cat(dar.iter().map(|a| a.view()).collect());
    let dao = cat(dao.iter().map(|a| a.view()).collect());
    let dx = cat(dxs.iter().map(|a| a.view()).collect());
    let gated = cat(gated.iter().map(|a| a.view()).collect());

    grads.u_z = params.u_z.outer(daz.view(), xs.view());
    grads.w_z = params.w_z.outer(daz.view(), prevs.view());
    grads.b_z = daz.sum_axis(Axis(1));
    grads.u_r = params.u_r.outer(dar.view(), xs.view());
    grads.w_r = params.w_r.outer(dar.view(), prevs.view());
    grads.b_r = dar.sum_axis(Axis(1));
    grads.u_o = params.u_o.outer(dao.view(), xs.view());
    grads.w_o = params.w_o.outer(dao.view(), gated.view());
    grads.b_o = dao.sum_axis(Axis(1));
    let neg_dx = dx.mapv(|v| -v);
    grads.u_g = params.u_g.outer(neg_dx.view(), fit_in.view());
    grads.w_g = params.w_g.outer(dx.view(), fit_out.view());
    Ok(grads)
}

/// Gradient w.r.t. `φ_{t-1}` flowing through `x_t = κ(φ) − U_g(I−c1)² +
/// W_g(I−c2)²`, including the quotient-rule dependence of `c1`, `c2`.
fn drive_backward(
    cache: &ForwardCache,
    t: usize,
    prev: &Array2<f64>,
    dx: &Array2<f64>,
    params: &ParamSet,
    eps: EpsParam,
) -> Array2<f64> {
    let s = &cache.steps[t];
    let (h, w) = (cache.height, cache.width);
    let u = params.u_g.apply_t(dx.view());
    let v = params.w_g.apply_t(dx.view());
    let mut out = Array2::zeros(prev.raw_dim());
    for b in 0..prev.ncols() {
        let phi = column_field(prev, b, h, w);
        let up = column_field(dx, b, h, w);
        let mut col = Array1::from(curvature_vjp(&phi, &up).into_vec());

        let img = cache.images.column(b);
        let (c1, c2) = (s.c1[b], s.c2[b]);
        let mut d_c1 = 0.0;
        let mut d_c2 = 0.0;
        let mut s_in = 0.0;
        let mut s_out = 0.0;
        for k in 0..img.len() {
            d_c1 += 2.0 * u[[k, b]] * (img[k] - c1);
            d_c2 += -2.0 * v[[k, b]] * (img[k] - c2);
            let hv = heaviside(phi.values()[k], eps);
            s_in += hv;
            s_out += 1.0 - hv;
        }
        for k in 0..img.len() {
            let d = dirac(phi.values()[k], eps);
            col[k] += d_c1 * d * (img[k] - c1) / s_in - d_c2 * d * (img[k] - c2) / s_out;
        }
        out.column_mut(b).assign(&col);
    }
    out
}

/// Per-block optimizer buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub rms: Vec<Vec<f64>>,
    pub momentum: Vec<Vec<f64>>,
    /// Completed epochs.
    pub epoch: usize,
}

/// Written into checkpoints so a resumed run knows which update it continues.
pub const MOMENTUM_VARIANT: &str = "momentum-on-preconditioned-step";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptStateMeta {
    pub epoch: usize,
    pub lr: f64,
    pub rho_m: f64,
    pub rms_decay: f64,
    pub rms_eps: f64,
    pub grad_clip: f64,
    pub variant: String,
    pub blocks: Vec<(String, usize)>,
}

impl OptState {
    pub fn new<P: Trainable>(params: &P) -> Self {
        let zeros: Vec<Vec<f64>> = params.blocks().iter().map(|(_, b)| vec![0.0; b.len()]).collect();
        OptState {
            rms: zeros.clone(),
            momentum: zeros,
            epoch: 0,
        }
    }

    pub fn meta<P: Trainable>(&self, params: &P, cfg: &TrainConfig) -> OptStateMeta {
        OptStateMeta {
            epoch: self.epoch,
            lr: lr_schedule(self.epoch, cfg),
            rho_m: cfg.rho_m,
            rms_decay: cfg.rms_decay,
            rms_eps: cfg.rms_eps,
            grad_clip: cfg.grad_clip,
            variant: MOMENTUM_VARIANT.to_string(),
            blocks: params
                .blocks()
                .iter()
                .map(|(n, b)| (n.to_string(), b.len()))
                .collect(),
        }
    }

    /// Accumulators as little-endian `f64`: every RMS block, then every
    /// momentum block, in parameter order.
    pub fn buffers_to_bytes(&self) -> Vec<u8> {
        self.rms
            .iter()
            .chain(&self.momentum)
            .flatten()
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }

    pub fn from_parts<P: Trainable>(params: &P, meta: &OptStateMeta, bytes: &[u8]) -> Result<Self> {
        let mut state = OptState::new(params);
        let total: usize = state.rms.iter().map(Vec::len).sum::<usize>() * 2;
        if bytes.len() != total * 8 {
            return Err(Error::format(
                "optimizer buffers",
                format!("expected {} bytes, found {}", total * 8, bytes.len()),
            ));
        }
        let mut chunks = bytes.chunks_exact(8);
        for v in state.rms.iter_mut().chain(state.momentum.iter_mut()).flatten() {
            *v = f64::from_le_bytes(chunks.next().unwrap().try_into().unwrap());
        }
        state.epoch = meta.epoch;
        Ok(state)
    }
}

/// RMSProp with momentum on the preconditioned step, per block:
/// clip `g` to L2 norm `grad_clip`; `s ← ρ_s·s + (1−ρ_s)·g²`;
/// `m ← ρ_m·m + lr·g/√(s + ε)`; `θ ← θ − m`.
pub fn rmsprop_update<P: Trainable>(
    params: &mut P,
    grads: &P,
    opt: &mut OptState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let grad_blocks = grads.blocks();
    let mut param_blocks = params.blocks_mut();
    if grad_blocks.len() != param_blocks.len() || opt.rms.len() != param_blocks.len() {
        return Err(Error::Dimension("optimizer state does not match parameters".into()));
    }
    for (k, ((_, theta), (_, g))) in param_blocks.iter_mut().zip(&grad_blocks).enumerate() {
        if theta.len() != g.len() || opt.rms[k].len() != g.len() {
            return Err(Error::Dimension(format!("block {k} shape mismatch")));
        }
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let clip = if norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
        let rms = &mut opt.rms[k];
        let mom = &mut opt.momentum[k];
        for i in 0..g.len() {
            let gi = g[i] * clip;
            rms[i] = cfg.rms_decay * rms[i] + (1.0 - cfg.rms_decay) * gi * gi;
            mom[i] = cfg.rho_m * mom[i] + lr * gi / (rms[i] + cfg.rms_eps).sqrt();
            theta[i] -= mom[i];
        }
    }
    Ok(())
}

/// A model the epoch loop can train.
pub trait Model {
    type Params: Trainable;

    fn grid(&self) -> (usize, usize);

    /// Summed loss and summed gradients over the batch columns.
    fn loss_and_grad(
        &self,
        params: &Self::Params,
        images: &Array2<f64>,
        targets: &Array2<f64>,
    ) -> Result<(f64, Self::Params)>;

    /// `K·N × B` class probabilities.
    fn predict(&self, params: &Self::Params, images: &Array2<f64>) -> Result<Array2<f64>>;
}

/// The recurrent model with its unroll configuration and gradient mode.
#[derive(Clone, Debug)]
pub struct RlsModel {
    pub cfg: RlsConfig,
    pub mode: BpttMode,
}

impl Model for RlsModel {
    type Params = ParamSet;

    fn grid(&self) -> (usize, usize) {
        (self.cfg.height, self.cfg.width)
    }

    fn loss_and_grad(
        &self,
        params: &ParamSet,
        images: &Array2<f64>,
        targets: &Array2<f64>,
    ) -> Result<(f64, ParamSet)> {
        let cache = forward_batch(images, params, &self.cfg)?;
        let loss = batch_loss(&cache.y_hat, targets);
        let grads = backward(&cache, targets, params, self.cfg.epsilon, self.mode)?;
        Ok((loss, grads))
    }

    fn predict(&self, params: &ParamSet, images: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(forward_batch(images, params, &self.cfg)?.y_hat)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub val_fmeasure: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,mean_loss,val_fmeasure\n");
        for r in &self.rows {
            let val = r.val_fmeasure.map(|v| format!("{v:.6}")).unwrap_or_default();
            out.push_str(&format!("{},{:e},{:.9e},{}\n", r.epoch, r.lr, r.mean_loss, val));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn check_samples(samples: &[Sample], grid: (usize, usize)) -> Result<()> {
    for s in samples {
        if s.image.shape() != grid || s.mask.shape() != grid {
            return Err(Error::Dimension(format!(
                "sample {} is {}x{}, model grid is {}x{}",
                s.id,
                s.image.height(),
                s.image.width(),
                grid.0,
                grid.1
            )));
        }
    }
    Ok(())
}

/// Mean F-measure of thresholded predictions.
pub fn evaluate<M: Model>(model: &M, params: &M::Params, samples: &[Sample]) -> Result<f64> {
    let (h, w) = model.grid();
    let mut total = 0.0;
    for chunk in samples.chunks(32) {
        let images = stack_fields(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let y_hat = model.predict(params, &images)?;
        for (b, s) in chunk.iter().enumerate() {
            let mask = predict_mask(&y_hat.column(b).to_vec(), h, w)?;
            total += f_measure(&mask, &s.mask)?.f;
        }
    }
    Ok(total / samples.len() as f64)
}

/// Runs the epoch loop from `opt.epoch` up to `cfg.epochs`.
///
/// Each epoch visits the samples in a seeded shuffled order, in batches of
/// `batch_size`; the batch gradient is the mean over its samples.
pub fn fit<M: Model>(
    model: &M,
    params: &mut M::Params,
    opt: &mut OptState,
    samples: &[Sample],
    cfg: &TrainConfig,
    validation: Option<&[Sample]>,
    mut on_epoch: impl FnMut(&HistoryRow),
) -> Result<History> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_samples(samples, model.grid())?;
    if let Some(v) = validation {
        check_samples(v, model.grid())?;
    }
    let mut history = History::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    while opt.epoch < cfg.epochs {
        let epoch = opt.epoch;
        let lr = lr_schedule(epoch, cfg);
        order.sort_unstable();
        order.shuffle(&mut seed::rng(seed::derive(cfg.seed, &format!("epoch-{epoch}"))));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let images = stack_fields(&batch.iter().map(|&i| &samples[i].image).collect::<Vec<_>>())?;
            let masks = stack_fields(&batch.iter().map(|&i| &samples[i].mask).collect::<Vec<_>>())?;
            let targets = one_hot_batch(&masks);
            let (loss, mut grads) = model.loss_and_grad(params, &images, &targets)?;
            if !loss.is_finite() {
                return Err(Error::Invalid(format!("non-finite loss at epoch {epoch}")));
            }
            total += loss;
            grads.scale(1.0 / batch.len() as f64);
            rmsprop_update(params, &grads, opt, lr, cfg)?;
        }
        let val_fmeasure = match validation {
            Some(v) if !v.is_empty() => Some(evaluate(model, params, v)?),
            _ => None,
        };
        let row = HistoryRow {
            epoch,
            lr,
            mean_loss: total / samples.len() as f64,
            val_fmeasure,
        };
        on_epoch(&row);
        history.rows.push(row);
        opt.epoch += 1;
    }
    Ok(history)
}

/// Initializes parameters from `rls_cfg` and trains them.
pub fn train(
    samples: &[Sample],
    rls_cfg: &RlsConfig,
    cfg: &TrainConfig,
    validation: Option<&[Sample]>,
) -> Result<(ParamSet, History)> {
    rls_cfg.validate()?;
    let model = RlsModel {
        cfg: rls_cfg.clone(),
        mode: cfg.bptt,
    };
    let mut params = init_params(rls_cfg);
    let mut opt = OptState::new(&params);
    let history = fit(&model, &mut params, &mut opt, samples, cfg, validation, |_| {})?;
    Ok((params, history))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockCheck {
    pub name: &'static str,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockCheck>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }
}

/// Compares `analytic` with central differences of `loss` for every entry
/// of every block.
///
/// The relative error of an entry is its absolute discrepancy divided by the
/// largest gradient magnitude in the block (analytic or numeric), so entries
/// whose true gradient is near zero are judged on the block's scale rather
/// than on finite-difference roundoff.
pub fn compare_blocks<P: Trainable>(
    params: &P,
    analytic: &P,
    mut loss: impl FnMut(&P) -> f64,
    h: f64,
    tol: f64,
) -> GradCheckReport {
    let mut work = params.clone();
    let names: Vec<_> = params.blocks().iter().map(|(n, b)| (*n, b.len())).collect();
    let analytic_blocks = analytic.blocks();
    let mut blocks = Vec::with_capacity(names.len());
    for (k, (name, len)) in names.into_iter().enumerate() {
        let mut numeric = Vec::with_capacity(len);
        for i in 0..len {
            let orig = work.blocks()[k].1[i];
            work.blocks_mut()[k].1[i] = orig + h;
            let lp = loss(&work);
            work.blocks_mut()[k].1[i] = orig - h;
            let lm = loss(&work);
            work.blocks_mut()[k].1[i] = orig;
            numeric.push((lp - lm) / (2.0 * h));
        }
        let a = analytic_blocks[k].1;
        let scale = a
            .iter()
            .chain(&numeric)
            .fold(f64::MIN_POSITIVE, |m, v| m.max(v.abs()));
        let max_abs = a
            .iter()
            .zip(&numeric)
            .map(|(x, y)| {
                let d = (x - y).abs();
                if d.is_nan() {
                    f64::INFINITY
                } else {
                    d
                }
            })
            .fold(0.0, f64::max);
        blocks.push(BlockCheck {
            name,
            entries: len,
            max_rel_err: max_abs / scale,
            max_abs_err: max_abs,
        });
    }
    let passed = blocks.iter().all(|b| b.max_rel_err <= tol);
    GradCheckReport { blocks, tol, passed }
}

/// Random two-phase image with noise and its ground-truth mask.
pub fn random_instance(height: usize, width: usize, seed: u64) -> (Field, Field) {
    let mut rng = seed::rng(seed);
    let (ci, cj) = (
        rng.random_range(0.3..0.7) * height as f64,
        rng.random_range(0.3..0.7) * width as f64,
    );
    let radius = rng.random_range(0.2..0.35) * height.min(width) as f64;
    let mask = Field::from_fn(height, width, |i, j| {
        let d = ((i as f64 + 0.5 - ci).powi(2) + (j as f64 + 0.5 - cj).powi(2)).sqrt();
        if d <= radius {
            1.0
        } else {
            0.0
        }
    });
    let image = Field::from_fn(height, width, |i, j| {
        let base = if mask.get(i, j) > 0.5 { 0.75 } else { 0.25 };
        base + rng.random_range(-0.15..0.15)
    });
    (image, mask)
}

/// Finite-difference check of [`backward`] on a random instance.
///
/// In truncated mode the numeric side perturbs a forward pass whose
/// curvature and region means are frozen at their unperturbed values, which
/// is the function truncated backpropagation differentiates.
pub fn grad_check(rls_cfg: &RlsConfig, mode: BpttMode, h: f64, tol: f64, seed: u64) -> Result<GradCheckReport> {
    rls_cfg.validate()?;
    let (image, mask) = random_instance(rls_cfg.height, rls_cfg.width, seed::derive(seed, "instance"));
    let cfg = RlsConfig {
        seed: seed::derive(seed, "params"),
        ..rls_cfg.clone()
    };
    let mut params = init_params(&cfg);
    let mut rng = seed::rng(seed::derive(seed, "biases"));
    for (name, block) in params.blocks_mut() {
        if name.starts_with('b') {
            block.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
    let images = stack_fields(&[&image])?;
    let targets = one_hot_batch(&stack_fields(&[&mask])?);
    let reference = forward_batch(&images, &params, &cfg)?;
    let analytic = backward(&reference, &targets, &params, cfg.epsilon, mode)?;
    let loss = |p: &ParamSet| -> f64 {
        let cache = match mode {
            BpttMode::Truncated => forward_frozen(&images, p, &cfg, &reference),
            BpttMode::Full => forward_batch(&images, p, &cfg),
        }
        .expect("shapes fixed by construction");
        batch_loss(&cache.y_hat, &targets)
    };
    Ok(compare_blocks(&params, &analytic, loss, h, tol))
}

/// Convenience for a single mask: loss of pixel-major probabilities.
pub fn loss_for_mask(y_hat: ArrayView1<f64>, mask: &Field) -> Result<f64> {
    cross_entropy(&y_hat.to_vec(), &one_hot(mask.values()))
}

/// Writes a fully resumable checkpoint directory body: parameters are
/// written by the caller; this writes the optimizer sidecars.
pub fn save_opt_state<P: Trainable>(
    opt: &OptState,
    params: &P,
    cfg: &TrainConfig,
    json_path: impl AsRef<Path>,
    buf_path: impl AsRef<Path>,
) -> Result<()> {
    let json_path = json_path.as_ref();
    let buf_path = buf_path.as_ref();
    let meta = opt.meta(params, cfg);
    let mut text = serde_json::to_vec_pretty(&meta).expect("serializable");
    text.write_all(b"\n").unwrap();
    std::fs::write(json_path, text).map_err(|e| Error::io(json_path, e))?;
    std::fs::write(buf_path, opt.buffers_to_bytes()).map_err(|e| Error::io(buf_path, e))
}

pub fn load_opt_state<P: Trainable>(
    params: &P,
    json_path: impl AsRef<Path>,
    buf_path: impl AsRef<Path>,
) -> Result<OptState> {
    let json_path = json_path.as_ref();
    let buf_path = buf_path.as_ref();
    let text = std::fs::read(json_path).map_err(|e| Error::io(json_path, e))?;
    let meta: OptStateMeta = serde_json::from_slice(&text)
        .map_err(|e| Error::format("optimizer state", e.to_string()))?;
    let bytes = std::fs::read(buf_path).map_err(|e| Error::io(buf_path, e))?;
    OptState::from_parts(params, &meta, &bytes)
}
