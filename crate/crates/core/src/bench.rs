//! Segmentation metrics, the two-layer fully-connected baseline and the
//! benchmark runner that scores and times each method on a test split.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cls::{segment_cls_fast, ClsConfig};
use crate::error::{Error, Result};
use crate::grid::Field;
use crate::pgm;
use crate::rls::{self, forward_batch, predict_mask, softmax_pixels, stack_fields, ParamSet, RlsConfig, CLASSES};
use crate::seed;
use crate::synth::Sample;
use crate::train::{
    batch_loss, compare_blocks, fit, one_hot_batch, random_instance, GradCheckReport, History, Model,
    OptState, TrainConfig, Trainable,
};

/// Pixel scores of a binary prediction against binary ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
    pub iou: f64,
}

fn confusion(pred: &Field, gt: &Field) -> Result<(f64, f64, f64)> {
    pred.ensure_same_shape(gt, "f_measure")?;
    if !pred.is_binary() || !gt.is_binary() {
        return Err(Error::Invalid("f_measure: masks must be binary".into()));
    }
    let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        match (p > 0.5, g > 0.5) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fneg += 1.0,
            _ => {}
        }
    }
    Ok((tp, fp, fneg))
}

/// Foreground precision, recall and F1. An empty prediction has precision
/// 0, an empty ground truth has recall 0, and F is 0 when both are 0.
pub fn f_measure(pred: &Field, gt: &Field) -> Result<Scores> {
    let (tp, fp, fneg) = confusion(pred, gt)?;
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
    let f = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let union = tp + fp + fneg;
    let iou = if union > 0.0 { tp / union } else { 0.0 };
    Ok(Scores {
        precision,
        recall,
        f,
        iou,
    })
}

/// `TP / (TP + FP + FN)`, 0 when both masks are empty.
pub fn iou(pred: &Field, gt: &Field) -> Result<f64> {
    Ok(f_measure(pred, gt)?.iou)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FcnConfig {
    pub height: usize,
    pub width: usize,
    /// Hidden width; the pixel count when unset.
    pub hidden: Option<usize>,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for FcnConfig {
    fn default() -> Self {
        FcnConfig {
            height: 32,
            width: 32,
            hidden: None,
            init_scale: 1.0,
            seed: 0,
        }
    }
}

impl FcnConfig {
    pub fn hidden_units(&self) -> usize {
        self.hidden.unwrap_or(self.height * self.width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 3 || self.width < 3 || self.hidden_units() == 0 {
            return Err(Error::Config("fcn: grid must be >= 3x3 and hidden >= 1".into()));
        }
        if !(self.init_scale >= 0.0) {
            return Err(Error::Config("fcn.init_scale must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FcnParams {
    pub height: usize,
    pub width: usize,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

const FCN_MAGIC: &[u8; 4] = b"FCN1";

impl FcnParams {
    pub fn zeros(height: usize, width: usize, hidden: usize) -> Self {
        let n = height * width;
        FcnParams {
            height,
            width,
            w1: Array2::zeros((hidden, n)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((CLASSES * n, hidden)),
            b2: Array1::zeros(CLASSES * n),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }

    /// `FCN1`, then LE `u32` height, width, hidden, then `W1, b1, W2, b2`
    /// as LE `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = FCN_MAGIC.to_vec();
        for v in [self.height as u32, self.width as u32, self.hidden() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (_, b) in self.blocks() {
            for v in b {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != FCN_MAGIC {
            return Err(Error::format("magic", "not an FCN1 parameter container"));
        }
        let word = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
        let (height, width, hidden) = (word(0), word(1), word(2));
        if height < 3 || width < 3 || hidden == 0 {
            return Err(Error::format("height", "grid smaller than 3x3 or no hidden units"));
        }
        let mut p = FcnParams::zeros(height, width, hidden);
        let expected: usize = p.blocks().iter().map(|(_, b)| b.len()).sum();
        let payload = &bytes[16..];
        if payload.len() != 8 * expected {
            return Err(Error::format(
                "payload",
                format!("expected {} bytes, found {}", 8 * expected, payload.len()),
            ));
        }
        let mut chunks = payload.chunks_exact(8);
        for (_, b) in p.blocks_mut() {
            for v in b.iter_mut() {
                *v = f64::from_le_bytes(chunks.next().unwrap().try_into().unwrap());
            }
        }
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl Trainable for FcnParams {
    fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("W1", self.w1.as_slice().expect("standard layout")),
            ("b1", self.b1.as_slice().expect("standard layout")),
            ("W2", self.w2.as_slice().expect("standard layout")),
            ("b2", self.b2.as_slice().expect("standard layout")),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("W1", self.w1.as_slice_mut().expect("standard layout")),
            ("b1", self.b1.as_slice_mut().expect("standard layout")),
            ("W2", self.w2.as_slice_mut().expect("standard layout")),
            ("b2", self.b2.as_slice_mut().expect("standard layout")),
        ]
    }
}

/// Uniform `±init_scale/√fan_in` weights, zero biases.
pub fn fcn_init(cfg: &FcnConfig) -> FcnParams {
    let hidden = cfg.hidden_units();
    let mut p = FcnParams::zeros(cfg.height, cfg.width, hidden);
    let mut rng = seed::rng(cfg.seed);
    let b1 = cfg.init_scale / ((cfg.height * cfg.width) as f64).sqrt();
    let b2 = cfg.init_scale / (hidden as f64).sqrt();
    if b1 > 0.0 {
        p.w1.mapv_inplace(|_| rng.random_range(-b1..=b1));
    }
    if b2 > 0.0 {
        p.w2.mapv_inplace(|_| rng.random_range(-b2..=b2));
    }
    p
}

pub struct FcnCache {
    pub images: Array2<f64>,
    /// Pre-activations of the hidden layer.
    pub pre: Array2<f64>,
    pub hidden: Array2<f64>,
    pub y_hat: Array2<f64>,
}

fn add_bias(a: &mut Array2<f64>, b: &Array1<f64>) {
    for mut col in a.axis_iter_mut(Axis(1)) {
        col += b;
    }
}

/// Batched forward pass over `N × B` images.
pub fn fcn_forward_batch(images: &Array2<f64>, params: &FcnParams) -> Result<FcnCache> {
    if images.nrows() != params.w1.ncols() {
        return Err(Error::Dimension(format!(
            "image batch has {} rows, network expects {}",
            images.nrows(),
            params.w1.ncols()
        )));
    }
    let mut pre = params.w1.dot(images);
    add_bias(&mut pre, &params.b1);
    let hidden = pre.mapv(|v| v.max(0.0));
    let mut logits = params.w2.dot(&hidden);
    add_bias(&mut logits, &params.b2);
    Ok(FcnCache {
        images: images.clone(),
        pre,
        hidden,
        y_hat: softmax_pixels(&logits),
    })
}

/// `ŷ` for one image, pixel-major with `K` entries per pixel.
pub fn fcn_forward(image: &Field, params: &FcnParams) -> Result<Vec<f64>> {
    if image.shape() != (params.height, params.width) {
        return Err(Error::Dimension(format!(
            "image is {}x{}, network expects {}x{}",
            image.height(),
            image.width(),
            params.height,
            params.width
        )));
    }
    let cache = fcn_forward_batch(&stack_fields(&[image])?, params)?;
    Ok(cache.y_hat.column(0).to_vec())
}

/// Gradients of the summed batch cross-entropy.
pub fn fcn_backward(cache: &FcnCache, targets: &Array2<f64>, params: &FcnParams) -> Result<FcnParams> {
    if targets.dim() != cache.y_hat.dim() {
        return Err(Error::Dimension("targets do not match predictions".into()));
    }
    let d_logits = &cache.y_hat - targets;
    let mut d_hidden = params.w2.t().dot(&d_logits);
    Zip::from(&mut d_hidden).and(&cache.pre).for_each(|d, &p| {
        if p <= 0.0 {
            *d = 0.0;
        }
    });
    Ok(FcnParams {
        height: params.height,
        width: params.width,
        w1: d_hidden.dot(&cache.images.t()).as_standard_layout().into_owned(),
        b1: d_hidden.sum_axis(Axis(1)),
        w2: d_logits.dot(&cache.hidden.t()).as_standard_layout().into_owned(),
        b2: d_logits.sum_axis(Axis(1)),
    })
}

pub struct FcnModel {
    pub height: usize,
    pub width: usize,
}

impl Model for FcnModel {
    type Params = FcnParams;

    fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn loss_and_grad(
        &self,
        params: &FcnParams,
        images: &Array2<f64>,
        targets: &Array2<f64>,
    ) -> Result<(f64, FcnParams)> {
        let cache = fcn_forward_batch(images, params)?;
        let loss = batch_loss(&cache.y_hat, targets);
        Ok((loss, fcn_backward(&cache, targets, params)?))
    }

    fn predict(&self, params: &FcnParams, images: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(fcn_forward_batch(images, params)?.y_hat)
    }
}

/// Trains the baseline with the same loss, optimizer and schedule as the
/// recurrent model.
pub fn train_fcn(
    samples: &[Sample],
    fcn_cfg: &FcnConfig,
    cfg: &TrainConfig,
    validation: Option<&[Sample]>,
) -> Result<(FcnParams, History)> {
    fcn_cfg.validate()?;
    let model = FcnModel {
        height: fcn_cfg.height,
        width: fcn_cfg.width,
    };
    let mut params = fcn_init(fcn_cfg);
    let mut opt = OptState::new(&params);
    let history = fit(&model, &mut params, &mut opt, samples, cfg, validation, |_| {})?;
    Ok((params, history))
}

/// Finite-difference check of [`fcn_backward`] on a random instance with
/// random biases.
pub fn fcn_grad_check(height: usize, width: usize, h: f64, tol: f64, seed: u64) -> Result<GradCheckReport> {
    let cfg = FcnConfig {
        height,
        width,
        seed: seed::derive(seed, "params"),
        ..FcnConfig::default()
    };
    cfg.validate()?;
    let (image, mask) = random_instance(height, width, seed::derive(seed, "instance"));
    let mut params = fcn_init(&cfg);
    let mut rng = seed::rng(seed::derive(seed, "biases"));
    params.b1.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    params.b2.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    let images = stack_fields(&[&image])?;
    let targets = one_hot_batch(&stack_fields(&[&mask])?);
    let cache = fcn_forward_batch(&images, &params)?;
    let analytic = fcn_backward(&cache, &targets, &params)?;
    let loss = |p: &FcnParams| batch_loss(&fcn_forward_batch(&images, p).expect("fixed shapes").y_hat, &targets);
    Ok(compare_blocks(&params, &analytic, loss, h, tol))
}

/// A segmentation method under benchmark.
pub trait Segmenter {
    fn name(&self) -> &str;
    fn segment(&self, image: &Field) -> Result<Field>;
}

pub struct ClsMethod(pub ClsConfig);

impl Segmenter for ClsMethod {
    fn name(&self) -> &str {
        "cls"
    }

    fn segment(&self, image: &Field) -> Result<Field> {
        Ok(segment_cls_fast(image, &self.0)?.mask)
    }
}

pub struct RlsMethod {
    pub params: ParamSet,
    pub cfg: RlsConfig,
}

impl Segmenter for RlsMethod {
    fn name(&self) -> &str {
        "rls"
    }

    fn segment(&self, image: &Field) -> Result<Field> {
        rls::segment(image, &self.params, &self.cfg)
    }
}

pub struct FcnMethod(pub FcnParams);

impl Segmenter for FcnMethod {
    fn name(&self) -> &str {
        "fcn"
    }

    fn segment(&self, image: &Field) -> Result<Field> {
        predict_mask(&fcn_forward(image, &self.0)?, self.0.height, self.0.width)
    }
}

/// Thresholded predictions for a whole batch, without timing.
pub fn segment_batch_rls(images: &Array2<f64>, params: &ParamSet, cfg: &RlsConfig) -> Result<Vec<Field>> {
    let cache = forward_batch(images, params, cfg)?;
    (0..images.ncols())
        .map(|b| predict_mask(&cache.y_hat.column(b).to_vec(), cfg.height, cfg.width))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub methods: Vec<String>,
    /// Timed runs per image after one untimed warm-up run.
    pub timing_runs: usize,
    pub out_dir: Option<String>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            methods: vec!["cls".into(), "fcn".into(), "rls".into()],
            timing_runs: 3,
            out_dir: None,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timing_runs < 3 {
            return Err(Error::Config("bench.timing_runs must be >= 3".into()));
        }
        for m in &self.methods {
            if !METHODS.contains(&m.as_str()) {
                return Err(Error::Config(format!(
                    "bench.methods: unknown method {m:?}; valid methods are {}",
                    METHODS.join(", ")
                )));
            }
        }
        Ok(())
    }
}

pub const METHODS: [&str; 3] = ["cls", "rls", "fcn"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodReport {
    pub method: String,
    pub precision: f64,
    pub recall: f64,
    pub fmeasure: f64,
    pub iou: f64,
    /// Mean over images of the per-image mean run time.
    pub mean_time_s: f64,
    /// Median over images of the per-image median run time.
    pub median_time_s: f64,
    #[serde(skip)]
    pub per_image: Vec<Scores>,
    #[serde(skip)]
    pub masks: Vec<Field>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub dataset_id: String,
    pub config_digest: String,
    pub methods: Vec<MethodReport>,
}

pub const CSV_HEADER: &str = "method,precision,recall,fmeasure,iou,mean_time_s,median_time_s";

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for m in &self.methods {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6e},{:.6e}\n",
                m.method, m.precision, m.recall, m.fmeasure, m.iou, m.mean_time_s, m.median_time_s
            ));
        }
        out
    }

    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }

    /// Writes `<dir>/<method>/<id>.pgm` for every prediction.
    pub fn write_masks(&self, samples: &[Sample], dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for m in &self.methods {
            let sub = dir.join(&m.method);
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            for (s, mask) in samples.iter().zip(&m.masks) {
                pgm::write_pgm(mask, sub.join(format!("{}.pgm", s.id)))?;
            }
        }
        Ok(())
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Scores and times every method on `samples`. Each image gets one untimed
/// warm-up call followed by `timing_runs` timed calls, run sequentially.
pub fn run_benchmark(
    samples: &[Sample],
    methods: &[&dyn Segmenter],
    timing_runs: usize,
    dataset_id: &str,
    config_digest: &str,
) -> Result<BenchReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let runs = timing_runs.max(1);
    let mut reports = Vec::with_capacity(methods.len());
    for method in methods {
        let mut per_image = Vec::with_capacity(samples.len());
        let mut masks = Vec::with_capacity(samples.len());
        let mut means = Vec::with_capacity(samples.len());
        let mut medians = Vec::with_capacity(samples.len());
        for s in samples {
            let mask = method.segment(&s.image)?;
            let mut times = Vec::with_capacity(runs);
            for _ in 0..runs {
                let start = Instant::now();
                let again = method.segment(&s.image)?;
                times.push(start.elapsed().as_secs_f64());
                debug_assert_eq!(again, mask);
            }
            means.push(times.iter().sum::<f64>() / runs as f64);
            medians.push(median(&mut times));
            per_image.push(f_measure(&mask, &s.mask)?);
            masks.push(mask);
        }
        let n = samples.len() as f64;
        let avg = |f: fn(&Scores) -> f64| per_image.iter().map(f).sum::<f64>() / n;
        reports.push(MethodReport {
            method: method.name().to_string(),
            precision: avg(|s| s.precision),
            recall: avg(|s| s.recall),
            fmeasure: avg(|s| s.f),
            iou: avg(|s| s.iou),
            mean_time_s: means.iter().sum::<f64>() / n,
            median_time_s: median(&mut medians),
            per_image,
            masks,
        });
    }
    Ok(BenchReport {
        dataset_id: dataset_id.to_string(),
        config_digest: config_digest.to_string(),
        methods: reports,
    })
}
