//! Recurrent level sets: the level-set function is the hidden state of a
//! gated recurrent unit whose per-step input is the Chan-Vese force field.
//!
//! For a vectorized image `I` (length `N = height·width`) and hidden state
//! `φ_{t-1}`:
//!
//! ```text
//! x_t = κ(φ_{t-1}) − U_g (I − c1)² + W_g (I − c2)²
//! z_t = σ(U_z x_t + W_z φ_{t-1} + b_z)
//! r_t = σ(U_r x_t + W_r φ_{t-1} + b_r)
//! o_t = tanh(U_o x_t + W_o (φ_{t-1} ⊙ r_t) + b_o)
//! φ_t = z_t ⊙ φ_{t-1} + (1 − z_t) ⊙ o_t
//! ```
//!
//! After `T` steps the logits `O = V φ_T + b_V` (length `K·N`, pixel-major:
//! `O[n·K + k]`) go through a per-pixel softmax.
//!
//! All batched routines take `N × B` arrays with one sample per column.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cls::{checkerboard_init, region_means_unchecked};
use crate::error::{Error, Result};
use crate::grid::{curvature, EpsParam, Field};
use crate::seed;

/// Number of output classes (background, foreground).
pub const CLASSES: usize = 2;

const MAGIC: &[u8; 4] = b"RLS1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    /// Full `rows × cols` matrices.
    #[default]
    Dense,
    /// One scale per output row acting elementwise.
    Diagonal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlsConfig {
    pub height: usize,
    pub width: usize,
    /// Unroll length `T`.
    #[serde(alias = "T")]
    pub steps: usize,
    pub epsilon: EpsParam,
    pub checker_period: usize,
    pub init_scale: f64,
    pub seed: u64,
    pub parameterization: Parameterization,
}

impl Default for RlsConfig {
    fn default() -> Self {
        RlsConfig {
            height: 32,
            width: 32,
            steps: 5,
            epsilon: EpsParam::default(),
            checker_period: 5,
            init_scale: 1.0,
            seed: 0,
            parameterization: Parameterization::Dense,
        }
    }
}

impl RlsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 3 || self.width < 3 {
            return Err(Error::Config("rls grid must be at least 3x3".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("rls.steps must be >= 1".into()));
        }
        EpsParam::new(self.epsilon.get())?;
        if self.checker_period < 2 {
            return Err(Error::Config("rls.checker_period must be >= 2".into()));
        }
        if !(self.init_scale >= 0.0) {
            return Err(Error::Config("rls.init_scale must be >= 0".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// A linear map stored either densely or as per-row scales.
///
/// The diagonal form with `rows = k·cols` reads input `r / k` for output row
/// `r`, which matches the pixel-major logit layout.
#[derive(Clone, Debug, PartialEq)]
pub enum Weight {
    Dense(Array2<f64>),
    Diagonal { scale: Array1<f64>, cols: usize },
}

impl Weight {
    pub fn zeros(rows: usize, cols: usize, mode: Parameterization) -> Self {
        match mode {
            Parameterization::Dense => Weight::Dense(Array2::zeros((rows, cols))),
            Parameterization::Diagonal => {
                assert!(rows % cols == 0, "diagonal block needs rows multiple of cols");
                Weight::Diagonal {
                    scale: Array1::zeros(rows),
                    cols,
                }
            }
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            Weight::Dense(m) => m.nrows(),
            Weight::Diagonal { scale, .. } => scale.len(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            Weight::Dense(m) => m.ncols(),
            Weight::Diagonal { cols, .. } => *cols,
        }
    }

    /// `W·x` for `x` of shape `cols × B`.
    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        match self {
            // A single column goes through the matrix-vector kernel, which
            // avoids padding the GEMM micro-kernel.
            Weight::Dense(m) if x.ncols() == 1 => crate::linalg::gemv(m, x.column(0)).insert_axis(Axis(1)),
            Weight::Dense(m) => m.dot(&x),
            Weight::Diagonal { scale, cols } => {
                let rep = scale.len() / cols;
                Array2::from_shape_fn((scale.len(), x.ncols()), |(r, b)| scale[r] * x[[r / rep, b]])
            }
        }
    }

    /// `Wᵀ·g` for `g` of shape `rows × B`.
    pub fn apply_t(&self, g: ArrayView2<f64>) -> Array2<f64> {
        match self {
            Weight::Dense(m) if g.ncols() == 1 => m.t().dot(&g.column(0)).insert_axis(Axis(1)),
            Weight::Dense(m) => m.t().dot(&g),
            Weight::Diagonal { scale, cols } => {
                let rep = scale.len() / cols;
                let mut out = Array2::zeros((*cols, g.ncols()));
                for r in 0..scale.len() {
                    let s = scale[r];
                    let mut row = out.row_mut(r / rep);
                    row.scaled_add(s, &g.row(r));
                }
                out
            }
        }
    }

    /// Gradient block `Σ_m g[:, m] x[:, m]ᵀ` restricted to this block's
    /// sparsity pattern.
    pub fn outer(&self, g: ArrayView2<f64>, x: ArrayView2<f64>) -> Weight {
        match self {
            Weight::Dense(_) => Weight::Dense(g.dot(&x.t()).as_standard_layout().into_owned()),
            Weight::Diagonal { scale, cols } => {
                let rep = scale.len() / cols;
                let s = Array1::from_shape_fn(scale.len(), |r| g.row(r).dot(&x.row(r / rep)));
                Weight::Diagonal { scale: s, cols: *cols }
            }
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        match self {
            Weight::Dense(m) => m.as_slice().expect("standard layout"),
            Weight::Diagonal { scale, .. } => scale.as_slice().expect("standard layout"),
        }
    }

    pub fn as_slice_mut(&mut self) -> &mut [f64] {
        match self {
            Weight::Dense(m) => m.as_slice_mut().expect("standard layout"),
            Weight::Diagonal { scale, .. } => scale.as_slice_mut().expect("standard layout"),
        }
    }

    /// Dense copy, for oracles and inspection.
    pub fn to_dense(&self) -> Array2<f64> {
        match self {
            Weight::Dense(m) => m.clone(),
            Weight::Diagonal { scale, cols } => {
                let rep = scale.len() / cols;
                Array2::from_shape_fn((scale.len(), *cols), |(r, c)| {
                    if r / rep == c {
                        scale[r]
                    } else {
                        0.0
                    }
                })
            }
        }
    }
}

/// Every trainable quantity of the recurrent model, in serialization order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub height: usize,
    pub width: usize,
    pub mode: Parameterization,
    pub u_g: Weight,
    pub w_g: Weight,
    pub u_z: Weight,
    pub w_z: Weight,
    pub b_z: Array1<f64>,
    pub u_r: Weight,
    pub w_r: Weight,
    pub b_r: Array1<f64>,
    pub u_o: Weight,
    pub w_o: Weight,
    pub b_o: Array1<f64>,
    pub v: Weight,
    pub b_v: Array1<f64>,
}

pub const BLOCK_NAMES: [&str; 13] = [
    "U_g", "W_g", "U_z", "W_z", "b_z", "U_r", "W_r", "b_r", "U_o", "W_o", "b_o", "V", "b_V",
];

impl ParamSet {
    pub fn zeros(height: usize, width: usize, mode: Parameterization) -> Self {
        let n = height * width;
        let sq = || Weight::zeros(n, n, mode);
        ParamSet {
            height,
            width,
            mode,
            u_g: sq(),
            w_g: sq(),
            u_z: sq(),
            w_z: sq(),
            b_z: Array1::zeros(n),
            u_r: sq(),
            w_r: sq(),
            b_r: Array1::zeros(n),
            u_o: sq(),
            w_o: sq(),
            b_o: Array1::zeros(n),
            v: Weight::zeros(CLASSES * n, n, mode),
            b_v: Array1::zeros(CLASSES * n),
        }
    }

    /// Zeroed copy with identical shapes.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.height, self.width, self.mode)
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        fn bias(a: &Array1<f64>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        let s = self;
        vec![
            ("U_g", s.u_g.as_slice()),
            ("W_g", s.w_g.as_slice()),
            ("U_z", s.u_z.as_slice()),
            ("W_z", s.w_z.as_slice()),
            ("b_z", bias(&s.b_z)),
            ("U_r", s.u_r.as_slice()),
            ("W_r", s.w_r.as_slice()),
            ("b_r", bias(&s.b_r)),
            ("U_o", s.u_o.as_slice()),
            ("W_o", s.w_o.as_slice()),
            ("b_o", bias(&s.b_o)),
            ("V", s.v.as_slice()),
            ("b_V", bias(&s.b_v)),
        ]
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        fn bias(a: &mut Array1<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        let s = self;
        vec![
            ("U_g", s.u_g.as_slice_mut()),
            ("W_g", s.w_g.as_slice_mut()),
            ("U_z", s.u_z.as_slice_mut()),
            ("W_z", s.w_z.as_slice_mut()),
            ("b_z", bias(&mut s.b_z)),
            ("U_r", s.u_r.as_slice_mut()),
            ("W_r", s.w_r.as_slice_mut()),
            ("b_r", bias(&mut s.b_r)),
            ("U_o", s.u_o.as_slice_mut()),
            ("W_o", s.w_o.as_slice_mut()),
            ("b_o", bias(&mut s.b_o)),
            ("V", s.v.as_slice_mut()),
            ("b_V", bias(&mut s.b_v)),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }

    fn check_grid(&self, height: usize, width: usize) -> Result<()> {
        if (self.height, self.width) != (height, width) {
            return Err(Error::Dimension(format!(
                "parameters are for {}x{}, input is {height}x{width}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Serializes into the `RLS1` container: magic, then height, width, K,
    /// T and flags as little-endian `u32`, then every block in declaration
    /// order as little-endian `f64`.
    pub fn to_bytes(&self, steps: usize) -> Vec<u8> {
        let total: usize = self.blocks().iter().map(|(_, b)| b.len()).sum();
        let mut out = Vec::with_capacity(24 + 8 * total);
        out.extend_from_slice(MAGIC);
        let flags = match self.mode {
            Parameterization::Dense => 0u32,
            Parameterization::Diagonal => 1u32,
        };
        for v in [
            self.height as u32,
            self.width as u32,
            CLASSES as u32,
            steps as u32,
            flags,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (_, block) in self.blocks() {
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Inverse of [`ParamSet::to_bytes`]; returns the parameters and `T`.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < 24 || &bytes[..4] != MAGIC {
            return Err(Error::format("magic", "not an RLS1 parameter container"));
        }
        let word = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap());
        let (height, width, classes, steps, flags) =
            (word(0) as usize, word(1) as usize, word(2), word(3) as usize, word(4));
        if classes as usize != CLASSES {
            return Err(Error::format("classes", format!("expected {CLASSES}, got {classes}")));
        }
        let mode = match flags {
            0 => Parameterization::Dense,
            1 => Parameterization::Diagonal,
            f => return Err(Error::format("flags", format!("unknown flags {f}"))),
        };
        if height < 3 || width < 3 {
            return Err(Error::format("height", "grid smaller than 3x3"));
        }
        let mut params = ParamSet::zeros(height, width, mode);
        let expected: usize = params.blocks().iter().map(|(_, b)| b.len()).sum();
        let payload = &bytes[24..];
        if payload.len() != 8 * expected {
            return Err(Error::format(
                "payload",
                format!("expected {} bytes, found {}", 8 * expected, payload.len()),
            ));
        }
        let mut chunks = payload.chunks_exact(8);
        for (_, block) in params.blocks_mut() {
            for v in block.iter_mut() {
                *v = f64::from_le_bytes(chunks.next().unwrap().try_into().unwrap());
            }
        }
        Ok((params, steps))
    }

    pub fn save(&self, steps: usize, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes(steps))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, usize)> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Uniform `±init_scale/√N` weights from a seeded generator; zero biases.
pub fn init_params(cfg: &RlsConfig) -> ParamSet {
    let n = cfg.pixels();
    let mut params = ParamSet::zeros(cfg.height, cfg.width, cfg.parameterization);
    let bound = cfg.init_scale / (n as f64).sqrt();
    let mut rng = seed::rng(cfg.seed);
    for (name, block) in params.blocks_mut() {
        if name.starts_with('b') || bound == 0.0 {
            continue;
        }
        for v in block.iter_mut() {
            *v = rng.random_range(-bound..=bound);
        }
    }
    params
}

/// Largest double below 1.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Mirror of [`BELOW_ONE`] about one half. Keeping saturated gates this far
/// from zero also keeps `z(1-z)` and the gradients it scales out of the
/// subnormal range, where matrix products slow down by orders of magnitude.
const ABOVE_ZERO: f64 = f64::EPSILON / 2.0;

/// Logistic function, kept strictly inside (0, 1) where it would otherwise
/// round to an endpoint.
#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    (1.0 / (1.0 + (-v).exp())).clamp(ABOVE_ZERO, BELOW_ONE)
}

/// `tanh`, kept strictly inside (-1, 1).
#[inline]
pub(crate) fn open_tanh(v: f64) -> f64 {
    v.tanh().clamp(-BELOW_ONE, BELOW_ONE)
}

/// Quantities of one recurrence step, `N × B` unless noted.
#[derive(Clone, Debug)]
pub struct StepCache {
    pub x: Array2<f64>,
    pub z: Array2<f64>,
    pub r: Array2<f64>,
    pub o: Array2<f64>,
    pub phi: Array2<f64>,
    /// Curvature of `φ_{t-1}`.
    pub kappa: Array2<f64>,
    /// `(I − c1)²` and `(I − c2)²`.
    pub fit_in: Array2<f64>,
    pub fit_out: Array2<f64>,
    /// Per-sample region means of `φ_{t-1}`.
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
}

/// Everything a backward pass needs, for a batch of `B` samples.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub height: usize,
    pub width: usize,
    pub images: Array2<f64>,
    pub phi0: Array2<f64>,
    pub steps: Vec<StepCache>,
    /// `K·N × B`, pixel-major.
    pub logits: Array2<f64>,
    pub y_hat: Array2<f64>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.images.ncols()
    }

    /// Hidden state after the last step.
    pub fn phi_last(&self) -> &Array2<f64> {
        self.steps.last().map_or(&self.phi0, |s| &s.phi)
    }

    /// Class probabilities of sample `b` as an `N × K` array.
    pub fn y_hat_of(&self, b: usize) -> Array2<f64> {
        let n = self.height * self.width;
        self.y_hat
            .column(b)
            .to_owned()
            .into_shape_with_order((n, CLASSES))
            .expect("K·N logits")
    }
}

/// Force-field input of one step (single sample).
#[derive(Clone, Debug)]
pub struct Gates {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub o: Vec<f64>,
}

/// Stacks fields as columns of an `N × B` array.
pub fn stack_fields(fields: &[&Field]) -> Result<Array2<f64>> {
    let first = fields
        .first()
        .ok_or_else(|| Error::Invalid("no fields to stack".into()))?;
    let n = first.len();
    let mut out = Array2::zeros((n, fields.len()));
    for (b, f) in fields.iter().enumerate() {
        first.ensure_same_shape(f, "stack_fields")?;
        out.column_mut(b)
            .assign(&ArrayView1::from(f.values()));
    }
    Ok(out)
}

fn column_field(a: &Array2<f64>, b: usize, height: usize, width: usize) -> Field {
    Field::from_vec(height, width, a.column(b).to_vec()).expect("grid-shaped column")
}

/// The per-step drive `κ`, `c1`, `c2` for a batch.
struct Drive {
    kappa: Array2<f64>,
    c1: Vec<f64>,
    c2: Vec<f64>,
}

fn compute_drive(
    images: &Array2<f64>,
    phi: &Array2<f64>,
    height: usize,
    width: usize,
    eps: EpsParam,
) -> Drive {
    let (n, batch) = phi.dim();
    let mut kappa = Array2::zeros((n, batch));
    let mut c1 = Vec::with_capacity(batch);
    let mut c2 = Vec::with_capacity(batch);
    for b in 0..batch {
        let p = column_field(phi, b, height, width);
        kappa.column_mut(b).assign(&ArrayView1::from(curvature(&p).values()));
        let img = images.column(b).to_vec();
        let (a, c) = region_means_unchecked(&img, p.values(), eps);
        c1.push(a);
        c2.push(c);
    }
    Drive { kappa, c1, c2 }
}

fn fit_terms(images: &Array2<f64>, c: &[f64]) -> Array2<f64> {
    let mut out = images.clone();
    for (b, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
        col.mapv_inplace(|i| (i - c[b]).powi(2));
    }
    out
}

fn add_bias(a: &mut Array2<f64>, b: &Array1<f64>) {
    *a += &b.view().insert_axis(Axis(1));
}

/// `U_g` and `W_g` applied to `[I², I, 1]` for every image, so that
/// `U_g(I − c)² = P₀ − 2c·P₁ + c²·P₂` costs no matrix product per step.
struct ForceBasis {
    u: Array2<f64>,
    w: Array2<f64>,
}

impl ForceBasis {
    fn new(images: &Array2<f64>, params: &ParamSet) -> Self {
        let (n, batch) = images.dim();
        let mut q = Array2::zeros((n, 3 * batch));
        for b in 0..batch {
            let col = images.column(b);
            q.column_mut(3 * b).assign(&col.mapv(|i| i * i));
            q.column_mut(3 * b + 1).assign(&col);
            q.column_mut(3 * b + 2).fill(1.0);
        }
        ForceBasis {
            u: params.u_g.apply(q.view()),
            w: params.w_g.apply(q.view()),
        }
    }

    /// `x = κ − U_g(I − c1)² + W_g(I − c2)²`.
    fn input(&self, kappa: &Array2<f64>, c1: &[f64], c2: &[f64]) -> Array2<f64> {
        let mut x = kappa.clone();
        for (b, mut col) in x.axis_iter_mut(Axis(1)).enumerate() {
            let (a, c) = (c1[b], c2[b]);
            let (u0, u1, u2) = (self.u.column(3 * b), self.u.column(3 * b + 1), self.u.column(3 * b + 2));
            let (w0, w1, w2) = (self.w.column(3 * b), self.w.column(3 * b + 1), self.w.column(3 * b + 2));
            for k in 0..col.len() {
                let fit_in = u0[k] - 2.0 * a * u1[k] + a * a * u2[k];
                let fit_out = w0[k] - 2.0 * c * w1[k] + c * c * w2[k];
                col[k] += fit_out - fit_in;
            }
        }
        x
    }
}

fn step_batch(
    images: &Array2<f64>,
    phi_prev: &Array2<f64>,
    params: &ParamSet,
    basis: &ForceBasis,
    drive: Drive,
) -> StepCache {
    let fit_in = fit_terms(images, &drive.c1);
    let fit_out = fit_terms(images, &drive.c2);
    let x = basis.input(&drive.kappa, &drive.c1, &drive.c2);

    let mut z = params.u_z.apply(x.view());
    z += &params.w_z.apply(phi_prev.view());
    add_bias(&mut z, &params.b_z);
    z.mapv_inplace(sigmoid);

    let mut r = params.u_r.apply(x.view());
    r += &params.w_r.apply(phi_prev.view());
    add_bias(&mut r, &params.b_r);
    r.mapv_inplace(sigmoid);

    let gated = phi_prev * &r;
    let mut o = params.u_o.apply(x.view());
    o += &params.w_o.apply(gated.view());
    add_bias(&mut o, &params.b_o);
    o.mapv_inplace(open_tanh);

    let mut phi = Array2::zeros(phi_prev.raw_dim());
    Zip::from(&mut phi)
        .and(&z)
        .and(phi_prev)
        .and(&o)
        .for_each(|p, &z, &prev, &o| *p = convex(z, prev, o));

    StepCache {
        x,
        z,
        r,
        o,
        phi,
        kappa: drive.kappa,
        fit_in,
        fit_out,
        c1: drive.c1,
        c2: drive.c2,
    }
}

/// `z·a + (1 − z)·b`, pinned to `[min(a, b), max(a, b)]` against rounding.
#[inline]
fn convex(z: f64, a: f64, b: f64) -> f64 {
    let v = z * a + (1.0 - z) * b;
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    if v < lo {
        lo
    } else if v > hi {
        hi
    } else {
        v
    }
}

/// Per-pixel softmax over the `K` pixel-major logits of every column.
pub fn softmax_pixels(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    let pixels = logits.nrows() / CLASSES;
    for mut col in out.axis_iter_mut(Axis(1)) {
        for n in 0..pixels {
            let base = n * CLASSES;
            let m = (0..CLASSES).map(|k| col[base + k]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..CLASSES {
                let e = (col[base + k] - m).exp();
                col[base + k] = e;
                z += e;
            }
            for k in 0..CLASSES {
                col[base + k] /= z;
            }
        }
    }
    out
}

/// Checkerboard `φ₀` replicated for `batch` samples.
pub fn initial_state(cfg: &RlsConfig, batch: usize) -> Array2<f64> {
    let phi0 = checkerboard_init(cfg.height, cfg.width, cfg.checker_period);
    let col = ArrayView1::from(phi0.values());
    let mut out = Array2::zeros((cfg.pixels(), batch));
    for mut c in out.axis_iter_mut(Axis(1)) {
        c.assign(&col);
    }
    out
}

fn check_batch(images: &Array2<f64>, params: &ParamSet, cfg: &RlsConfig) -> Result<()> {
    params.check_grid(cfg.height, cfg.width)?;
    if images.nrows() != cfg.pixels() {
        return Err(Error::Dimension(format!(
            "image batch has {} rows, grid has {} pixels",
            images.nrows(),
            cfg.pixels()
        )));
    }
    Ok(())
}

fn forward_impl(
    images: &Array2<f64>,
    params: &ParamSet,
    cfg: &RlsConfig,
    frozen: Option<&ForwardCache>,
) -> Result<ForwardCache> {
    check_batch(images, params, cfg)?;
    let phi0 = initial_state(cfg, images.ncols());
    let basis = ForceBasis::new(images, params);
    let mut steps: Vec<StepCache> = Vec::with_capacity(cfg.steps);
    for t in 0..cfg.steps {
        let prev = steps.last().map_or(&phi0, |s| &s.phi);
        let drive = match frozen {
            Some(reference) => {
                let s = &reference.steps[t];
                Drive {
                    kappa: s.kappa.clone(),
                    c1: s.c1.clone(),
                    c2: s.c2.clone(),
                }
            }
            None => compute_drive(images, prev, cfg.height, cfg.width, cfg.epsilon),
        };
        let step = step_batch(images, prev, params, &basis, drive);
        steps.push(step);
    }
    let last = steps.last().map_or(&phi0, |s| &s.phi);
    let mut logits = params.v.apply(last.view());
    add_bias(&mut logits, &params.b_v);
    let y_hat = softmax_pixels(&logits);
    let cache = ForwardCache {
        height: cfg.height,
        width: cfg.width,
        images: images.clone(),
        phi0,
        steps,
        logits,
        y_hat,
    };
    #[cfg(debug_assertions)]
    debug_check_ranges(&cache);
    Ok(cache)
}

// NaN is let through so that non-finite inputs surface as a loss error
// rather than a panic.
#[cfg(debug_assertions)]
fn debug_check_ranges(cache: &ForwardCache) {
    let finite_in = |a: &Array2<f64>, lo: f64, hi: f64| a.iter().all(|&v| v.is_nan() || (v > lo && v < hi));
    for s in &cache.steps {
        debug_assert!(finite_in(&s.z, 0.0, 1.0), "update gate out of range");
        debug_assert!(finite_in(&s.r, 0.0, 1.0), "reset gate out of range");
        debug_assert!(finite_in(&s.o, -1.0, 1.0), "candidate out of range");
    }
}

/// Unrolls the recurrence for a batch of images (`N × B`).
pub fn forward_batch(images: &Array2<f64>, params: &ParamSet, cfg: &RlsConfig) -> Result<ForwardCache> {
    forward_impl(images, params, cfg, None)
}

/// Forward pass in which `κ`, `c1` and `c2` at every step are taken from
/// `reference` instead of being recomputed from the hidden state. Its
/// derivatives are exactly what truncated backpropagation returns.
pub fn forward_frozen(
    images: &Array2<f64>,
    params: &ParamSet,
    cfg: &RlsConfig,
    reference: &ForwardCache,
) -> Result<ForwardCache> {
    if reference.steps.len() != cfg.steps || reference.images.dim() != images.dim() {
        return Err(Error::Dimension("reference cache does not match input".into()));
    }
    forward_impl(images, params, cfg, Some(reference))
}

/// Unrolls the recurrence for one image.
pub fn forward(image: &Field, params: &ParamSet, cfg: &RlsConfig) -> Result<ForwardCache> {
    if image.shape() != (cfg.height, cfg.width) {
        return Err(Error::Dimension(format!(
            "image is {}x{}, model expects {}x{}",
            image.height(),
            image.width(),
            cfg.height,
            cfg.width
        )));
    }
    forward_batch(&stack_fields(&[image])?, params, cfg)
}

fn single_column(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((v.len(), 1), v.to_vec()).expect("column")
}

fn check_single(image: &Field, phi_prev: &[f64], params: &ParamSet) -> Result<()> {
    params.check_grid(image.height(), image.width())?;
    if phi_prev.len() != image.len() {
        return Err(Error::Dimension(format!(
            "hidden state has {} entries, image has {}",
            phi_prev.len(),
            image.len()
        )));
    }
    Ok(())
}

/// Builds the step input `x_t` from the image and the previous level set.
pub fn gen_input(image: &Field, phi_prev: &[f64], params: &ParamSet, eps: EpsParam) -> Result<Vec<f64>> {
    let (_, gates) = step(image, phi_prev, params, eps)?;
    Ok(gates.x)
}

/// One recurrence step for a single image.
pub fn step(image: &Field, phi_prev: &[f64], params: &ParamSet, eps: EpsParam) -> Result<(Vec<f64>, Gates)> {
    check_single(image, phi_prev, params)?;
    let images = single_column(image.values());
    let prev = single_column(phi_prev);
    let drive = compute_drive(&images, &prev, image.height(), image.width(), eps);
    let basis = ForceBasis::new(&images, params);
    let s = step_batch(&images, &prev, params, &basis, drive);
    let col = |a: &Array2<f64>| a.column(0).to_vec();
    Ok((
        col(&s.phi),
        Gates {
            x: col(&s.x),
            z: col(&s.z),
            r: col(&s.r),
            o: col(&s.o),
        },
    ))
}

/// Per-pixel argmax of pixel-major class probabilities; ties go to
/// background.
pub fn predict_mask(y_hat: &[f64], height: usize, width: usize) -> Result<Field> {
    if y_hat.len() != CLASSES * height * width {
        return Err(Error::Dimension(format!(
            "{} probabilities for a {height}x{width} grid",
            y_hat.len()
        )));
    }
    let values = y_hat
        .chunks_exact(CLASSES)
        .map(|px| if px[1] > px[0] { 1.0 } else { 0.0 })
        .collect();
    Field::new(height, width, values)
}

/// Runs the model on one image and thresholds the result.
pub fn segment(image: &Field, params: &ParamSet, cfg: &RlsConfig) -> Result<Field> {
    let cache = forward(image, params, cfg)?;
    predict_mask(&cache.y_hat.column(0).to_vec(), cfg.height, cfg.width)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(h: usize, w: usize) -> RlsConfig {
        RlsConfig {
            height: h,
            width: w,
            steps: 3,
            ..RlsConfig::default()
        }
    }

    fn image(h: usize, w: usize) -> Field {
        Field::from_fn(h, w, |i, j| if i >= h / 3 && j >= w / 3 { 0.8 } else { 0.2 })
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let c = RlsConfig {
            seed: 9,
            ..cfg(4, 4)
        };
        let a = init_params(&c);
        assert_eq!(a, init_params(&c));
        for (name, block) in a.blocks() {
            if name.starts_with('b') {
                assert!(block.iter().all(|&v| v == 0.0));
            } else {
                assert!(block.iter().all(|&v| v.abs() <= 0.25), "{name}");
                assert!(block.iter().any(|&v| v != 0.0));
            }
        }
        let zero = init_params(&RlsConfig {
            init_scale: 0.0,
            ..c
        });
        assert!(zero.blocks().iter().all(|(_, b)| b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn zero_force_matrices_give_curvature_input() {
        let c = cfg(5, 5);
        let mut p = init_params(&c);
        p.u_g = Weight::zeros(25, 25, Parameterization::Dense);
        p.w_g = Weight::zeros(25, 25, Parameterization::Dense);
        let img = image(5, 5);
        let phi = checkerboard_init(5, 5, 3);
        let x = gen_input(&img, phi.values(), &p, c.epsilon).unwrap();
        assert_eq!(x, curvature(&phi).into_vec());
    }

    #[test]
    fn flat_image_and_plane_give_zero_input() {
        let c = cfg(6, 6);
        let p = init_params(&c);
        let img = Field::filled(6, 6, 0.4);
        let phi = Field::from_fn(6, 6, |i, j| i as f64 - 2.0 * j as f64);
        let x = gen_input(&img, phi.values(), &p, c.epsilon).unwrap();
        // Boundary curvature of a plane is not zero under replicate padding,
        // so compare interior pixels only.
        for i in 1..5 {
            for j in 1..5 {
                assert!(x[i * 6 + j].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_params_halve_the_state() {
        let c = RlsConfig {
            init_scale: 0.0,
            ..cfg(4, 4)
        };
        let p = init_params(&c);
        let img = image(4, 4);
        let phi: Vec<f64> = (0..16).map(|k| (k as f64 * 0.3).sin()).collect();
        let (next, g) = step(&img, &phi, &p, c.epsilon).unwrap();
        assert!(g.z.iter().chain(&g.r).all(|&v| v == 0.5));
        assert!(g.o.iter().all(|&v| v == 0.0));
        for (a, b) in next.iter().zip(&phi) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn saturated_update_gate_keeps_state() {
        let c = cfg(4, 4);
        let mut p = init_params(&c);
        p.u_z = Weight::zeros(16, 16, Parameterization::Dense);
        p.w_z = Weight::zeros(16, 16, Parameterization::Dense);
        p.b_z.fill(50.0);
        let img = image(4, 4);
        let phi: Vec<f64> = (0..16).map(|k| (k as f64 * 0.7).cos()).collect();
        let (next, _) = step(&img, &phi, &p, c.epsilon).unwrap();
        for (a, b) in next.iter().zip(&phi) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn gates_stay_inside_open_ranges() {
        for v in [1e3, 40.0, -40.0, -1e3] {
            let s = sigmoid(v);
            assert!(s > 0.0 && s < 1.0, "sigmoid({v}) = {s}");
            let t = open_tanh(v);
            assert!(t > -1.0 && t < 1.0, "tanh({v}) = {t}");
        }
        assert_eq!(sigmoid(0.3), 1.0 / (1.0 + (-0.3f64).exp()));
    }

    #[test]
    fn zero_head_is_uniform_and_rows_normalize() {
        let c = cfg(5, 4);
        let mut p = init_params(&c);
        let img = image(5, 4);
        let cache = forward(&img, &p, &c).unwrap();
        for px in cache.y_hat.column(0).to_vec().chunks(2) {
            assert!((px[0] + px[1] - 1.0).abs() < 1e-12);
        }
        p.v = Weight::zeros(40, 20, Parameterization::Dense);
        let cache = forward(&img, &p, &c).unwrap();
        assert!(cache.y_hat.iter().all(|&v| v == 0.5));
        let mask = predict_mask(&cache.y_hat.column(0).to_vec(), 5, 4).unwrap();
        assert!(mask.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_is_shift_invariant_per_pixel() {
        let logits = Array2::from_shape_fn((8, 2), |(r, b)| (r as f64 * 1.3 - b as f64).sin() * 4.0);
        let mut shifted = logits.clone();
        shifted[[2, 0]] += 7.5;
        shifted[[3, 0]] += 7.5;
        let a = softmax_pixels(&logits);
        let b = softmax_pixels(&shifted);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_mask_rules() {
        let fg: Vec<f64> = (0..9).flat_map(|_| [0.1, 0.9]).collect();
        assert!(predict_mask(&fg, 3, 3).unwrap().values().iter().all(|&v| v == 1.0));
        assert!(predict_mask(&fg, 3, 4).is_err());
    }

    #[test]
    fn container_roundtrip_and_determinism() {
        for mode in [Parameterization::Dense, Parameterization::Diagonal] {
            let c = RlsConfig {
                parameterization: mode,
                seed: 3,
                ..cfg(3, 4)
            };
            let p = init_params(&c);
            let bytes = p.to_bytes(c.steps);
            assert_eq!(&bytes[..4], b"RLS1");
            assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 4);
            assert_eq!(bytes, init_params(&c).to_bytes(c.steps));
            let (back, steps) = ParamSet::from_bytes(&bytes).unwrap();
            assert_eq!(back, p);
            assert_eq!(steps, 3);
        }
        assert!(ParamSet::from_bytes(b"XXXX").is_err());
    }

    #[test]
    fn diagonal_weight_matches_dense_expansion() {
        let mut w = Weight::zeros(6, 3, Parameterization::Diagonal);
        for (k, v) in w.as_slice_mut().iter_mut().enumerate() {
            *v = k as f64 - 2.5;
        }
        let x = Array2::from_shape_fn((3, 2), |(i, b)| (i + 3 * b) as f64 * 0.5 - 1.0);
        let d = w.to_dense();
        assert_eq!(w.apply(x.view()), d.dot(&x));
        let g = Array2::from_shape_fn((6, 2), |(i, b)| (i as f64 - b as f64) * 0.25);
        assert_eq!(w.apply_t(g.view()), d.t().dot(&g));
    }

    #[test]
    fn shape_errors() {
        let c = cfg(4, 4);
        let p = init_params(&c);
        assert!(matches!(forward(&image(5, 4), &p, &c), Err(Error::Dimension(_))));
        assert!(matches!(
            gen_input(&image(4, 4), &[0.0; 3], &p, c.epsilon),
            Err(Error::Dimension(_))
        ));
    }
}
