//! Scalar fields on a pixel grid and the finite-difference operators used by
//! both level-set engines.
//!
//! Grid spacing is one pixel on both axes. `x` runs along columns (`j`) and
//! `y` along rows (`i`). Every stencil clamps out-of-range indices to the
//! nearest edge pixel (replicate padding).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest grid side; the curvature stencil needs a 3×3 neighbourhood.
pub const MIN_SIDE: usize = 3;

/// Regularizer added to `|∇φ|²` in the curvature denominator.
pub const CURVATURE_REG: f64 = 1e-8;

/// Real-valued `height × width` grid stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Field {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::Dimension(format!(
                "field must be at least {MIN_SIDE}x{MIN_SIDE}, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::Dimension(format!(
                "{height}x{width} field needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite value at index {pos}")));
        }
        Ok(Field {
            height,
            width,
            values,
        })
    }

    /// Panics if the shape is below the 3×3 minimum.
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height >= MIN_SIDE && width >= MIN_SIDE, "field too small");
        Field {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(height >= MIN_SIDE && width >= MIN_SIDE, "field too small");
        let mut values = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                values.push(f(i, j));
            }
        }
        Field {
            height,
            width,
            values,
        }
    }

    /// Reshape a vectorized field back onto the grid.
    pub fn from_vec(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(height, width, values)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.width + j] = v;
    }

    /// Value at `(i, j)` with indices clamped into the grid.
    #[inline]
    pub fn clamped(&self, i: isize, j: isize) -> f64 {
        let i = i.clamp(0, self.height as isize - 1) as usize;
        let j = j.clamp(0, self.width as isize - 1) as usize;
        self.values[i * self.width + j]
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Row-major vectorization.
    pub fn to_vec(&self) -> Vec<f64> {
        self.values.clone()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn ensure_same_shape(&self, other: &Field, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// `true` when every value is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// 1 where the value is strictly positive, else 0.
    pub fn positive_mask(&self) -> Field {
        self.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
    }
}

/// Heaviside regularization width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EpsParam(f64);

impl EpsParam {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        Ok(EpsParam(epsilon))
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for EpsParam {
    fn default() -> Self {
        EpsParam(1.0)
    }
}

/// Regularized Heaviside `½(1 + (2/π)·atan(t/ε))`.
#[inline]
pub fn heaviside(t: f64, eps: EpsParam) -> f64 {
    0.5 * (1.0 + std::f64::consts::FRAC_2_PI * (t / eps.0).atan())
}

/// Regularized Dirac `ε / (π(ε² + t²))`, the derivative of [`heaviside`].
#[inline]
pub fn dirac(t: f64, eps: EpsParam) -> f64 {
    let e = eps.0;
    e / (std::f64::consts::PI * (e * e + t * t))
}

/// First and second central differences at one pixel.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Stencil {
    pub dx: f64,
    pub dy: f64,
    pub dxx: f64,
    pub dyy: f64,
    pub dxy: f64,
}

#[inline]
pub(crate) fn stencil(phi: &Field, i: usize, j: usize) -> Stencil {
    let (i, j) = (i as isize, j as isize);
    let c = phi.clamped(i, j);
    let e = phi.clamped(i, j + 1);
    let w = phi.clamped(i, j - 1);
    let s = phi.clamped(i + 1, j);
    let n = phi.clamped(i - 1, j);
    Stencil {
        dx: 0.5 * (e - w),
        dy: 0.5 * (s - n),
        dxx: e - 2.0 * c + w,
        dyy: s - 2.0 * c + n,
        dxy: 0.25
            * (phi.clamped(i + 1, j + 1) - phi.clamped(i + 1, j - 1) - phi.clamped(i - 1, j + 1)
                + phi.clamped(i - 1, j - 1)),
    }
}

#[inline]
fn curvature_at(s: &Stencil) -> f64 {
    let num = s.dxx * s.dy * s.dy - 2.0 * s.dx * s.dy * s.dxy + s.dyy * s.dx * s.dx;
    let den = (s.dx * s.dx + s.dy * s.dy + CURVATURE_REG).powf(1.5);
    num / den
}

/// Curvature `div(∇φ/|∇φ|)` of the level lines of `phi`.
pub fn curvature(phi: &Field) -> Field {
    let (h, w) = phi.shape();
    Field::from_fn(h, w, |i, j| curvature_at(&stencil(phi, i, j)))
}

/// Central-difference gradient magnitude `|∇φ|`.
pub fn gradient_magnitude(phi: &Field) -> Field {
    let (h, w) = phi.shape();
    Field::from_fn(h, w, |i, j| {
        let s = stencil(phi, i, j);
        (s.dx * s.dx + s.dy * s.dy).sqrt()
    })
}

/// Vector-Jacobian product of [`curvature`]: returns `Jᵀ·upstream`, where
/// `J = ∂κ/∂φ` is the (clamped) nine-point stencil operator.
pub fn curvature_vjp(phi: &Field, upstream: &Field) -> Field {
    let (h, w) = phi.shape();
    let mut out = Field::zeros(h, w);
    let (hi, wi) = (h as isize, w as isize);
    let mut scatter = |i: isize, j: isize, v: f64| {
        let i = i.clamp(0, hi - 1) as usize;
        let j = j.clamp(0, wi - 1) as usize;
        out.values[i * w + j] += v;
    };
    for i in 0..h {
        for j in 0..w {
            let g = upstream.get(i, j);
            if g == 0.0 {
                continue;
            }
            let s = stencil(phi, i, j);
            let q = s.dx * s.dx + s.dy * s.dy + CURVATURE_REG;
            let den = q.powf(1.5);
            let num = s.dxx * s.dy * s.dy - 2.0 * s.dx * s.dy * s.dxy + s.dyy * s.dx * s.dx;
            // ∂κ/∂(dx, dy, dxx, dyy, dxy)
            let ddx = (-2.0 * s.dy * s.dxy + 2.0 * s.dyy * s.dx) / den - 3.0 * num * s.dx / (den * q);
            let ddy = (2.0 * s.dxx * s.dy - 2.0 * s.dx * s.dxy) / den - 3.0 * num * s.dy / (den * q);
            let ddxx = s.dy * s.dy / den;
            let ddyy = s.dx * s.dx / den;
            let ddxy = -2.0 * s.dx * s.dy / den;

            let (ii, jj) = (i as isize, j as isize);
            scatter(ii, jj + 1, g * (0.5 * ddx + ddxx));
            scatter(ii, jj - 1, g * (-0.5 * ddx + ddxx));
            scatter(ii + 1, jj, g * (0.5 * ddy + ddyy));
            scatter(ii - 1, jj, g * (-0.5 * ddy + ddyy));
            scatter(ii, jj, g * (-2.0 * ddxx - 2.0 * ddyy));
            scatter(ii + 1, jj + 1, g * 0.25 * ddxy);
            scatter(ii + 1, jj - 1, g * -0.25 * ddxy);
            scatter(ii - 1, jj + 1, g * -0.25 * ddxy);
            scatter(ii - 1, jj - 1, g * 0.25 * ddxy);
        }
    }
    out
}

/// ITU-R 601 luma from 8-bit RGB, scaled to `[0, 1]`.
#[inline]
pub fn luminance(r: u8, g: u8, b: u8) -> f64 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) / 255.0
}
