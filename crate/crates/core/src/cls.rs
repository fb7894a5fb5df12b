//! Classic two-phase Chan-Vese segmentation by explicit gradient descent on
//! the level-set function.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{curvature, dirac, gradient_magnitude, heaviside, EpsParam, Field};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClsConfig {
    /// Area weight.
    pub mu: f64,
    /// Length weight.
    pub nu: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epsilon: EpsParam,
    /// Explicit step size.
    pub eta: f64,
    pub max_iters: usize,
    /// Stop once the mean absolute update falls below this.
    pub tol: f64,
    pub checker_period: usize,
}

impl Default for ClsConfig {
    fn default() -> Self {
        ClsConfig {
            mu: 0.0,
            nu: 0.2,
            lambda1: 1.0,
            lambda2: 1.0,
            epsilon: EpsParam::default(),
            eta: 0.1,
            max_iters: 500,
            tol: 1e-4,
            checker_period: 5,
        }
    }
}

impl ClsConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("cls.{what}")));
        if !(self.mu >= 0.0) {
            return bad("mu must be >= 0");
        }
        if !(self.nu >= 0.0) {
            return bad("nu must be >= 0");
        }
        if !(self.lambda1 > 0.0 && self.lambda2 > 0.0) {
            return bad("lambda1 and lambda2 must be > 0");
        }
        EpsParam::new(self.epsilon.get())?;
        if !(self.eta > 0.0) {
            return bad("eta must be > 0");
        }
        if !(self.tol > 0.0) {
            return bad("tol must be > 0");
        }
        if self.checker_period < 2 {
            return bad("checker_period must be >= 2");
        }
        Ok(())
    }
}

/// `φ₀(i, j) = sin(πi/p)·sin(πj/p)`.
pub fn checkerboard_init(height: usize, width: usize, period: usize) -> Field {
    let p = period.max(1) as f64;
    let pi = std::f64::consts::PI;
    Field::from_fn(height, width, |i, j| {
        (pi * i as f64 / p).sin() * (pi * j as f64 / p).sin()
    })
}

/// Smoothed mean intensities inside (`φ > 0`) and outside the contour.
pub fn region_means(image: &Field, phi: &Field, eps: EpsParam) -> Result<(f64, f64)> {
    image.ensure_same_shape(phi, "region_means")?;
    Ok(region_means_unchecked(image.values(), phi.values(), eps))
}

pub(crate) fn region_means_unchecked(image: &[f64], phi: &[f64], eps: EpsParam) -> (f64, f64) {
    let (mut num_in, mut den_in, mut num_out, mut den_out) = (0.0, 0.0, 0.0, 0.0);
    for (&i, &p) in image.iter().zip(phi) {
        let h = heaviside(p, eps);
        num_in += i * h;
        den_in += h;
        num_out += i * (1.0 - h);
        den_out += 1.0 - h;
    }
    (num_in / den_in, num_out / den_out)
}

/// One explicit descent step with `c1`, `c2` frozen at their values for the
/// input `phi`.
pub fn evolution_step(image: &Field, phi: &Field, cfg: &ClsConfig) -> Result<Field> {
    let (c1, c2) = region_means(image, phi, cfg.epsilon)?;
    let kappa = if cfg.nu != 0.0 {
        Some(curvature(phi))
    } else {
        None
    };
    let mut next = phi.clone();
    for (n, v) in next.values_mut().iter_mut().enumerate() {
        let i = image.values()[n];
        let k = kappa.as_ref().map_or(0.0, |k| k.values()[n]);
        let force = cfg.nu * k - cfg.mu - cfg.lambda1 * (i - c1).powi(2)
            + cfg.lambda2 * (i - c2).powi(2);
        *v += cfg.eta * dirac(*v, cfg.epsilon) * force;
    }
    Ok(next)
}

/// Discrete Chan-Vese energy with `c1`, `c2` set to the region means of `phi`.
pub fn energy(image: &Field, phi: &Field, cfg: &ClsConfig) -> Result<f64> {
    let (c1, c2) = region_means(image, phi, cfg.epsilon)?;
    let grad = if cfg.nu != 0.0 {
        Some(gradient_magnitude(phi))
    } else {
        None
    };
    let eps = cfg.epsilon;
    let mut e = 0.0;
    for n in 0..phi.len() {
        let p = phi.values()[n];
        let i = image.values()[n];
        let h = heaviside(p, eps);
        let g = grad.as_ref().map_or(0.0, |g| g.values()[n]);
        e += cfg.mu * h
            + cfg.nu * dirac(p, eps) * g
            + cfg.lambda1 * (i - c1).powi(2) * h
            + cfg.lambda2 * (i - c2).powi(2) * (1.0 - h);
    }
    Ok(e)
}

#[derive(Clone, Debug)]
pub struct ClsOutcome {
    /// 1 where the final `φ > 0`.
    pub mask: Field,
    pub phi: Field,
    pub iters: usize,
    /// Energy of `φ₀` followed by the energy after every step.
    pub energy_trace: Vec<f64>,
}

pub fn segment_cls(image: &Field, cfg: &ClsConfig) -> Result<ClsOutcome> {
    run_cls(image, cfg, true)
}

/// Same evolution as [`segment_cls`] without recording energies.
pub fn segment_cls_fast(image: &Field, cfg: &ClsConfig) -> Result<ClsOutcome> {
    run_cls(image, cfg, false)
}

fn run_cls(image: &Field, cfg: &ClsConfig, trace: bool) -> Result<ClsOutcome> {
    cfg.validate()?;
    let (h, w) = image.shape();
    let mut phi = checkerboard_init(h, w, cfg.checker_period);
    let mut energy_trace = Vec::new();
    if trace {
        energy_trace.push(energy(image, &phi, cfg)?);
    }
    let mut iters = 0;
    while iters < cfg.max_iters {
        let next = evolution_step(image, &phi, cfg)?;
        let mean_change = next
            .values()
            .iter()
            .zip(phi.values())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / phi.len() as f64;
        phi = next;
        iters += 1;
        if trace {
            energy_trace.push(energy(image, &phi, cfg)?);
        }
        if mean_change < cfg.tol {
            break;
        }
    }
    Ok(ClsOutcome {
        mask: phi.positive_mask(),
        phi,
        iters,
        energy_trace,
    })
}

/// Writes `iter,energy` rows.
pub fn write_energy_csv(trace: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    writeln!(out, "iter,energy").unwrap();
    for (k, e) in trace.iter().enumerate() {
        writeln!(out, "{k},{e:.12e}").unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_phase(n: usize) -> Field {
        Field::from_fn(n, n, |i, j| if (3..n - 3).contains(&i) && (4..n - 2).contains(&j) { 0.9 } else { 0.1 })
    }

    #[test]
    fn checkerboard_values() {
        let phi = checkerboard_init(3, 3, 4);
        assert_eq!(phi.get(0, 0), 0.0);
        let phi = checkerboard_init(8, 8, 5);
        let expected = (2.0 * std::f64::consts::PI / 5.0).sin().powi(2);
        assert!((phi.get(2, 2) - expected).abs() < 1e-15);
        assert!((expected - 0.9045).abs() < 1e-4);
        assert!(phi.values().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn region_means_of_constant_image() {
        let img = Field::filled(6, 6, 0.7);
        let phi = checkerboard_init(6, 6, 3);
        let (c1, c2) = region_means(&img, &phi, EpsParam::default()).unwrap();
        assert!((c1 - 0.7).abs() < 1e-12 && (c2 - 0.7).abs() < 1e-12);
    }

    #[test]
    fn region_means_swap_under_negation() {
        let img = two_phase(9);
        let phi = checkerboard_init(9, 9, 4);
        let neg = phi.map(|v| -v);
        let eps = EpsParam::new(0.5).unwrap();
        let (a1, a2) = region_means(&img, &phi, eps).unwrap();
        let (b1, b2) = region_means(&img, &neg, eps).unwrap();
        assert!((a1 - b2).abs() < 1e-12 && (a2 - b1).abs() < 1e-12);
    }

    #[test]
    fn region_means_shape_mismatch() {
        let r = region_means(&Field::zeros(4, 4), &Field::zeros(4, 5), EpsParam::default());
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn evolution_is_identity_without_forces() {
        let img = Field::filled(7, 7, 0.3);
        let phi = checkerboard_init(7, 7, 3);
        let cfg = ClsConfig {
            nu: 0.0,
            ..ClsConfig::default()
        };
        assert_eq!(evolution_step(&img, &phi, &cfg).unwrap(), phi);
    }

    #[test]
    fn update_sign_at_background_pixel() {
        let img = two_phase(10);
        // Positive on the object and at one background pixel.
        let phi = Field::from_fn(10, 10, |i, j| {
            if img.get(i, j) > 0.5 || (i, j) == (0, 0) {
                0.5
            } else {
                -0.5
            }
        });
        let cfg = ClsConfig {
            nu: 0.0,
            ..ClsConfig::default()
        };
        let (c1, c2) = region_means(&img, &phi, cfg.epsilon).unwrap();
        let next = evolution_step(&img, &phi, &cfg).unwrap();
        let i = img.get(0, 0);
        assert!((i - c1).powi(2) > (i - c2).powi(2));
        assert!(next.get(0, 0) - phi.get(0, 0) < 0.0);
        // Object pixels are pushed further inside.
        assert!(next.get(5, 5) > phi.get(5, 5));
    }

    #[test]
    fn energy_zero_cases() {
        let img = two_phase(8);
        let phi = checkerboard_init(8, 8, 3);
        let zero = ClsConfig {
            mu: 0.0,
            nu: 0.0,
            lambda1: 0.0,
            lambda2: 0.0,
            ..ClsConfig::default()
        };
        assert_eq!(energy(&img, &phi, &zero).unwrap(), 0.0);
        let constant = Field::filled(8, 8, 0.4);
        let fit_only = ClsConfig {
            nu: 0.0,
            ..ClsConfig::default()
        };
        assert!(energy(&constant, &phi, &fit_only).unwrap().abs() < 1e-25);
    }

    #[test]
    fn no_iterations_returns_thresholded_checkerboard() {
        let img = two_phase(12);
        let cfg = ClsConfig {
            max_iters: 0,
            ..ClsConfig::default()
        };
        let out = segment_cls(&img, &cfg).unwrap();
        assert_eq!(out.iters, 0);
        assert_eq!(out.mask, checkerboard_init(12, 12, 5).positive_mask());
        assert_eq!(out.energy_trace.len(), 1);
    }

    #[test]
    fn config_validation() {
        assert!(ClsConfig::default().validate().is_ok());
        let bad = ClsConfig {
            lambda1: 0.0,
            ..ClsConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ClsConfig {
            checker_period: 1,
            ..ClsConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
