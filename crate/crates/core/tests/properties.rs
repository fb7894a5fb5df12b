use proptest::prelude::*;
use rand::Rng;
use rls_core::bench::{f_measure, fcn_forward, fcn_init, FcnConfig};
use rls_core::cls::{checkerboard_init, evolution_step, region_means, segment_cls, ClsConfig};
use rls_core::grid::{curvature, dirac, heaviside};
use rls_core::rls::{forward, init_params, softmax_pixels, ParamSet, Parameterization, RlsConfig};
use rls_core::synth::{augment, build_dataset, AffineSpec, GenConfig};
use rls_core::train::{
    backward, lr_schedule, one_hot_batch, rmsprop_update, BpttMode, OptState, TrainConfig,
};
use rls_core::{seed, EpsParam, Field};

fn random_field(h: usize, w: usize, s: u64, lo: f64, hi: f64) -> Field {
    let mut rng = seed::rng(s);
    Field::from_fn(h, w, |_, _| rng.random_range(lo..hi))
}

fn random_mask(h: usize, w: usize, s: u64) -> Field {
    let mut rng = seed::rng(s);
    Field::from_fn(h, w, |_, _| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
}

fn random_params(cfg: &RlsConfig, s: u64) -> ParamSet {
    let mut p = init_params(cfg);
    let mut rng = seed::rng(s);
    for (name, block) in p.blocks_mut() {
        if name.starts_with('b') {
            for v in block.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
    }
    p
}

fn disk(n: usize) -> Field {
    let c = (n as f64 - 1.0) / 2.0;
    let r = 0.25 * n as f64;
    Field::from_fn(n, n, |i, j| {
        let d = ((i as f64 - c).powi(2) + (j as f64 - c).powi(2)).sqrt();
        if d <= r {
            1.0
        } else {
            0.0
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn heaviside_bounded_and_monotone(t in -1e3f64..1e3, dt in 1e-6f64..10.0, eps in 1e-3f64..10.0) {
        let e = EpsParam::new(eps).unwrap();
        let (a, b) = (heaviside(t, e), heaviside(t + dt, e));
        prop_assert!(a > 0.0 && a < 1.0);
        prop_assert!(b >= a);
    }

    #[test]
    fn dirac_is_even(t in -1e3f64..1e3, eps in 1e-3f64..10.0) {
        let e = EpsParam::new(eps).unwrap();
        prop_assert_eq!(dirac(t, e), dirac(-t, e));
    }

    #[test]
    fn affine_fields_have_zero_curvature(
        a in -5.0f64..5.0, b in -5.0f64..5.0, c in -5.0f64..5.0, h in 3usize..12, w in 3usize..12,
    ) {
        let phi = Field::from_fn(h, w, |i, j| a * i as f64 + b * j as f64 + c);
        let k = curvature(&phi);
        for i in 1..h - 1 {
            for j in 1..w - 1 {
                prop_assert!(k.get(i, j).abs() < 1e-9, "kappa({i},{j}) = {}", k.get(i, j));
            }
        }
    }

    #[test]
    fn region_means_stay_in_image_range(s in any::<u64>(), h in 3usize..10, w in 3usize..10) {
        let img = random_field(h, w, s, 0.0, 1.0);
        let phi = random_field(h, w, s ^ 1, -3.0, 3.0);
        let (c1, c2) = region_means(&img, &phi, EpsParam::default()).unwrap();
        let tol = 1e-12;
        prop_assert!(c1 >= img.min() - tol && c1 <= img.max() + tol);
        prop_assert!(c2 >= img.min() - tol && c2 <= img.max() + tol);
    }

    #[test]
    fn zero_force_weights_leave_phi_unchanged(s in any::<u64>()) {
        let img = random_field(7, 6, s, 0.0, 1.0);
        let phi = random_field(7, 6, s ^ 2, -2.0, 2.0);
        let cfg = ClsConfig { mu: 0.0, nu: 0.0, lambda1: 0.0, lambda2: 0.0, ..ClsConfig::default() };
        prop_assert_eq!(evolution_step(&img, &phi, &cfg).unwrap(), phi);
    }

    #[test]
    fn recurrence_invariants(s in any::<u64>(), h in 3usize..8, w in 3usize..8, steps in 1usize..5) {
        let cfg = RlsConfig { height: h, width: w, steps, seed: s, init_scale: 2.0, ..RlsConfig::default() };
        let params = random_params(&cfg, s ^ 3);
        let img = random_field(h, w, s ^ 4, 0.0, 1.0);
        let cache = forward(&img, &params, &cfg).unwrap();
        let bound = cache.phi0.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let mut prev = cache.phi0.clone();
        for st in &cache.steps {
            for n in 0..h * w {
                let (p, o, phi) = (prev[[n, 0]], st.o[[n, 0]], st.phi[[n, 0]]);
                prop_assert!(st.z[[n, 0]] > 0.0 && st.z[[n, 0]] < 1.0);
                prop_assert!(st.r[[n, 0]] > 0.0 && st.r[[n, 0]] < 1.0);
                prop_assert!(o > -1.0 && o < 1.0);
                prop_assert!(phi >= p.min(o) - 1e-15 && phi <= p.max(o) + 1e-15);
                prop_assert!(phi.abs() <= bound + 1e-15);
            }
            prev = st.phi.clone();
        }
        for px in cache.y_hat.column(0).to_vec().chunks(2) {
            prop_assert!((px[0] + px[1] - 1.0).abs() < 1e-12);
        }
        let again = forward(&img, &params, &cfg).unwrap();
        prop_assert_eq!(again.y_hat, cache.y_hat);
    }

    #[test]
    fn logit_gradient_is_prediction_minus_target(s in any::<u64>(), h in 3usize..6, w in 3usize..6) {
        // With every recurrent weight zeroed the hidden state is a known
        // constant, so dL/db_V isolates the softmax-cross-entropy gradient.
        let cfg = RlsConfig { height: h, width: w, steps: 1, init_scale: 0.0, ..RlsConfig::default() };
        let mut params = init_params(&cfg);
        let mut rng = seed::rng(s);
        params.b_v.mapv_inplace(|_| rng.random_range(-3.0..3.0));
        let img = random_field(h, w, s ^ 5, 0.0, 1.0);
        let mask = random_mask(h, w, s ^ 6);
        let cache = forward(&img, &params, &cfg).unwrap();
        let targets = one_hot_batch(&rls_core::rls::stack_fields(&[&mask]).unwrap());
        let g = backward(&cache, &targets, &params, cfg.epsilon, BpttMode::Truncated).unwrap();
        let y_hat = softmax_pixels(&cache.logits);
        for k in 0..y_hat.nrows() {
            prop_assert!((g.b_v[k] - (y_hat[[k, 0]] - targets[[k, 0]])).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gradient_update_is_identity(s in any::<u64>(), lr in 0.0f64..1.0) {
        let cfg = RlsConfig { height: 4, width: 3, steps: 1, seed: s, ..RlsConfig::default() };
        let mut params = random_params(&cfg, s);
        let before = params.clone();
        let mut opt = OptState::new(&params);
        let zero = params.zeros_like();
        rmsprop_update(&mut params, &zero, &mut opt, lr, &TrainConfig::default()).unwrap();
        prop_assert_eq!(params, before);
    }

    #[test]
    fn schedule_non_increasing_and_floored(e in 0usize..100_000, eta0 in 1e-6f64..1.0, every in 1usize..500) {
        let c = TrainConfig { eta0, halve_every: every, ..TrainConfig::default() };
        let (a, b) = (lr_schedule(e, &c), lr_schedule(e + 1, &c));
        prop_assert!(b <= a);
        prop_assert!(b >= c.eta_floor);
    }

    #[test]
    fn augment_keeps_image_and_mask_paired(
        s in any::<u64>(), rot in -180.0f64..180.0, dx in -4.0f64..4.0, dy in -4.0f64..4.0,
        scale in 0.5f64..2.0, fh in any::<bool>(), fv in any::<bool>(),
    ) {
        // A blocky binary probe goes in as both image and mask. Wherever the
        // bilinear image sample is exactly 0 or 1, every neighbour it touched
        // has that value, so the nearest-neighbour mask sample must agree.
        let mut rng = seed::rng(s);
        let blocks: Vec<f64> = (0..64).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let probe = Field::from_fn(24, 24, |i, j| blocks[(i / 3) * 8 + j / 3]);
        let spec = AffineSpec { rotation: rot, translation: [dx, dy], scale, flip_h: fh, flip_v: fv };
        let (img, mask) = augment(&probe, &probe, &spec, 0.0).unwrap();
        prop_assert!(mask.is_binary());
        let mut checked = 0;
        for (a, b) in img.values().iter().zip(mask.values()) {
            if *a == 0.0 || *a == 1.0 {
                prop_assert_eq!(a, b);
                checked += 1;
            }
        }
        prop_assert!(checked > 0);
    }

    #[test]
    fn iou_never_exceeds_f(s in any::<u64>(), h in 3usize..10, w in 3usize..10) {
        let a = random_mask(h, w, s);
        let b = random_mask(h, w, s ^ 7);
        let sc = f_measure(&a, &b).unwrap();
        prop_assert!(sc.iou <= sc.f + 1e-15);
        if sc.f > 0.0 {
            prop_assert!((sc.f - 2.0 * sc.iou / (1.0 + sc.iou)).abs() < 1e-12);
        }
    }

    #[test]
    fn fcn_softmax_rows_sum_to_one(s in any::<u64>(), h in 3usize..6, w in 3usize..6) {
        let params = fcn_init(&FcnConfig { height: h, width: w, seed: s, init_scale: 3.0, ..FcnConfig::default() });
        let img = random_field(h, w, s ^ 8, 0.0, 1.0);
        for px in fcn_forward(&img, &params).unwrap().chunks(2) {
            prop_assert!((px[0] + px[1] - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn dirac_integrates_to_one() {
    for eps in [0.1, 1.0, 3.0] {
        let e = EpsParam::new(eps).unwrap();
        let n = 200_000;
        let (a, b) = (-100.0 * eps, 100.0 * eps);
        let dx = (b - a) / n as f64;
        let mut s = 0.5 * (dirac(a, e) + dirac(b, e));
        for k in 1..n {
            s += dirac(a + k as f64 * dx, e);
        }
        assert!((s * dx - 1.0).abs() < 1e-2, "eps {eps}: {}", s * dx);
    }
}

fn circle_curvature_error(n: usize) -> f64 {
    // Signed distance to a circle of radius n/4 about the grid centre,
    // sampled on a grid of side n covering the same physical square.
    let h = 1.0 / n as f64;
    let c = 0.5;
    let r = 0.25;
    let phi = Field::from_fn(n, n, |i, j| {
        let (x, y) = ((i as f64 + 0.5) * h, (j as f64 + 0.5) * h);
        ((x - c).powi(2) + (y - c).powi(2)).sqrt() - r
    });
    let k = curvature(&phi);
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let (x, y) = ((i as f64 + 0.5) * h, (j as f64 + 0.5) * h);
            let d = ((x - c).powi(2) + (y - c).powi(2)).sqrt();
            if (0.15..=0.35).contains(&d) {
                // Curvature in grid units is h / d.
                worst = worst.max((k.get(i, j) - h / d).abs() / (h / d));
            }
        }
    }
    worst
}

#[test]
fn circle_curvature_converges_with_resolution() {
    let coarse = circle_curvature_error(32);
    let fine = circle_curvature_error(64);
    assert!(fine < coarse, "{fine} >= {coarse}");
    assert!((coarse / fine).log2() >= 1.0, "observed order {}", (coarse / fine).log2());
}

#[test]
fn circle_curvature_matches_inverse_radius() {
    let n = 64;
    let c = 31.5;
    let phi = Field::from_fn(n, n, |i, j| ((i as f64 - c).powi(2) + (j as f64 - c).powi(2)).sqrt() - 10.0);
    let k = curvature(&phi);
    for i in 0..n {
        for j in 0..n {
            let d = ((i as f64 - c).powi(2) + (j as f64 - c).powi(2)).sqrt();
            if (5.0..=15.0).contains(&d) {
                assert!((k.get(i, j) - 1.0 / d).abs() <= 0.02, "({i},{j}) d {d}: {}", k.get(i, j));
            }
        }
    }
}

#[test]
fn energy_non_increasing_for_small_steps() {
    let img = disk(64);
    let cfg = ClsConfig {
        eta: 1e-3,
        max_iters: 200,
        ..ClsConfig::default()
    };
    let out = segment_cls(&img, &cfg).unwrap();
    for w in out.energy_trace.windows(2) {
        assert!(w[1] <= w[0] + 1e-7, "{} -> {}", w[0], w[1]);
    }
}

#[test]
fn cls_is_deterministic() {
    let img = random_field(20, 20, 11, 0.0, 1.0);
    let cfg = ClsConfig {
        max_iters: 50,
        ..ClsConfig::default()
    };
    let a = segment_cls(&img, &cfg).unwrap();
    let b = segment_cls(&img, &cfg).unwrap();
    assert_eq!(a.mask, b.mask);
    assert_eq!(a.phi, b.phi);
}

#[test]
fn checkerboard_is_bounded() {
    let phi = checkerboard_init(17, 23, 5);
    assert!(phi.values().iter().all(|v| v.abs() <= 1.0));
}

#[test]
fn generated_data_ranges_and_determinism() {
    let cfg = GenConfig {
        n: 12,
        seed: 7,
        height: 16,
        width: 16,
        render_size: 32,
        ..GenConfig::default()
    };
    let a = build_dataset(&cfg).unwrap();
    let b = build_dataset(&cfg).unwrap();
    assert_eq!(a.manifest.to_json(), b.manifest.to_json());
    for s in a.train.iter().chain(&a.test) {
        assert!(s.image.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(s.mask.is_binary());
    }
}

#[test]
fn single_sample_loss_decreases() {
    let cfg = RlsConfig {
        height: 6,
        width: 6,
        steps: 2,
        ..RlsConfig::default()
    };
    let img = disk(6).map(|v| 0.2 + 0.6 * v);
    let sample = rls_core::synth::Sample::new("s", img, disk(6)).unwrap();
    let tc = TrainConfig {
        epochs: 50,
        eta0: 1e-3,
        ..TrainConfig::default()
    };
    let (_, hist) = rls_core::train::train(std::slice::from_ref(&sample), &cfg, &tc, None).unwrap();
    let first = hist.rows.first().unwrap().mean_loss;
    let last = hist.rows.last().unwrap().mean_loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn gradients_match_finite_differences_in_both_parameterizations() {
    for mode in [Parameterization::Dense, Parameterization::Diagonal] {
        let cfg = RlsConfig {
            height: 5,
            width: 4,
            steps: 3,
            parameterization: mode,
            ..RlsConfig::default()
        };
        let report = rls_core::train::grad_check(&cfg, BpttMode::Truncated, 1e-6, 1e-4, 3).unwrap();
        assert!(report.passed, "{mode:?}: {}", report.max_rel_err());
    }
}
