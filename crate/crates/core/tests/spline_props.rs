use std::f64::consts::FRAC_PI_2;

use fluoro_recon::spline::*;
use fluoro_recon::Curve3D;
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A smooth random space curve sampled at `n` roughly even points, metres.
fn wiggly(rng: &mut impl Rng, n: usize) -> Curve3D {
    let a: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-0.01..0.01));
    let pts = (0..n)
        .map(|i| {
            let s = i as f64 / (n - 1) as f64;
            Vector3::new(
                0.04 * s + a[0] * (3.0 * s).sin(),
                a[1] * (2.0 * s).cos() + a[2] * s * s,
                a[3] * (4.0 * s).sin() + a[4] * s + a[5] * s * s * s,
            )
        })
        .collect();
    Curve3D::new(pts).unwrap()
}

fn quarter_circle(radius: f64, n: usize) -> Curve3D {
    let pts = (0..n)
        .map(|i| {
            let a = FRAC_PI_2 * i as f64 / (n - 1) as f64;
            Vector3::new(radius * a.cos(), radius * a.sin(), 0.0)
        })
        .collect();
    Curve3D::new(pts).unwrap()
}

/// Arc-length position of `p` on a dense polyline.
fn locate(dense: &[Vector3<f64>], cum: &[f64], p: &Vector3<f64>) -> f64 {
    let mut best = (f64::INFINITY, 0.0);
    for (i, w) in dense.windows(2).enumerate() {
        let d = w[1] - w[0];
        let t = ((p - w[0]).dot(&d) / d.norm_squared()).clamp(0.0, 1.0);
        let dist = (w[0] + d * t - p).norm();
        if dist < best.0 {
            best = (dist, cum[i] + t * d.norm());
        }
    }
    best.1
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn interpolates_at_zero_smoothing(seed in any::<u64>(), n in 2usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = wiggly(&mut rng, n);
        let s = fit_spline(&c, 0.0).unwrap();
        for (t, p) in s.params().iter().zip(c.points()) {
            prop_assert!((s.evaluate(*t) - p).norm() <= 1e-9);
        }
    }

    #[test]
    fn chord_parameters_increase(seed in any::<u64>(), n in 2usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = wiggly(&mut rng, n);
        let t = chord_parameters(c.points()).unwrap();
        prop_assert_eq!(t[0], 0.0);
        prop_assert_eq!(*t.last().unwrap(), 1.0);
        prop_assert!(t.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn resampled_gaps_are_equal(seed in any::<u64>(), n in 5usize..40, m in 5usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = fit_spline(&wiggly(&mut rng, n), 0.0).unwrap();
        let r = s.resample_equal_arclength(m).unwrap();
        // Independent oracle: a 10k-segment polyline of the same spline.
        let (_, dense, cum) = s.dense_polyline(10_000);
        let pos: Vec<f64> = r.points().iter().map(|p| locate(&dense, &cum, p)).collect();
        let gap = cum.last().unwrap() / (m - 1) as f64;
        for w in pos.windows(2) {
            prop_assert!(((w[1] - w[0]) - gap).abs() <= 1e-3 * gap, "gap {} vs {}", w[1] - w[0], gap);
        }
    }

    #[test]
    fn resampling_converges_under_refinement(seed in any::<u64>(), n in 5usize..40, m in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = fit_spline(&wiggly(&mut rng, n), 0.0).unwrap();
        let dense = dense_resolution(m);
        let a = s.resample_with_resolution(m, dense).unwrap();
        let b = s.resample_with_resolution(m, 2 * dense).unwrap();
        for (p, q) in a.points().iter().zip(b.points()) {
            prop_assert!((p - q).norm() < 1e-6);
        }
    }

    #[test]
    fn smoothing_budget_is_respected(seed in any::<u64>(), budget in 1e-9f64..1e-5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clean = wiggly(&mut rng, 30);
        let noisy = Curve3D::new(
            clean.points().iter().map(|p| p + Vector3::from_fn(|_, _| rng.gen_range(-5e-4..5e-4))).collect(),
        ).unwrap();
        let s = fit_spline(&noisy, budget).unwrap();
        prop_assert!(s.residual_sum_of_squares(&noisy) <= budget * (1.0 + 1e-9));
    }
}

#[test]
fn arc_length_of_analytic_segments() {
    let line = Curve3D::new((0..1000).map(|i| Vector3::new(0.0, 3e-5 * i as f64, 4e-5 * i as f64)).collect()).unwrap();
    let expected = 999.0 * 5e-5;
    assert!((fit_spline(&line, 0.0).unwrap().arc_length() - expected).abs() <= 1e-4 * expected);

    let r = 0.02;
    let arc = fit_spline(&quarter_circle(r, 1000), 0.0).unwrap().arc_length();
    assert!((arc - FRAC_PI_2 * r).abs() <= 1e-4 * FRAC_PI_2 * r, "{arc}");
}

#[test]
fn degenerate_inputs_are_rejected() {
    assert!(matches!(fit_spline(&quarter_circle(0.01, 10), -1.0), Err(SplineError::InvalidSmoothing(_))));
    let c = quarter_circle(0.01, 10);
    assert!(fit_spline(&c, 0.0).unwrap().resample_equal_arclength(1).is_err());
}
