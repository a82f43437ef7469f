use fluoro_recon::metrics::*;
use fluoro_recon::Curve3D;
use nalgebra::{Rotation3, Unit, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_curve(rng: &mut impl Rng, n: usize) -> Curve3D {
    let mut p = Vector3::from_fn(|_, _| rng.gen_range(-0.02..0.02));
    let mut dir: Vector3<f64> = Vector3::new(1.0, 0.0, 0.0);
    let pts = (0..n)
        .map(|_| {
            let out = p;
            dir = (dir + Vector3::from_fn(|_, _| rng.gen_range(-0.3..0.3))).normalize();
            p += dir * 0.002;
            out
        })
        .collect();
    Curve3D::new(pts).unwrap()
}

fn transform(c: &Curve3D, r: &Rotation3<f64>, t: &Vector3<f64>) -> Curve3D {
    Curve3D::new(c.points().iter().map(|p| r * p + t).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, ..ProptestConfig::default() })]

    #[test]
    fn metric_identities(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_curve(&mut rng, 20);
        let b = random_curve(&mut rng, 25);
        let same = SampleMetrics::compare(&a, &a, 20).unwrap();
        prop_assert_eq!((same.max_ed, same.mete, same.mers), (0.0, 0.0, 0.0));
        let m = SampleMetrics::compare(&a, &b, 20).unwrap();
        prop_assert!(0.0 <= m.mete && m.mete <= m.max_ed);
        prop_assert!(m.mers <= m.max_ed);
        let back = SampleMetrics::compare(&b, &a, 20).unwrap();
        prop_assert_eq!(&m, &back);
    }

    #[test]
    fn metrics_match_direct_oracles(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<Vector3<f64>> = (0..15).map(|_| Vector3::from_fn(|_, _| rng.gen_range(-0.05..0.05))).collect();
        let b: Vec<Vector3<f64>> = (0..15).map(|_| Vector3::from_fn(|_, _| rng.gen_range(-0.05..0.05))).collect();
        let pairs = CurvePairs::new(a.clone(), b.clone());
        let mut worst: f64 = 0.0;
        let mut total = 0.0;
        for i in 0..15 {
            let d = ((a[i].x - b[i].x).powi(2) + (a[i].y - b[i].y).powi(2) + (a[i].z - b[i].z).powi(2)).sqrt() * 1000.0;
            worst = worst.max(d);
            total += d;
        }
        prop_assert!((max_ed(&pairs) - worst).abs() < 1e-12);
        prop_assert!((mers(&pairs) - total / 15.0).abs() < 1e-12);
        prop_assert!((mete(&pairs) - (a[0] - b[0]).norm() * 1000.0).abs() < 1e-12);
    }

    #[test]
    fn summary_is_order_independent(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..10.0)).collect();
        let a = Summary::of(&v);
        v.reverse();
        let b = Summary::of(&v);
        prop_assert!((a.mean - b.mean).abs() <= 1e-15 * a.mean.abs().max(1.0));
        prop_assert!((a.std - b.std).abs() <= 1e-14 * a.std.max(1.0));
    }
}

#[test]
fn rigid_transform_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let a = random_curve(&mut rng, 20);
        let b = random_curve(&mut rng, 20);
        let axis = Unit::new_normalize(Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)));
        let r = Rotation3::from_axis_angle(&axis, rng.gen_range(0.0..std::f64::consts::TAU));
        let t = Vector3::from_fn(|_, _| rng.gen_range(-0.1..0.1));
        let m = SampleMetrics::compare(&a, &b, 20).unwrap();
        let mt = SampleMetrics::compare(&transform(&a, &r, &t), &transform(&b, &r, &t), 20).unwrap();
        for (x, y) in [(m.max_ed, mt.max_ed), (m.mete, mt.mete), (m.mers, mt.mers)] {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }
}

#[test]
fn profile_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let samples: Vec<SampleMetrics> = (0..30)
        .map(|_| SampleMetrics::compare(&random_curve(&mut rng, 20), &random_curve(&mut rng, 20), 20).unwrap())
        .collect();
    let profile = segment_error_profile(&samples);
    let report = MethodReport::aggregate("x", &samples, 0);
    assert_eq!(profile[0], report.mete.mean);
    assert_eq!(segment_error_profile(&samples[..1]), samples[0].point_errors);
    let same: Vec<SampleMetrics> = (0..3)
        .map(|_| {
            let c = random_curve(&mut rng, 20);
            SampleMetrics::compare(&c, &c, 20).unwrap()
        })
        .collect();
    assert!(segment_error_profile(&same).iter().all(|&e| e == 0.0));
}

#[test]
fn uniform_offset_scores_its_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random_curve(&mut rng, 20);
    let d = Vector3::new(0.001, 0.0, 0.0);
    let m = SampleMetrics::compare(&a, &transform(&a, &Rotation3::identity(), &d), 20).unwrap();
    assert!((m.mers - 1.0).abs() < 1e-9 && (m.max_ed - 1.0).abs() < 1e-9 && (m.mete - 1.0).abs() < 1e-9);
}
