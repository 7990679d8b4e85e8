use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use phr_core::geometry::stream_rng;
use phr_core::landmarks::LandmarkSet3D;
use phr_core::metrics::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> LandmarkSet3D {
    LandmarkSet3D::new(
        (0..n)
            .map(|_| {
                [
                    rng.random_range(-50.0..50.0),
                    rng.random_range(-50.0..50.0),
                    rng.random_range(-20.0..20.0),
                ]
            })
            .collect(),
    )
    .unwrap()
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let axis = Unit::new_normalize(Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ));
    *Rotation3::from_axis_angle(&axis, rng.random_range(-3.1..3.1)).matrix()
}

fn transform(lm: &LandmarkSet3D, s: f64, r: &Matrix3<f64>, t: [f64; 3]) -> LandmarkSet3D {
    LandmarkSet3D::new(
        lm.points
            .iter()
            .map(|p| {
                let v = r * Vector3::from(*p) * s;
                [v[0] + t[0], v[1] + t[1], v[2] + t[2]]
            })
            .collect(),
    )
    .unwrap()
}

/// Direct loop over the definition, kept separate from the library code.
fn naive_gte(pred: &LandmarkSet3D, gt: &LandmarkSet3D, axes: [bool; 3], eyes: (usize, usize)) -> f64 {
    let (a, b) = (gt.points[eyes.0], gt.points[eyes.1]);
    let d = ((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1])).sqrt();
    let mut total = 0.0;
    for i in 0..gt.len() {
        let mut sq = 0.0;
        for k in 0..3 {
            if axes[k] {
                sq += (pred.points[i][k] - gt.points[i][k]).powi(2);
            }
        }
        total += sq.sqrt();
    }
    100.0 * total / (gt.len() as f64 * d)
}

#[test]
fn gte_matches_naive_loop() {
    let mut rng = stream_rng(3, &[]);
    let cfg = MetricConfig::new((0, 1));
    for _ in 0..200 {
        let gt = cloud(&mut rng, 9);
        let pred = cloud(&mut rng, 9);
        for (axes, mask) in [
            (Axes::X, [true, false, false]),
            (Axes::Y, [false, true, false]),
            (Axes::Z, [false, false, true]),
            (Axes::XY, [true, true, false]),
            (Axes::XYZ, [true, true, true]),
        ] {
            let got = gte(&pred, &gt, axes, &cfg).unwrap();
            let want = naive_gte(&pred, &gt, mask, (0, 1));
            assert!((got - want).abs() <= 1e-12 * want.max(1.0));
        }
    }
}

#[test]
fn gte_of_identical_sets_is_zero() {
    let mut rng = stream_rng(4, &[]);
    let gt = cloud(&mut rng, 66);
    assert_eq!(gte(&gt, &gt, Axes::XYZ, &MetricConfig::new((36, 45))).unwrap(), 0.0);
}

#[test]
fn one_displaced_point_gives_one_over_n() {
    // Eyes one unit apart; a unit displacement of one point out of N.
    for n in [5, 12, 66] {
        let mut pts: Vec<[f64; 3]> = (0..n).map(|i| [i as f64 * 0.01, 0.0, 0.0]).collect();
        pts[0] = [0.0, 0.0, 0.0];
        pts[1] = [1.0, 0.0, 0.0];
        let gt = LandmarkSet3D::new(pts.clone()).unwrap();
        pts[n - 1][2] += 1.0;
        let pred = LandmarkSet3D::new(pts).unwrap();
        let e = gte(&pred, &gt, Axes::XYZ, &MetricConfig::new((0, 1))).unwrap();
        assert!((e - 100.0 / n as f64).abs() < 1e-12);
    }
}

#[test]
fn xyz_normalizer_includes_depth() {
    let gt = LandmarkSet3D::new(vec![[0.0, 0.0, 0.0], [3.0, 0.0, 4.0], [1.0, 1.0, 1.0]]).unwrap();
    assert_eq!(interocular_distance(&gt, (0, 1), Normalizer::Xy).unwrap(), 3.0);
    assert_eq!(interocular_distance(&gt, (0, 1), Normalizer::Xyz).unwrap(), 5.0);
    assert!(interocular_distance(&gt, (0, 0), Normalizer::Xy).is_err());
    assert!(interocular_distance(&gt, (0, 7), Normalizer::Xy).is_err());
}

#[test]
fn coincident_eyes_are_degenerate() {
    let gt = LandmarkSet3D::new(vec![[1.0, 1.0, 0.0], [1.0, 1.0, 5.0], [0.0, 0.0, 0.0]]).unwrap();
    assert!(matches!(
        gte(&gt, &gt, Axes::XY, &MetricConfig::new((0, 1))),
        Err(phr_core::CoreError::Degenerate(_))
    ));
}

#[test]
fn forward_constructed_similarities_are_recovered() {
    let mut rng = stream_rng(5, &[]);
    for _ in 0..50 {
        let src = cloud(&mut rng, 12);
        let r = random_rotation(&mut rng);
        let s = rng.random_range(0.2..5.0);
        let t = [rng.random_range(-99.0..99.0), rng.random_range(-99.0..99.0), rng.random_range(-99.0..99.0)];
        let dst = transform(&src, s, &r, t);
        let fit = fit_similarity(&src, &dst).unwrap();
        assert!(fit.residual(&src, &dst) < 1e-9);
        assert!((fit.s - s).abs() < 1e-9);
        assert!((fit.rotation() - r).abs().max() < 1e-9);
        assert!((fit.rotation().determinant() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn reflected_target_still_gets_a_proper_rotation() {
    let mut rng = stream_rng(6, &[]);
    let src = cloud(&mut rng, 10);
    let mirrored = LandmarkSet3D::new(src.points.iter().map(|p| [-p[0], p[1], p[2]]).collect()).unwrap();
    let fit = fit_similarity(&src, &mirrored).unwrap();
    assert!((fit.rotation().determinant() - 1.0).abs() < 1e-12);
    assert!(fit.residual(&src, &mirrored) > 1.0);
}

/// Brute-force search over rotations about z plus closed-form s and t;
/// the fitted similarity may never do worse.
#[test]
fn fit_beats_grid_search_on_random_instances() {
    let mut rng = stream_rng(7, &[]);
    for _ in 0..100 {
        let src = cloud(&mut rng, 8);
        let r = Rotation3::from_axis_angle(&Vector3::z_axis(), rng.random_range(-3.1..3.1));
        let noisy = transform(&src, rng.random_range(0.5..2.0), r.matrix(), [3.0, -2.0, 1.0]);
        let dst = LandmarkSet3D::new(
            noisy
                .points
                .iter()
                .map(|p| [p[0] + rng.random_range(-2.0..2.0), p[1] + rng.random_range(-2.0..2.0), p[2] + rng.random_range(-2.0..2.0)])
                .collect(),
        )
        .unwrap();
        let fitted = fit_similarity(&src, &dst).unwrap().residual(&src, &dst);
        let mut best = f64::INFINITY;
        for step in 0..720 {
            let a = step as f64 / 720.0 * std::f64::consts::TAU;
            let rot = *Rotation3::from_axis_angle(&Vector3::z_axis(), a).matrix();
            best = best.min(grid_residual(&src, &dst, &rot));
        }
        assert!(fitted <= best + 1e-9, "fit {fitted} vs grid {best}");
    }
}

fn grid_residual(src: &LandmarkSet3D, dst: &LandmarkSet3D, r: &Matrix3<f64>) -> f64 {
    let n = src.len() as f64;
    let mx: Vector3<f64> = src.points.iter().map(|p| Vector3::from(*p)).sum::<Vector3<f64>>() / n;
    let my: Vector3<f64> = dst.points.iter().map(|p| Vector3::from(*p)).sum::<Vector3<f64>>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (p, q) in src.points.iter().zip(&dst.points) {
        let a = r * (Vector3::from(*p) - mx);
        num += a.dot(&(Vector3::from(*q) - my));
        den += a.norm_squared();
    }
    let s = (num / den).max(0.0);
    src.points
        .iter()
        .zip(&dst.points)
        .map(|(p, q)| (r * (Vector3::from(*p) - mx) * s + my - Vector3::from(*q)).norm_squared())
        .sum()
}

#[test]
fn collinear_sources_are_degenerate() {
    let src = LandmarkSet3D::new((0..5).map(|i| [i as f64, 2.0 * i as f64, 0.5 * i as f64]).collect()).unwrap();
    let mut rng = stream_rng(8, &[]);
    let dst = cloud(&mut rng, 5);
    assert!(matches!(fit_similarity(&src, &dst), Err(phr_core::CoreError::Degenerate(_))));
}

#[test]
fn cvgtce_is_zero_for_similar_copies_and_bounded_by_gte() {
    let mut rng = stream_rng(9, &[]);
    let cfg = MetricConfig::new((0, 1));
    let gt = cloud(&mut rng, 10);
    let moved = transform(&gt, 1.3, &random_rotation(&mut rng), [5.0, 6.0, 7.0]);
    assert!(cvgtce(&moved, &gt, &cfg).unwrap() < 1e-9);

    let mut violations = 0;
    for _ in 0..1000 {
        let gt = cloud(&mut rng, 10);
        let pred = LandmarkSet3D::new(
            gt.points
                .iter()
                .map(|p| [p[0] + rng.random_range(-5.0..5.0), p[1] + rng.random_range(-5.0..5.0), p[2] + rng.random_range(-5.0..5.0)])
                .collect(),
        )
        .unwrap();
        if cvgtce(&pred, &gt, &cfg).unwrap() > gte(&pred, &gt, Axes::XYZ, &cfg).unwrap() + 1e-9 {
            violations += 1;
        }
    }
    assert_eq!(violations, 0);
}

#[test]
fn translation_flag_changes_cvgtce() {
    let mut rng = stream_rng(10, &[]);
    let gt = cloud(&mut rng, 6);
    let shifted = transform(&gt, 1.0, &Matrix3::identity(), [10.0, 0.0, 0.0]);
    let mut cfg = MetricConfig::new((0, 1));
    assert!(cvgtce(&shifted, &gt, &cfg).unwrap() < 1e-9);
    cfg.cvgtce_translation = false;
    assert!(cvgtce(&shifted, &gt, &cfg).unwrap() > 1.0);
}

#[test]
fn gte_is_invariant_under_in_plane_similarity() {
    let mut rng = stream_rng(11, &[]);
    let cfg = MetricConfig::new((0, 1));
    for _ in 0..200 {
        let gt = cloud(&mut rng, 7);
        let pred = cloud(&mut rng, 7);
        let r = *Rotation3::from_axis_angle(&Vector3::z_axis(), rng.random_range(-3.0..3.0)).matrix();
        let (s, t) = (rng.random_range(0.3..3.0), [rng.random_range(-9.0..9.0), 1.0, rng.random_range(-9.0..9.0)]);
        let a = gte(&pred, &gt, Axes::XYZ, &cfg).unwrap();
        let b = gte(&transform(&pred, s, &r, t), &transform(&gt, s, &r, t), Axes::XYZ, &cfg).unwrap();
        assert!((a - b).abs() <= 1e-9 * a);
    }
}

#[test]
fn triangle_inequality_holds() {
    let mut rng = stream_rng(12, &[]);
    let cfg = MetricConfig::new((0, 1));
    // Undo the per-reference normaliser so all three share one scale.
    let d = |p: &LandmarkSet3D, q: &LandmarkSet3D| {
        gte(p, q, Axes::XYZ, &cfg).unwrap() * interocular_distance(q, (0, 1), Normalizer::Xy).unwrap()
    };
    for _ in 0..300 {
        let (a, b, g) = (cloud(&mut rng, 6), cloud(&mut rng, 6), cloud(&mut rng, 6));
        assert!(d(&a, &g) <= d(&a, &b) + d(&b, &g) + 1e-9);
    }
}

#[test]
fn cumulative_curve_is_monotone_and_strict() {
    let errs = [1.0, 2.0, 2.0, 5.0];
    let c = cumulative_curve(&errs, &[0.0, 1.0, 2.0, 2.0001, 10.0]).unwrap();
    assert_eq!(c.iter().map(|p| p.1).collect::<Vec<_>>(), vec![0.0, 0.0, 0.25, 0.75, 1.0]);
    assert!(cumulative_curve(&[], &[1.0]).is_err());
    assert!(cumulative_curve(&[-1.0], &[1.0]).is_err());

    let mut rng = stream_rng(13, &[]);
    let errs: Vec<f64> = (0..500).map(|_| rng.random_range(0.0..30.0)).collect();
    let ts = default_thresholds(&errs, 64);
    let c = cumulative_curve(&errs, &ts).unwrap();
    assert!(c.windows(2).all(|w| w[0].1 <= w[1].1 && w[0].0 < w[1].0));
    assert_eq!(c.last().unwrap().1, 1.0);
}

#[test]
fn evaluate_aggregates_images_and_pairs() {
    let mut rng = stream_rng(14, &[]);
    let cfg = MetricConfig::new((0, 1));
    let gts: Vec<_> = (0..4).map(|_| cloud(&mut rng, 5)).collect();
    let preds: Vec<_> = gts
        .iter()
        .map(|g| LandmarkSet3D::new(g.points.iter().map(|p| [p[0] + 1.0, p[1], p[2] - 2.0]).collect()).unwrap())
        .collect();
    let ids: Vec<String> = (0..4).map(|i| format!("img{i}")).collect();
    let r = evaluate(&ids, &preds, &gts, &[(0, 1), (2, 3)], &cfg, 16).unwrap();
    assert_eq!(r.count, 4);
    let mean: f64 = (0..4).map(|i| gte(&preds[i], &gts[i], Axes::XYZ, &cfg).unwrap()).sum::<f64>() / 4.0;
    assert!((r.gte - mean).abs() < 1e-12);
    assert_eq!(r.pairs.len(), 2);
    assert_eq!(r.curve.len(), 16);
    assert_eq!(r.reference, ReferenceScores::default());
    assert!(evaluate(&ids[..3], &preds, &gts, &[], &cfg, 16).is_err());
}

#[test]
fn axes_parse() {
    assert_eq!(Axes::parse("xyz").unwrap(), Axes::XYZ);
    assert_eq!(Axes::parse("Z").unwrap(), Axes::Z);
    assert!(Axes::parse("w").is_err());
    assert!(Axes::parse("").is_err());
}
