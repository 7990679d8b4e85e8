use phr_core::heatmap::*;
use phr_core::landmarks::{LandmarkSet2D, FLIP_5};

fn set(points: &[[f64; 2]], size: usize) -> LandmarkSet2D {
    LandmarkSet2D::new(points.to_vec(), (size, size)).unwrap()
}

#[test]
fn gaussian_round_trip_on_quarter_pixel_grid() {
    let mut worst: f64 = 0.0;
    for std in [1.5, 2.0, 6.0] {
        for yi in 0..64 {
            for xi in 0..64 {
                for (dx, dy) in [(0.0, 0.0), (0.25, -0.25), (-0.4, 0.4), (0.5 - 1e-9, 0.0)] {
                    let (x, y) = (xi as f64 + dx, yi as f64 + dy);
                    if !phr_core::landmarks::in_frame(x, y, (64, 64)) {
                        continue;
                    }
                    let s = encode_gaussian(&set(&[[x, y]], 64), std, (64, 64)).unwrap();
                    let d = decode_argmax(&s);
                    let p = d.landmarks.points[0];
                    worst = worst.max((p[0] - x).abs().max((p[1] - y).abs()));
                }
            }
        }
    }
    assert!(worst <= 0.5, "worst round-trip error {worst}");
}

#[test]
fn disk_of_radius_two_has_thirteen_pixels() {
    let face = DISK_ANCHOR_HEIGHT * 2.0 / DISK_ANCHOR_RADIUS;
    let s = encode_binary_disk(&set(&[[10.0, 10.0]], 21), face, (21, 21)).unwrap();
    let mut expected = 0;
    for i in 0..21i32 {
        for j in 0..21i32 {
            let inside = (i - 10).pow(2) + (j - 10).pow(2) <= 4;
            expected += inside as usize;
            assert_eq!(s.data[(i * 21 + j) as usize], if inside { 1.0 } else { 0.0 });
        }
    }
    assert_eq!(expected, 13);
    assert_eq!(s.data.iter().filter(|&&v| v == 1.0).count(), 13);
}

#[test]
fn disk_radius_anchor_and_scaling() {
    assert_eq!(disk_radius(220.0, 384, 384), 7.0);
    assert!((disk_radius(110.0, 384, 384) - 3.5).abs() < 1e-12);
    assert!((disk_radius(330.0, 96, 384) - 2.625).abs() < 1e-12);
    // Floor keeps at least the centre and its 4-neighbours.
    assert_eq!(disk_radius(20.0, 24, 96), 1.0);
}

#[test]
fn disk_values_are_binary_and_gaussian_peaks_at_one() {
    let lm = set(&[[5.2, 7.9], [30.0, 12.0], [50.5, 50.5]], 64);
    let d = encode_binary_disk(&lm, 300.0, (64, 64)).unwrap();
    assert!(d.data.iter().all(|&v| v == 0.0 || v == 1.0));
    let g = encode_gaussian(&lm, 3.0, (64, 64)).unwrap();
    assert!(g.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!(g.map(1)[12 * 64 + 30], 1.0);
}

#[test]
fn gaussian_decreases_radially() {
    let g = encode_gaussian(&set(&[[32.0, 32.0]], 64), 4.0, (64, 64)).unwrap();
    let m = g.map(0);
    for r in 0..31 {
        assert!(m[32 * 64 + 32 + r] > m[32 * 64 + 33 + r]);
        assert!(m[(32 + r) * 64 + 32] > m[(33 + r) * 64 + 32]);
    }
}

#[test]
fn flip_commutes_with_encoding() {
    let pts = [[10.3, 12.0], [40.7, 11.5], [25.0, 30.2], [14.0, 45.0], [38.9, 44.1]];
    let mirrored: Vec<[f64; 2]> = FLIP_5.iter().map(|&k| [63.0 - pts[k][0], pts[k][1]]).collect();
    let lm = set(&pts, 64);
    let lm_f = set(&mirrored, 64);

    let disk = encode_binary_disk(&lm, 400.0, (64, 64)).unwrap().flip_horizontal(&FLIP_5);
    assert_eq!(disk, encode_binary_disk(&lm_f, 400.0, (64, 64)).unwrap());

    // Also across a crop → map scale change.
    let lm = set(&pts.map(|p| [p[0] * 1.5, p[1] * 1.5]), 96);
    let lm_f = set(&mirrored.iter().map(|p| [p[0] * 1.5 + 0.5, p[1] * 1.5]).collect::<Vec<_>>(), 96);
    let a = encode_gaussian(&lm, 2.0, (24, 24)).unwrap().flip_horizontal(&FLIP_5);
    let b = encode_gaussian(&lm_f, 2.0, (24, 24)).unwrap();
    for (x, y) in a.data.iter().zip(&b.data) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn encoding_ignores_traversal_order() {
    let pts = [[3.0, 4.0], [20.0, 18.5], [9.5, 30.0]];
    let fwd = encode_binary_disk(&set(&pts, 32), 500.0, (32, 32)).unwrap();
    let rev: Vec<[f64; 2]> = pts.iter().rev().copied().collect();
    let back = encode_binary_disk(&set(&rev, 32), 500.0, (32, 32)).unwrap();
    for k in 0..3 {
        assert_eq!(fwd.map(k), back.map(2 - k));
    }
}

#[test]
fn constant_map_decodes_to_centre_with_low_confidence() {
    let s = HeatmapStack::new(1, (9, 9), vec![0.3; 81], HeatmapKind::Predicted, (9, 9)).unwrap();
    let d = decode_argmax(&s);
    assert_eq!(d.landmarks.points[0], [4.0, 4.0]);
    assert!(d.low_confidence[0]);
}

#[test]
fn ties_resolve_to_first_row_major_peak() {
    let mut data = vec![0.0; 64];
    data[2 * 8 + 5] = 1.0;
    data[6 * 8 + 1] = 1.0;
    let s = HeatmapStack::new(1, (8, 8), data, HeatmapKind::Predicted, (8, 8)).unwrap();
    assert_eq!(decode_argmax(&s).landmarks.points[0], [5.0, 2.0]);
}

#[test]
fn map_crop_conversions_are_inverse() {
    for v in [-0.5, 0.0, 3.25, 95.49] {
        assert!((map_to_crop(crop_to_map(v, 0.25), 0.25) - v).abs() < 1e-12);
    }
    // Pixel-centre convention: crop pixels 0..=3 share map pixel 0, whose
    // centre is crop 1.5.
    assert_eq!(map_to_crop(0.0, 0.25), 1.5);
}

#[test]
fn pgm_export_writes_one_file_per_map() {
    let dir = tempfile::tempdir().unwrap();
    let s = encode_gaussian(&set(&[[3.0, 3.0], [5.0, 1.0]], 8), 1.0, (8, 8)).unwrap();
    let paths = s.export_pgm(dir.path(), "g").unwrap();
    assert_eq!(paths.len(), 2);
    let bytes = std::fs::read(&paths[0]).unwrap();
    assert!(bytes.starts_with(b"P5\n8 8\n255\n"));
    assert_eq!(bytes.len(), 11 + 64);
}
