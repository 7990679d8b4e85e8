//! Ground-truth error, cross-view consistency error and cumulative curves.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::landmarks::LandmarkSet3D;

/// Subset of coordinate axes an error is measured over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Axes {
    pub x: bool,
    pub y: bool,
    pub z: bool,
}

impl Axes {
    pub const X: Axes = Axes { x: true, y: false, z: false };
    pub const Y: Axes = Axes { x: false, y: true, z: false };
    pub const Z: Axes = Axes { x: false, y: false, z: true };
    pub const XY: Axes = Axes { x: true, y: true, z: false };
    pub const XYZ: Axes = Axes { x: true, y: true, z: true };

    pub fn parse(s: &str) -> Result<Axes> {
        let mut a = Axes { x: false, y: false, z: false };
        for ch in s.chars() {
            let slot = match ch {
                'x' | 'X' => &mut a.x,
                'y' | 'Y' => &mut a.y,
                'z' | 'Z' => &mut a.z,
                _ => return Err(CoreError::Config(format!("unknown axis `{ch}` in `{s}`"))),
            };
            *slot = true;
        }
        if !(a.x || a.y || a.z) {
            return Err(CoreError::Config("empty axis set".into()));
        }
        Ok(a)
    }

    fn mask(&self) -> [f64; 3] {
        [self.x as u8 as f64, self.y as u8 as f64, self.z as u8 as f64]
    }
}

/// Which coordinates the inter-ocular distance uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalizer {
    #[default]
    Xy,
    Xyz,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub eye_indices: (usize, usize),
    #[serde(default)]
    pub normalizer: Normalizer,
    /// Keep the fitted translation in the cross-view residual.
    #[serde(default = "yes")]
    pub cvgtce_translation: bool,
}

fn yes() -> bool {
    true
}

impl MetricConfig {
    pub fn new(eye_indices: (usize, usize)) -> Self {
        MetricConfig {
            eye_indices,
            normalizer: Normalizer::Xy,
            cvgtce_translation: true,
        }
    }
}

pub fn interocular_distance(gt: &LandmarkSet3D, eyes: (usize, usize), norm: Normalizer) -> Result<f64> {
    let (i, j) = eyes;
    if i == j || i >= gt.len() || j >= gt.len() {
        return Err(CoreError::Config(format!(
            "eye indices ({i}, {j}) invalid for {} landmarks",
            gt.len()
        )));
    }
    let (a, b) = (gt.points[i], gt.points[j]);
    let dz = match norm {
        Normalizer::Xy => 0.0,
        Normalizer::Xyz => a[2] - b[2],
    };
    let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + dz * dz).sqrt();
    if d < 1e-6 {
        return Err(CoreError::Degenerate(format!("eye points {i} and {j} coincide")));
    }
    Ok(d)
}

fn check_pair(pred: &LandmarkSet3D, gt: &LandmarkSet3D) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(CoreError::Data(format!(
            "{} predicted landmarks against {} ground-truth landmarks",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

fn mean_distance(a: &[[f64; 3]], b: &[[f64; 3]], mask: [f64; 3]) -> f64 {
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| {
            (0..3)
                .map(|k| mask[k] * (p[k] - q[k]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    total / a.len() as f64
}

/// Mean point-to-point error over `axes`, normalised by the inter-ocular
/// distance, in percent.
pub fn gte(pred: &LandmarkSet3D, gt: &LandmarkSet3D, axes: Axes, cfg: &MetricConfig) -> Result<f64> {
    check_pair(pred, gt)?;
    let d = interocular_distance(gt, cfg.eye_indices, cfg.normalizer)?;
    Ok(100.0 * mean_distance(&pred.points, &gt.points, axes.mask()) / d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub s: f64,
    pub r: [[f64; 3]; 3],
    pub t: [f64; 3],
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        SimilarityTransform {
            s: 1.0,
            r: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            t: [0.0; 3],
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.r[i][j])
    }

    /// `s·R·p (+ t)`.
    pub fn apply(&self, p: [f64; 3], with_translation: bool) -> [f64; 3] {
        let v = self.rotation() * Vector3::from(p) * self.s;
        let t = if with_translation { self.t } else { [0.0; 3] };
        [v[0] + t[0], v[1] + t[1], v[2] + t[2]]
    }

    pub fn residual(&self, source: &LandmarkSet3D, target: &LandmarkSet3D) -> f64 {
        source
            .points
            .iter()
            .zip(&target.points)
            .map(|(x, y)| {
                let p = self.apply(*x, true);
                (0..3).map(|k| (p[k] - y[k]).powi(2)).sum::<f64>()
            })
            .sum()
    }
}

fn centroid(points: &[[f64; 3]]) -> Vector3<f64> {
    points.iter().map(|p| Vector3::from(*p)).sum::<Vector3<f64>>() / points.len() as f64
}

/// Least-squares similarity `target ≈ s·R·source + t` with `det R = +1`.
pub fn fit_similarity(source: &LandmarkSet3D, target: &LandmarkSet3D) -> Result<SimilarityTransform> {
    check_pair(source, target)?;
    let n = source.len();
    if n < 3 {
        return Err(CoreError::Degenerate(format!("{n} points; need at least 3")));
    }
    let (mx, my) = (centroid(&source.points), centroid(&target.points));
    let mut cov = Matrix3::zeros();
    let mut src_cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for (x, y) in source.points.iter().zip(&target.points) {
        let xc = Vector3::from(*x) - mx;
        let yc = Vector3::from(*y) - my;
        cov += yc * xc.transpose();
        src_cov += xc * xc.transpose();
        var_x += xc.norm_squared();
    }
    cov /= n as f64;
    var_x /= n as f64;

    let sv = src_cov.symmetric_eigenvalues();
    let mut sv: Vec<f64> = sv.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 1e-18) || sv[1] <= 1e-12 * sv[0] {
        return Err(CoreError::Degenerate("source points are collinear".into()));
    }

    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = svd.singular_values;
    let mut sign = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        // Singular values come unsorted; flip the smallest.
        let k = (0..3).min_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap();
        sign[(k, k)] = -1.0;
    }
    let r = u * sign * v_t;
    let trace: f64 = (0..3).map(|k| d[k] * sign[(k, k)]).sum();
    let s = trace / var_x;
    if !(s > 1e-12) {
        return Err(CoreError::Degenerate("target collapses to a point".into()));
    }
    let t = my - r * mx * s;
    Ok(SimilarityTransform {
        s,
        r: [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
        ],
        t: [t[0], t[1], t[2]],
    })
}

/// GTE after removing the best similarity from `pred` to `gt`.
pub fn cvgtce(pred: &LandmarkSet3D, gt: &LandmarkSet3D, cfg: &MetricConfig) -> Result<f64> {
    check_pair(pred, gt)?;
    let d = interocular_distance(gt, cfg.eye_indices, cfg.normalizer)?;
    let fit = fit_similarity(pred, gt)?;
    let moved: Vec<[f64; 3]> = pred
        .points
        .iter()
        .map(|p| fit.apply(*p, cfg.cvgtce_translation))
        .collect();
    Ok(100.0 * mean_distance(&moved, &gt.points, [1.0; 3]) / d)
}

/// `fraction(t) = |{e : e < t}| / count` for each threshold.
pub fn cumulative_curve(errors: &[f64], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    if errors.is_empty() {
        return Err(CoreError::Data("no errors to accumulate".into()));
    }
    if errors.iter().any(|e| !(*e >= 0.0)) {
        return Err(CoreError::Data("errors must be non-negative".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| (t, sorted.partition_point(|&e| e < t) as f64 / n))
        .collect())
}

/// `count` uniform thresholds over `[0, 1.05 · max]` (`[0, 1]` if all zero).
pub fn default_thresholds(errors: &[f64], count: usize) -> Vec<f64> {
    let max = errors.iter().copied().fold(0.0, f64::max);
    let hi = if max > 0.0 { max * 1.05 } else { 1.0 };
    let steps = count.max(2) - 1;
    (0..=steps).map(|i| hi * i as f64 / steps as f64).collect()
}

/// Full-scale reference scores, kept for context in reports only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceScores {
    pub test_gte: f64,
    pub test_cvgtce: f64,
    pub val_xy: f64,
    pub val_xyz: f64,
    pub val_x: f64,
    pub val_y: f64,
    pub val_z: f64,
}

impl Default for ReferenceScores {
    fn default() -> Self {
        ReferenceScores {
            test_gte: 4.5623,
            test_cvgtce: 3.4767,
            val_xy: 3.6263,
            val_xyz: 4.9408,
            val_x: 2.12,
            val_y: 2.48,
            val_z: 2.77,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageErrors {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub xy: f64,
    pub xyz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisSummary {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub xy: f64,
    pub xyz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairError {
    pub pred: String,
    pub gt: String,
    pub cvgtce: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub count: usize,
    /// Mean GTE over (X, Y, Z), in percent.
    pub gte: f64,
    pub per_axis: AxisSummary,
    pub per_image: Vec<ImageErrors>,
    pub cvgtce: Option<f64>,
    pub pairs: Vec<PairError>,
    /// (threshold, fraction) samples of the per-image GTE (X, Y, Z).
    pub curve: Vec<(f64, f64)>,
    pub metric: MetricConfig,
    pub reference: ReferenceScores,
}

/// Score predictions against ground truth; `pairs` index (prediction, gt).
pub fn evaluate(
    ids: &[String],
    preds: &[LandmarkSet3D],
    gts: &[LandmarkSet3D],
    pairs: &[(usize, usize)],
    cfg: &MetricConfig,
    curve_samples: usize,
) -> Result<EvaluationReport> {
    if preds.len() != gts.len() || ids.len() != gts.len() {
        return Err(CoreError::Data(format!(
            "{} predictions for {} ground-truth records",
            preds.len(),
            gts.len()
        )));
    }
    if gts.is_empty() {
        return Err(CoreError::Data("nothing to evaluate".into()));
    }
    let mut per_image = Vec::with_capacity(gts.len());
    for ((id, p), g) in ids.iter().zip(preds).zip(gts) {
        per_image.push(ImageErrors {
            id: id.clone(),
            x: gte(p, g, Axes::X, cfg)?,
            y: gte(p, g, Axes::Y, cfg)?,
            z: gte(p, g, Axes::Z, cfg)?,
            xy: gte(p, g, Axes::XY, cfg)?,
            xyz: gte(p, g, Axes::XYZ, cfg)?,
        });
    }
    let n = per_image.len() as f64;
    let mean = |f: fn(&ImageErrors) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    let per_axis = AxisSummary {
        x: mean(|e| e.x),
        y: mean(|e| e.y),
        z: mean(|e| e.z),
        xy: mean(|e| e.xy),
        xyz: mean(|e| e.xyz),
    };
    let mut pair_errors = Vec::with_capacity(pairs.len());
    for &(i, j) in pairs {
        if i >= preds.len() || j >= gts.len() {
            return Err(CoreError::Data(format!("pair ({i}, {j}) out of range")));
        }
        pair_errors.push(PairError {
            pred: ids[i].clone(),
            gt: ids[j].clone(),
            cvgtce: cvgtce(&preds[i], &gts[j], cfg)?,
        });
    }
    let cv = (!pair_errors.is_empty())
        .then(|| pair_errors.iter().map(|p| p.cvgtce).sum::<f64>() / pair_errors.len() as f64);
    let errors: Vec<f64> = per_image.iter().map(|e| e.xyz).collect();
    let curve = cumulative_curve(&errors, &default_thresholds(&errors, curve_samples))?;
    Ok(EvaluationReport {
        count: per_image.len(),
        gte: per_axis.xyz,
        per_axis,
        per_image,
        cvgtce: cv,
        pairs: pair_errors,
        curve,
        metric: cfg.clone(),
        reference: ReferenceScores::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(points: Vec<[f64; 3]>) -> LandmarkSet3D {
        LandmarkSet3D::new(points).unwrap()
    }

    #[test]
    fn interocular_examples() {
        let g = set(vec![[0.0, 0.0, 9.0], [3.0, 4.0, -2.0], [1.0, 1.0, 1.0]]);
        assert_eq!(interocular_distance(&g, (0, 1), Normalizer::Xy).unwrap(), 5.0);
        assert!(interocular_distance(&g, (0, 0), Normalizer::Xy).is_err());
        let c = set(vec![[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 0.0]]);
        assert!(matches!(
            interocular_distance(&c, (0, 1), Normalizer::Xy),
            Err(CoreError::Degenerate(_))
        ));
    }

    #[test]
    fn single_displacement() {
        let g = set(vec![[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [5.0, 5.0, 1.0], [5.0, 9.0, 2.0]]);
        let mut p = g.clone();
        p.points[2][2] += 10.0;
        let cfg = MetricConfig::new((0, 1));
        assert!((gte(&p, &g, Axes::XYZ, &cfg).unwrap() - 25.0).abs() < 1e-12);
        assert_eq!(gte(&p, &g, Axes::XY, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn curve_examples() {
        let c = cumulative_curve(&[1.0, 2.0, 3.0], &[2.5, 3.0, 10.0]).unwrap();
        assert!((c[0].1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((c[1].1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c[2].1, 1.0);
        assert!(cumulative_curve(&[], &[1.0]).is_err());
        let t = default_thresholds(&[0.0, 0.0], 200);
        assert_eq!((t.len(), t[199]), (200, 1.0));
    }

    #[test]
    fn collinear_source_is_rejected() {
        let s = set(vec![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [2.0, 2.0, 2.0]]);
        assert!(fit_similarity(&s, &s).is_err());
        let two = set(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert!(fit_similarity(&two, &two).is_err());
    }
}
