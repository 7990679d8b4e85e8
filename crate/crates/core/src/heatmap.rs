//! Landmark ↔ heatmap encodings and the argmax decoder.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::landmarks::{in_frame, LandmarkSet2D};

/// Face height at which the detection disk radius is 7 px.
pub const DISK_ANCHOR_HEIGHT: f64 = 220.0;
pub const DISK_ANCHOR_RADIUS: f64 = 7.0;
pub const DEFAULT_GAUSSIAN_STD: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeatmapKind {
    BinaryDisk,
    Gaussian,
    Predicted,
}

/// `N` maps of `h × w`, row-major, aligned to a reference crop.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
    pub kind: HeatmapKind,
    pub crop_size: (usize, usize),
}

impl HeatmapStack {
    pub fn new(
        n: usize,
        (h, w): (usize, usize),
        data: Vec<f64>,
        kind: HeatmapKind,
        crop_size: (usize, usize),
    ) -> Result<Self> {
        if n == 0 || h == 0 || w == 0 || data.len() != n * h * w {
            return Err(CoreError::Data(format!(
                "heatmap stack of {n}×{h}×{w} cannot hold {} values",
                data.len()
            )));
        }
        Ok(HeatmapStack {
            n,
            h,
            w,
            data,
            kind,
            crop_size,
        })
    }

    pub fn map(&self, k: usize) -> &[f64] {
        &self.data[k * self.h * self.w..(k + 1) * self.h * self.w]
    }

    /// Crop → map scale factors (y, x).
    pub fn scale(&self) -> (f64, f64) {
        (
            self.h as f64 / self.crop_size.0 as f64,
            self.w as f64 / self.crop_size.1 as f64,
        )
    }

    /// Mirror every map left-right and reorder channels by `perm`.
    pub fn flip_horizontal(&self, perm: &[usize]) -> HeatmapStack {
        let hw = self.h * self.w;
        let mut data = vec![0.0; self.data.len()];
        for (k, &src) in perm.iter().enumerate() {
            let m = self.map(src);
            let out = &mut data[k * hw..(k + 1) * hw];
            for i in 0..self.h {
                for j in 0..self.w {
                    out[i * self.w + j] = m[i * self.w + self.w - 1 - j];
                }
            }
        }
        HeatmapStack {
            data,
            ..self.clone()
        }
    }

    /// Write one binary PGM per map, min-max scaled to 0–255.
    pub fn export_pgm(&self, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::with_capacity(self.n);
        for k in 0..self.n {
            let m = self.map(k);
            let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = if hi > lo { hi - lo } else { 1.0 };
            let path = dir.join(format!("{prefix}_{k:02}.pgm"));
            let mut f = BufWriter::new(File::create(&path)?);
            write!(f, "P5\n{} {}\n255\n", self.w, self.h)?;
            let bytes: Vec<u8> = m
                .iter()
                .map(|v| ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8)
                .collect();
            f.write_all(&bytes)?;
            f.flush()?;
            paths.push(path);
        }
        Ok(paths)
    }
}

/// Crop pixel-centre coordinate → map pixel-centre coordinate.
pub fn crop_to_map(v: f64, scale: f64) -> f64 {
    (v + 0.5) * scale - 0.5
}

pub fn map_to_crop(v: f64, scale: f64) -> f64 {
    (v + 0.5) / scale - 0.5
}

/// Disk radius in map pixels for a face of `face_height` crop pixels.
pub fn disk_radius(face_height: f64, map_size: usize, crop_size: usize) -> f64 {
    let r = DISK_ANCHOR_RADIUS * (face_height / DISK_ANCHOR_HEIGHT) * (map_size as f64 / crop_size as f64);
    r.max(1.0)
}

fn encode(
    lm: &LandmarkSet2D,
    (h, w): (usize, usize),
    kind: HeatmapKind,
    value: impl Fn(f64) -> f64,
) -> Result<HeatmapStack> {
    if h == 0 || w == 0 {
        return Err(CoreError::Data("map size must be positive".into()));
    }
    let (sy, sx) = (h as f64 / lm.crop_size.0 as f64, w as f64 / lm.crop_size.1 as f64);
    let n = lm.len();
    let mut data = vec![0.0; n * h * w];
    for (k, (p, &vis)) in lm.points.iter().zip(&lm.visible).enumerate() {
        let (mx, my) = (crop_to_map(p[0], sx), crop_to_map(p[1], sy));
        if !vis || !in_frame(mx, my, (h, w)) {
            continue;
        }
        let out = &mut data[k * h * w..(k + 1) * h * w];
        for i in 0..h {
            let dy = i as f64 - my;
            for j in 0..w {
                let dx = j as f64 - mx;
                out[i * w + j] = value(dx * dx + dy * dy);
            }
        }
    }
    HeatmapStack::new(n, (h, w), data, kind, lm.crop_size)
}

/// Binary disks of radius `7 · (face_height / 220) · (map / crop)`, at least 1.
///
/// `face_height` is measured in crop pixels.
pub fn encode_binary_disk(
    lm: &LandmarkSet2D,
    face_height: f64,
    map_size: (usize, usize),
) -> Result<HeatmapStack> {
    if !(face_height > 0.0) {
        return Err(CoreError::Data(format!("face height {face_height} must be positive")));
    }
    let r = disk_radius(face_height, map_size.0, lm.crop_size.0);
    let r2 = r * r;
    encode(lm, map_size, HeatmapKind::BinaryDisk, |d2| {
        if d2 <= r2 {
            1.0
        } else {
            0.0
        }
    })
}

/// Unnormalised Gaussians of amplitude 1; `std` is in map pixels.
pub fn encode_gaussian(lm: &LandmarkSet2D, std: f64, map_size: (usize, usize)) -> Result<HeatmapStack> {
    if !(std > 0.0) {
        return Err(CoreError::Data(format!("gaussian std {std} must be positive")));
    }
    let denom = 2.0 * std * std;
    encode(lm, map_size, HeatmapKind::Gaussian, |d2| (-d2 / denom).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Coordinates at crop resolution.
    pub landmarks: LandmarkSet2D,
    /// Set for maps without a unique peak (constant maps).
    pub low_confidence: Vec<bool>,
    /// Peak value of each map.
    pub peak: Vec<f64>,
}

fn refine(m: &[f64], idx: usize, step: usize, pos: usize, len: usize) -> f64 {
    if pos == 0 || pos + 1 == len {
        return 0.0;
    }
    let (lo, hi) = (m[idx - step], m[idx + step]);
    if hi > lo {
        0.25
    } else if lo > hi {
        -0.25
    } else {
        0.0
    }
}

/// Argmax per map plus a quarter-pixel step toward the larger neighbour.
pub fn decode_argmax(stack: &HeatmapStack) -> Decoded {
    let (h, w) = (stack.h, stack.w);
    let (sy, sx) = stack.scale();
    let mut points = Vec::with_capacity(stack.n);
    let mut low = Vec::with_capacity(stack.n);
    let mut peak = Vec::with_capacity(stack.n);
    for k in 0..stack.n {
        let m = stack.map(k);
        let mut best = 0;
        let mut lo = m[0];
        for (i, &v) in m.iter().enumerate() {
            if v > m[best] {
                best = i;
            }
            lo = lo.min(v);
        }
        peak.push(m[best]);
        let (mx, my) = if m[best] == lo {
            low.push(true);
            ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)
        } else {
            low.push(false);
            let (i, j) = (best / w, best % w);
            (
                j as f64 + refine(m, best, 1, j, w),
                i as f64 + refine(m, best, w, i, h),
            )
        };
        points.push([map_to_crop(mx, sx), map_to_crop(my, sy)]);
    }
    let visible = vec![true; points.len()];
    Decoded {
        landmarks: LandmarkSet2D {
            points,
            visible,
            crop_size: stack.crop_size,
        },
        low_confidence: low,
        peak,
    }
}
