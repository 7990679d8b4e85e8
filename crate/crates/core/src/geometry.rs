//! Face crops, augmentation and the mapping back to source coordinates.
//!
//! Bounding boxes use pixel-edge coordinates (a full `W × H` image is
//! `(0, 0, W, H)`); landmarks use pixel-centre coordinates.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::landmarks::{validate_permutation, LandmarkSet3D};

/// Expansion used at test time, the middle of the 20–25% training range.
pub const TEST_EXPANSION: f64 = 0.225;
pub const TRAIN_EXPANSION: [f64; 2] = [0.20, 0.25];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_max > self.x_min
            && self.y_max > self.y_min;
        if ok {
            Ok(())
        } else {
            Err(CoreError::Degenerate(format!("bounding box {self:?}")))
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    /// Square box of side `max(width, height)` with the same centre.
    pub fn squared(&self) -> BBox {
        let side = self.width().max(self.height());
        let (cx, cy) = self.center();
        BBox {
            x_min: cx - side / 2.0,
            y_min: cy - side / 2.0,
            x_max: cx + side / 2.0,
            y_max: cy + side / 2.0,
        }
    }
}

/// Grow width and height by `fraction`, keeping the centre.
pub fn expand_bbox(b: &BBox, fraction: f64) -> BBox {
    let dx = b.width() * fraction / 2.0;
    let dy = b.height() * fraction / 2.0;
    BBox {
        x_min: b.x_min - dx,
        y_min: b.y_min - dy,
        x_max: b.x_max + dx,
        y_max: b.y_max + dy,
    }
}

/// `[x', y'] = M · [x, y, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine2D {
    pub m: [[f64; 3]; 2],
}

impl Affine2D {
    pub const IDENTITY: Affine2D = Affine2D {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    pub fn new(m: [[f64; 3]; 2]) -> Result<Self> {
        let a = Affine2D { m };
        if a.det().abs() <= 1e-9 || m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CoreError::Degenerate(format!("singular affine {m:?}")));
        }
        Ok(a)
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Affine2D {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty]],
        }
    }

    pub fn linear(a: f64, b: f64, c: f64, d: f64) -> Self {
        Affine2D {
            m: [[a, b, 0.0], [c, d, 0.0]],
        }
    }

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    /// Isotropic-equivalent scale `sqrt(|det|)`.
    pub fn scale(&self) -> f64 {
        self.det().abs().sqrt()
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let m = &self.m;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2],
        ]
    }

    /// `self ∘ other`: apply `other` first.
    pub fn then_after(&self, other: &Affine2D) -> Affine2D {
        let (a, b) = (&self.m, &other.m);
        let mut m = [[0.0; 3]; 2];
        for i in 0..2 {
            for j in 0..3 {
                m[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
            m[i][2] += a[i][2];
        }
        Affine2D { m }
    }

    pub fn inverse(&self) -> Result<Affine2D> {
        let d = self.det();
        if d.abs() <= 1e-9 {
            return Err(CoreError::Degenerate(format!("singular affine {:?}", self.m)));
        }
        let m = &self.m;
        let (a, b, c, e) = (m[0][0], m[0][1], m[1][0], m[1][1]);
        let ia = e / d;
        let ib = -b / d;
        let ic = -c / d;
        let ie = a / d;
        Ok(Affine2D {
            m: [
                [ia, ib, -(ia * m[0][2] + ib * m[1][2])],
                [ic, ie, -(ic * m[0][2] + ie * m[1][2])],
            ],
        })
    }
}

/// Planar RGB image with `f32` samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Channel-major: `data[(c * height + y) * width + x]`.
    pub data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != 3 * width * height {
            return Err(CoreError::Data(format!(
                "image {width}×{height} cannot hold {} samples",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * w * h];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px.0[c] as f32 / 255.0;
            }
        }
        Image::new(w, h, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            for c in 0..3 {
                let v = self.at(c, y as usize, x as usize);
                px.0[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        buf.save(path)?;
        Ok(())
    }

    /// Round every sample to the nearest 8-bit level, as a PNG round trip would.
    pub fn quantized(&self) -> Image {
        Image {
            data: self
                .data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
                .collect(),
            ..self.clone()
        }
    }

    /// Bilinear sample at a pixel-centre coordinate; outside pixels read 0.
    fn sample(&self, c: usize, x: f64, y: f64) -> f32 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let px = |xi: i64, yi: i64| {
            if xi < 0 || yi < 0 || xi >= self.width as i64 || yi >= self.height as i64 {
                0.0
            } else {
                self.at(c, yi as usize, xi as usize)
            }
        };
        let top = px(x0, y0) * (1.0 - fx) + px(x0 + 1, y0) * fx;
        let bottom = px(x0, y0 + 1) * (1.0 - fx) + px(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Resample through `to_src`, which maps output pixel centres to input
    /// pixel centres.
    pub fn warp(&self, to_src: &Affine2D, width: usize, height: usize) -> Image {
        if *to_src == Affine2D::IDENTITY && width == self.width && height == self.height {
            return self.clone();
        }
        let mut data = vec![0.0; 3 * width * height];
        for y in 0..height {
            for x in 0..width {
                let [sx, sy] = to_src.apply([x as f64, y as f64]);
                for c in 0..3 {
                    data[(c * height + y) * width + x] = self.sample(c, sx, sy);
                }
            }
        }
        Image {
            width,
            height,
            data,
        }
    }
}

/// Source → crop mapping for a box resized to `size × size`.
pub fn crop_transform(b: &BBox, size: usize) -> Result<Affine2D> {
    b.validate()?;
    let sx = size as f64 / b.width();
    let sy = size as f64 / b.height();
    Affine2D::new([
        [sx, 0.0, sx * (0.5 - b.x_min) - 0.5],
        [0.0, sy, sy * (0.5 - b.y_min) - 0.5],
    ])
}

/// Bilinear crop of `b` resized to `size × size`, zero-filled outside the
/// image, plus the exact source → crop transform.
pub fn crop_resize(image: &Image, b: &BBox, size: usize) -> Result<(Image, Affine2D)> {
    if size == 0 {
        return Err(CoreError::Config("crop size must be positive".into()));
    }
    let fwd = crop_transform(b, size)?;
    let out = image.warp(&fwd.inverse()?, size, size);
    Ok((out, fwd))
}

/// Map crop-space predictions back to the source image.
pub fn to_source_coords(pred: &LandmarkSet3D, crop: &Affine2D) -> Result<LandmarkSet3D> {
    let inv = crop.inverse()?;
    let s = crop.scale();
    Ok(LandmarkSet3D {
        points: pred
            .points
            .iter()
            .map(|p| {
                let [x, y] = inv.apply([p[0], p[1]]);
                [x, y, p[2] / s]
            })
            .collect(),
        visible: pred.visible.clone(),
    })
}

/// Forward counterpart of [`to_source_coords`].
pub fn to_crop_coords(lm: &LandmarkSet3D, crop: &Affine2D) -> LandmarkSet3D {
    let s = crop.scale();
    LandmarkSet3D {
        points: lm
            .points
            .iter()
            .map(|p| {
                let [x, y] = crop.apply([p[0], p[1]]);
                [x, y, p[2] * s]
            })
            .collect(),
        visible: lm.visible.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub rotation_deg: [f64; 2],
    pub scale: [f64; 2],
    /// Per-channel multiplicative range.
    pub jitter: [f64; 2],
    pub flip_permutation: Vec<usize>,
    pub seed: u64,
}

impl AugmentConfig {
    pub fn standard(flip_permutation: Vec<usize>, seed: u64) -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            rotation_deg: [-35.0, 35.0],
            scale: [0.85, 1.15],
            jitter: [0.8, 1.2],
            flip_permutation,
            seed,
        }
    }

    /// No geometric or photometric change.
    pub fn none(flip_permutation: Vec<usize>) -> Self {
        AugmentConfig {
            flip_prob: 0.0,
            rotation_deg: [0.0, 0.0],
            scale: [1.0, 1.0],
            jitter: [1.0, 1.0],
            flip_permutation,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(CoreError::Config("flip_prob must be in [0, 1]".into()));
        }
        if !ordered(self.rotation_deg) || !ordered(self.scale) || !ordered(self.jitter) {
            return Err(CoreError::Config("augmentation ranges must be ordered".into()));
        }
        if self.scale[0] <= 0.0 || self.jitter[0] < 0.0 {
            return Err(CoreError::Config("scale and jitter must be positive".into()));
        }
        validate_permutation(&self.flip_permutation)
    }
}

/// One sampled augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub rotation_deg: f64,
    pub scale: f64,
    pub jitter: [f64; 3],
}

impl AugmentDraw {
    pub fn identity() -> Self {
        AugmentDraw {
            flip: false,
            rotation_deg: 0.0,
            scale: 1.0,
            jitter: [1.0; 3],
        }
    }

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let mut uni = |r: [f64; 2]| {
            if r[0] == r[1] {
                r[0]
            } else {
                rng.random_range(r[0]..=r[1])
            }
        };
        let rotation_deg = uni(cfg.rotation_deg);
        let scale = uni(cfg.scale);
        let jitter = [uni(cfg.jitter), uni(cfg.jitter), uni(cfg.jitter)];
        let flip = cfg.flip_prob > 0.0 && rng.random::<f64>() < cfg.flip_prob;
        AugmentDraw {
            flip,
            rotation_deg,
            scale,
            jitter,
        }
    }

    /// The geometric part as an affine about the centre of a `w × h` raster.
    pub fn transform(&self, w: usize, h: usize) -> Affine2D {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        let f = if self.flip { -1.0 } else { 1.0 };
        let s = self.scale;
        let lin = Affine2D::linear(s * cos * f, -s * sin, s * sin * f, s * cos);
        Affine2D::translation(cx, cy)
            .then_after(&lin)
            .then_after(&Affine2D::translation(-cx, -cy))
    }
}

/// Apply a drawn augmentation to an image and its landmarks.
pub fn apply_augment(
    image: &Image,
    lm: &LandmarkSet3D,
    draw: &AugmentDraw,
    flip_permutation: &[usize],
) -> Result<(Image, LandmarkSet3D, Affine2D)> {
    if lm.len() != flip_permutation.len() {
        return Err(CoreError::Config(format!(
            "{} landmarks but a flip table of {}",
            lm.len(),
            flip_permutation.len()
        )));
    }
    let a = draw.transform(image.width, image.height);
    let mut out = image.warp(&a.inverse()?, image.width, image.height);
    if draw.jitter != [1.0; 3] {
        let plane = out.width * out.height;
        for (c, chunk) in out.data.chunks_mut(plane).enumerate() {
            let f = draw.jitter[c] as f32;
            for v in chunk {
                *v = (*v * f).clamp(0.0, 1.0);
            }
        }
    }
    let mut moved = LandmarkSet3D {
        points: lm
            .points
            .iter()
            .map(|p| {
                let [x, y] = a.apply([p[0], p[1]]);
                [x, y, p[2] * draw.scale]
            })
            .collect(),
        visible: lm.visible.clone(),
    };
    if draw.flip {
        moved = moved.permuted(flip_permutation);
    }
    moved.clip_visibility((image.height, image.width));
    Ok((out, moved, a))
}

/// Sample and apply flip / rotation / scale / jitter.
pub fn random_augment<R: Rng + ?Sized>(
    image: &Image,
    lm: &LandmarkSet3D,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Image, LandmarkSet3D, Affine2D)> {
    cfg.validate()?;
    let draw = AugmentDraw::sample(cfg, rng);
    apply_augment(image, lm, &draw, &cfg.flip_permutation)
}

/// Independent RNG stream for `(seed, tags…)`.
pub fn stream_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &t in tags {
        h = splitmix(h ^ splitmix(t.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
