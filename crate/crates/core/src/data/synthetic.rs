//! Procedural faces: a rigid 3D landmark template under random pose,
//! orthographically projected and rendered as shaded blobs on an ellipse.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::{stream_rng, BBox, Image};
use crate::landmarks::LandmarkSet3D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Template {
    /// Eye centres, nose tip, mouth corners.
    Five,
    /// Schematic 66-point layout (jaw, brows, nose, eyes, mouth).
    SixtySix,
}

impl Template {
    pub fn n_points(self) -> usize {
        match self {
            Template::Five => 5,
            Template::SixtySix => 66,
        }
    }

    /// Canonical points: x right, y down, z toward the camera. The face
    /// ellipse spans x ∈ [−0.75, 0.75], y ∈ [−1, 1].
    pub fn points(self) -> Vec<[f64; 3]> {
        match self {
            Template::Five => vec![
                [-0.35, -0.3, 0.25],
                [0.35, -0.3, 0.25],
                [0.0, 0.1, 0.6],
                [-0.3, 0.45, 0.3],
                [0.3, 0.45, 0.3],
            ],
            Template::SixtySix => schematic_66(),
        }
    }

    /// Blob colour per landmark, grouped so mirror pairs share a colour.
    fn colours(self) -> Vec<[f32; 3]> {
        const EYE: [f32; 3] = [0.15, 0.25, 0.9];
        const NOSE: [f32; 3] = [0.1, 0.75, 0.25];
        const MOUTH: [f32; 3] = [0.9, 0.1, 0.15];
        const JAW: [f32; 3] = [0.95, 0.9, 0.2];
        const BROW: [f32; 3] = [0.35, 0.2, 0.1];
        match self {
            Template::Five => vec![EYE, EYE, NOSE, MOUTH, MOUTH],
            Template::SixtySix => (0..66)
                .map(|i| match i {
                    0..=16 => JAW,
                    17..=26 => BROW,
                    27..=35 => NOSE,
                    36..=47 => EYE,
                    _ => MOUTH,
                })
                .collect(),
        }
    }
}

fn schematic_66() -> Vec<[f64; 3]> {
    let mut p = Vec::with_capacity(66);
    for i in 0..17 {
        let t = i as f64 / 16.0 * std::f64::consts::PI;
        p.push([-0.72 * t.cos(), -0.25 + 1.2 * t.sin(), 0.15 * t.sin()]);
    }
    for side in [-1.0, 1.0] {
        for k in 0..5 {
            let x = if side < 0.0 { -0.6 + 0.125 * k as f64 } else { 0.1 + 0.125 * k as f64 };
            let arch = 0.05 * (1.0 - ((x.abs() - 0.35) / 0.25).powi(2));
            p.push([x, -0.55 - arch, 0.3]);
        }
    }
    for k in 0..4 {
        p.push([0.0, -0.35 + 0.13 * k as f64, 0.35 + 0.08 * k as f64]);
    }
    for k in 0..5 {
        let x = -0.15 + 0.075 * k as f64;
        p.push([x, 0.15 + 0.03 * (1.0 - (x / 0.15).abs()), 0.45 + 0.05 * (1.0 - (x / 0.15).abs())]);
    }
    let left = [[-0.5, -0.3], [-0.4, -0.36], [-0.3, -0.36], [-0.2, -0.3], [-0.3, -0.25], [-0.4, -0.25]];
    let right = [[0.2, -0.3], [0.3, -0.36], [0.4, -0.36], [0.5, -0.3], [0.4, -0.25], [0.3, -0.25]];
    for e in left.iter().chain(&right) {
        p.push([e[0], e[1], 0.25]);
    }
    let outer = [
        [-0.3, 0.45],
        [-0.2, 0.4],
        [-0.08, 0.37],
        [0.0, 0.39],
        [0.08, 0.37],
        [0.2, 0.4],
        [0.3, 0.45],
        [0.2, 0.53],
        [0.08, 0.56],
        [0.0, 0.57],
        [-0.08, 0.56],
        [-0.2, 0.53],
    ];
    let inner = [[-0.1, 0.44], [0.0, 0.45], [0.1, 0.44], [0.1, 0.48], [0.0, 0.49], [-0.1, 0.48]];
    for m in outer.iter().chain(&inner) {
        p.push([m[0], m[1], 0.3]);
    }
    p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticFaceSpec {
    pub template: Template,
    pub image_size: usize,
    pub yaw_deg: [f64; 2],
    pub pitch_deg: [f64; 2],
    pub roll_deg: [f64; 2],
    /// Pixels per template unit.
    pub scale: [f64; 2],
    /// Maximum face-centre offset from the image centre, pixels.
    pub translation: f64,
    /// Std of additive pixel noise.
    pub noise: f64,
    /// Std of per-subject template perturbation, template units.
    pub shape_noise: f64,
    /// Multiplicative background brightness range.
    pub background: [f64; 2],
    pub views_per_subject: usize,
    /// Records held out (from the end) as the validation split.
    pub val_count: usize,
    pub seed: u64,
}

impl Default for SyntheticFaceSpec {
    fn default() -> Self {
        SyntheticFaceSpec {
            template: Template::Five,
            image_size: 128,
            yaw_deg: [-30.0, 30.0],
            pitch_deg: [-20.0, 20.0],
            roll_deg: [-20.0, 20.0],
            scale: [30.0, 38.0],
            translation: 6.0,
            noise: 0.02,
            shape_noise: 0.03,
            background: [0.7, 1.0],
            views_per_subject: 2,
            val_count: 100,
            seed: 7,
        }
    }
}

/// Rigid pose of one rendering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub roll_deg: f64,
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub image: Image,
    pub bbox: BBox,
    /// Exact projected template points, source pixels.
    pub landmarks: LandmarkSet3D,
    pub subject: usize,
    pub view: usize,
    pub pose: Pose,
}

#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub train: Vec<SyntheticSample>,
    pub val: Vec<SyntheticSample>,
}

fn draw<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

/// `Rz(roll) · Rx(pitch) · Ry(yaw)`.
pub fn rotation(pose: &Pose) -> [[f64; 3]; 3] {
    let (sy, cy) = pose.yaw_deg.to_radians().sin_cos();
    let (sp, cp) = pose.pitch_deg.to_radians().sin_cos();
    let (sr, cr) = pose.roll_deg.to_radians().sin_cos();
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
    let rz = [[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]];
    mul(&rz, &mul(&rx, &ry))
}

fn mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

impl SyntheticFaceSpec {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !(ordered(self.yaw_deg) && ordered(self.pitch_deg) && ordered(self.roll_deg))
            || !ordered(self.scale)
            || !ordered(self.background)
        {
            return Err(CoreError::Config("synthetic ranges must be ordered".into()));
        }
        if self.scale[0] <= 0.0 || self.image_size < 16 || self.views_per_subject == 0 {
            return Err(CoreError::Config("synthetic scale/size/views must be positive".into()));
        }
        if self.noise < 0.0 || self.shape_noise < 0.0 || self.translation < 0.0 {
            return Err(CoreError::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }

    /// Extremes of template depth over the yaw/pitch/scale box (roll and
    /// translation leave depth alone), shape noise aside. Also normalises
    /// blob shading.
    pub fn depth_range(&self) -> [f64; 2] {
        const STEPS: usize = 120;
        let lerp = |r: [f64; 2], i: usize| r[0] + (r[1] - r[0]) * i as f64 / STEPS as f64;
        let pts = self.template.points();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..=STEPS {
            for j in 0..=STEPS {
                let pose = Pose {
                    yaw_deg: lerp(self.yaw_deg, i),
                    pitch_deg: lerp(self.pitch_deg, j),
                    roll_deg: 0.0,
                    scale: 1.0,
                    tx: 0.0,
                    ty: 0.0,
                };
                let r = rotation(&pose)[2];
                for p in &pts {
                    let z = r[0] * p[0] + r[1] * p[1] + r[2] * p[2];
                    for s in self.scale {
                        lo = lo.min(s * z);
                        hi = hi.max(s * z);
                    }
                }
            }
        }
        [lo, hi]
    }

    fn subject_shape(&self, subject: usize) -> Vec<[f64; 3]> {
        let mut pts = self.template.points();
        if self.shape_noise > 0.0 {
            let mut rng = stream_rng(self.seed, &[1, subject as u64]);
            let normal = Normal::new(0.0, self.shape_noise).unwrap();
            // Symmetric perturbation keeps mirror pairs consistent.
            let n = pts.len();
            let flip = crate::landmarks::scheme_defaults(n).map(|d| d.0);
            let mut delta = vec![[0.0; 3]; n];
            for i in 0..n {
                let j = flip.as_ref().map_or(i, |f| f[i]);
                if j < i {
                    delta[i] = [-delta[j][0], delta[j][1], delta[j][2]];
                    continue;
                }
                let mut d = [normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)];
                if j == i {
                    d[0] = 0.0;
                }
                delta[i] = d;
            }
            for (p, d) in pts.iter_mut().zip(&delta) {
                for k in 0..3 {
                    p[k] += d[k];
                }
            }
        }
        pts
    }

    fn pose(&self, index: usize) -> Pose {
        let mut rng = stream_rng(self.seed, &[2, index as u64]);
        Pose {
            yaw_deg: draw(&mut rng, self.yaw_deg),
            pitch_deg: draw(&mut rng, self.pitch_deg),
            roll_deg: draw(&mut rng, self.roll_deg),
            scale: draw(&mut rng, self.scale),
            tx: draw(&mut rng, [-self.translation, self.translation]),
            ty: draw(&mut rng, [-self.translation, self.translation]),
        }
    }

    /// Render one face of `subject` under `pose`.
    pub fn render(&self, subject: usize, view: usize, pose: Pose, index: usize) -> Result<SyntheticSample> {
        let size = self.image_size;
        let c = (size as f64 - 1.0) / 2.0;
        let (cx, cy) = (c + pose.tx, c + pose.ty);
        let r = rotation(&pose);
        let points: Vec<[f64; 3]> = self
            .subject_shape(subject)
            .iter()
            .map(|p| {
                let q: Vec<f64> = (0..3).map(|i| pose.scale * (0..3).map(|k| r[i][k] * p[k]).sum::<f64>()).collect();
                [cx + q[0], cy + q[1], q[2]]
            })
            .collect();
        let landmarks = LandmarkSet3D::new(points)?;

        // Face outline: the canonical ellipse under roll and scale.
        let (a, b) = (0.75 * pose.scale, pose.scale);
        let (sr, cr) = pose.roll_deg.to_radians().sin_cos();
        let hx = ((a * cr).powi(2) + (b * sr).powi(2)).sqrt();
        let hy = ((a * sr).powi(2) + (b * cr).powi(2)).sqrt();
        let bbox = BBox::new(cx + 0.5 - hx, cy + 0.5 - hy, cx + 0.5 + hx, cy + 0.5 + hy)?;

        let mut rng = stream_rng(self.seed, &[3, index as u64]);
        let bg = draw(&mut rng, self.background) as f32;
        let mut img = Image::zeros(size, size);
        let plane = size * size;
        let [zmin, zmax] = self.depth_range();
        let colours = self.template.colours();
        let sigma = 0.05 * pose.scale;
        let reach = (3.0 * sigma).ceil() as i64;
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                // Background: a fixed diagonal gradient.
                let g = bg * (0.25 + 0.2 * (x + y) as f32 / (2 * size) as f32);
                let mut px = [g * 0.6, g * 0.7, g];
                let u = (cr * dx + sr * dy) / a;
                let v = (-sr * dx + cr * dy) / b;
                let rho = (u * u + v * v).sqrt();
                if rho < 1.0 {
                    let edge = ((1.0 - rho) * b / 1.5).min(1.0) as f32;
                    let shade = (0.75 + 0.25 * (1.0 - rho * rho).sqrt()) as f32;
                    let skin = [0.85 * shade, 0.65 * shade, 0.5 * shade];
                    for ch in 0..3 {
                        px[ch] = px[ch] * (1.0 - edge) + skin[ch] * edge;
                    }
                }
                for ch in 0..3 {
                    img.data[ch * plane + y * size + x] = px[ch];
                }
            }
        }
        // Blobs, far to near so closer points overdraw.
        let mut order: Vec<usize> = (0..landmarks.len()).collect();
        order.sort_by(|&i, &j| landmarks.points[i][2].total_cmp(&landmarks.points[j][2]));
        for k in order {
            let [lx, ly, lz] = landmarks.points[k];
            let depth = (0.35 + 0.65 * ((lz - zmin) / (zmax - zmin).max(1e-9)).clamp(0.0, 1.0)) as f32;
            let col = colours[k];
            let (x0, y0) = (lx.round() as i64, ly.round() as i64);
            for y in (y0 - reach).max(0)..=(y0 + reach).min(size as i64 - 1) {
                for x in (x0 - reach).max(0)..=(x0 + reach).min(size as i64 - 1) {
                    let d2 = (x as f64 - lx).powi(2) + (y as f64 - ly).powi(2);
                    let alpha = (-d2 / (2.0 * sigma * sigma)).exp() as f32;
                    let at = y as usize * size + x as usize;
                    for ch in 0..3 {
                        let v = &mut img.data[ch * plane + at];
                        *v = *v * (1.0 - alpha) + col[ch] * depth * alpha;
                    }
                }
            }
        }
        if self.noise > 0.0 {
            let normal = Normal::new(0.0, self.noise).unwrap();
            for v in img.data.iter_mut() {
                *v = (*v + normal.sample(&mut rng) as f32).clamp(0.0, 1.0);
            }
        }
        Ok(SyntheticSample {
            image: img,
            bbox,
            landmarks,
            subject,
            view,
            pose,
        })
    }

    /// Frontal, centred face of subject 0 at the smallest scale.
    pub fn canonical(&self) -> Result<SyntheticSample> {
        let pose = Pose {
            yaw_deg: 0.0,
            pitch_deg: 0.0,
            roll_deg: 0.0,
            scale: self.scale[0],
            tx: 0.0,
            ty: 0.0,
        };
        self.render(0, 0, pose, 0)
    }

    /// `count` faces; the last `val_count` form the validation split.
    pub fn generate(&self, count: usize) -> Result<SyntheticSet> {
        self.validate()?;
        if count < 2 {
            return Err(CoreError::Config("need at least 2 synthetic samples".into()));
        }
        if self.val_count >= count {
            return Err(CoreError::Config(format!(
                "val_count {} leaves no training samples out of {count}",
                self.val_count
            )));
        }
        let mut all = Vec::with_capacity(count);
        for i in 0..count {
            let (subject, view) = (i / self.views_per_subject, i % self.views_per_subject);
            all.push(self.render(subject, view, self.pose(i), i)?);
        }
        let val = all.split_off(count - self.val_count);
        Ok(SyntheticSet { train: all, val })
    }
}

pub fn generate_synthetic(spec: &SyntheticFaceSpec, count: usize) -> Result<SyntheticSet> {
    spec.generate(count)
}

/// Files produced by [`write_synthetic`].
#[derive(Debug, Clone)]
pub struct SyntheticPaths {
    pub train_manifest: std::path::PathBuf,
    pub val_manifest: std::path::PathBuf,
    /// Cross-view pairs within the validation split.
    pub val_pairs: std::path::PathBuf,
}

fn record(s: &SyntheticSample, id: String, dir: &std::path::Path) -> crate::data::DatasetRecord {
    crate::data::DatasetRecord {
        image_path: dir.join(&id),
        id,
        bbox: s.bbox,
        landmarks: s.landmarks.clone(),
        subject: Some(format!("s{}", s.subject)),
        view: Some(format!("v{}", s.view)),
    }
}

/// PNGs under `dir/images`, `train.csv`, `val.csv`, `val_pairs.csv` and the
/// spec as `synth.json`.
pub fn write_synthetic(spec: &SyntheticFaceSpec, set: &SyntheticSet, dir: &std::path::Path) -> Result<SyntheticPaths> {
    use crate::data::manifest::write_manifest;
    std::fs::create_dir_all(dir.join("images"))?;
    let mut splits = Vec::new();
    for (name, samples) in [("train", &set.train), ("val", &set.val)] {
        let mut records = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let id = format!("images/{name}_{i:05}.png");
            s.image.save_png(&dir.join(&id))?;
            records.push(record(s, id, dir));
        }
        let path = dir.join(format!("{name}.csv"));
        write_manifest(&path, &records)?;
        splits.push((path, records));
    }
    let val = crate::data::Dataset {
        records: splits[1].1.clone(),
        warnings: Vec::new(),
    };
    let mut pairs = String::from("# pred_path,gt_path\n");
    for (i, j) in val.cross_view_pairs() {
        pairs.push_str(&format!("{},{}\n", val.records[i].id, val.records[j].id));
    }
    let val_pairs = dir.join("val_pairs.csv");
    std::fs::write(&val_pairs, pairs)?;
    std::fs::write(dir.join("synth.json"), serde_json::to_string_pretty(spec)?)?;
    Ok(SyntheticPaths {
        train_manifest: splits[0].0.clone(),
        val_manifest: splits[1].0.clone(),
        val_pairs,
    })
}
