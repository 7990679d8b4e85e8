//! Landmark containers. Coordinates are pixel-centre based: pixel `(i, j)`
//! covers `[j - 0.5, j + 0.5) × [i - 0.5, i + 0.5)`.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet2D {
    pub points: Vec<[f64; 2]>,
    /// False for occluded or out-of-frame points.
    pub visible: Vec<bool>,
    /// (height, width) of the reference crop.
    pub crop_size: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet3D {
    pub points: Vec<[f64; 3]>,
    pub visible: Vec<bool>,
}

impl LandmarkSet2D {
    pub fn new(points: Vec<[f64; 2]>, crop_size: (usize, usize)) -> Result<Self> {
        if points.is_empty() {
            return Err(CoreError::Data("landmark set must not be empty".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CoreError::Data("landmark coordinates must be finite".into()));
        }
        let visible = points
            .iter()
            .map(|p| in_frame(p[0], p[1], crop_size))
            .collect();
        Ok(LandmarkSet2D {
            points,
            visible,
            crop_size,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Whether a pixel-centre coordinate falls inside an `(h, w)` raster.
pub fn in_frame(x: f64, y: f64, (h, w): (usize, usize)) -> bool {
    x >= -0.5 && y >= -0.5 && x < w as f64 - 0.5 && y < h as f64 - 0.5
}

impl LandmarkSet3D {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(CoreError::Data("landmark set must not be empty".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CoreError::Data("landmark coordinates must be finite".into()));
        }
        let visible = vec![true; points.len()];
        Ok(LandmarkSet3D { points, visible })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_2d(&self, crop_size: (usize, usize)) -> LandmarkSet2D {
        LandmarkSet2D {
            points: self.points.iter().map(|p| [p[0], p[1]]).collect(),
            visible: self.visible.clone(),
            crop_size,
        }
    }

    /// Mark points outside an `(h, w)` raster as not visible.
    pub fn clip_visibility(&mut self, size: (usize, usize)) {
        for (v, p) in self.visible.iter_mut().zip(&self.points) {
            *v = *v && in_frame(p[0], p[1], size);
        }
    }

    /// Reorder points so that new index `i` holds old index `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> LandmarkSet3D {
        LandmarkSet3D {
            points: perm.iter().map(|&j| self.points[j]).collect(),
            visible: perm.iter().map(|&j| self.visible[j]).collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() % 3 != 0 {
            return Err(CoreError::Data(format!(
                "{} coordinates is not a multiple of 3",
                values.len()
            )));
        }
        Self::new(values.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    }
}

/// Permutation checks shared by flip tables.
pub fn validate_permutation(perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return Err(CoreError::Config("flip permutation is not a permutation".into()));
        }
        seen[p] = true;
    }
    if perm.iter().enumerate().any(|(i, &p)| perm[p] != i) {
        return Err(CoreError::Config("flip permutation is not an involution".into()));
    }
    Ok(())
}

/// Mirror table of the 5-point scheme: eyes, nose tip, mouth corners.
pub const FLIP_5: [usize; 5] = [1, 0, 2, 4, 3];

/// Outer eye corners of the 5-point scheme.
pub const EYES_5: (usize, usize) = (0, 1);

/// Outer eye corners of the 66-point scheme.
pub const EYES_66: (usize, usize) = (36, 45);

/// Mirror table of the 66-point scheme: the 68-point table with the inner
/// mouth corners (68-point indices 60 and 64) removed.
pub fn flip_66() -> Vec<usize> {
    let mut m68 = [0usize; 68];
    let mut pair = |a: usize, b: usize| {
        m68[a] = b;
        m68[b] = a;
    };
    for i in 0..=8 {
        pair(i, 16 - i);
    }
    for i in 0..5 {
        pair(17 + i, 26 - i);
    }
    for i in 27..=30 {
        pair(i, i);
    }
    pair(31, 35);
    pair(32, 34);
    pair(33, 33);
    for (a, b) in [(36, 45), (37, 44), (38, 43), (39, 42), (40, 47), (41, 46)] {
        pair(a, b);
    }
    for (a, b) in [(48, 54), (49, 53), (50, 52), (51, 51), (55, 59), (56, 58), (57, 57)] {
        pair(a, b);
    }
    for (a, b) in [(60, 64), (61, 63), (62, 62), (65, 67), (66, 66)] {
        pair(a, b);
    }
    let keep: Vec<usize> = (0..68).filter(|&i| i != 60 && i != 64).collect();
    let to66 = |i68: usize| keep.iter().position(|&k| k == i68).unwrap();
    keep.iter().map(|&i| to66(m68[i])).collect()
}

/// Default flip table and eye indices for a landmark count.
pub fn scheme_defaults(n: usize) -> Option<(Vec<usize>, (usize, usize))> {
    match n {
        5 => Some((FLIP_5.to_vec(), EYES_5)),
        66 => Some((flip_66(), EYES_66)),
        _ => None,
    }
}
