//! Comma-separated manifests: `path, x_min, y_min, x_max, y_max, x1, y1, z1,
//! …[, subject, view]`. Blank lines and `#` comments are skipped.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{CoreError, Result};
use crate::geometry::BBox;
use crate::landmarks::LandmarkSet3D;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    /// Path as written in the manifest.
    pub id: String,
    /// Resolved against the manifest directory.
    pub image_path: PathBuf,
    pub bbox: BBox,
    pub landmarks: LandmarkSet3D,
    pub subject: Option<String>,
    pub view: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn n_points(&self) -> Option<usize> {
        self.records.first().map(|r| r.landmarks.len())
    }

    /// All (i, j) with i ≠ j sharing a subject id.
    pub fn cross_view_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for (i, a) in self.records.iter().enumerate() {
            for (j, b) in self.records.iter().enumerate() {
                if i != j && a.subject.is_some() && a.subject == b.subject && a.view != b.view {
                    pairs.push((i, j));
                }
            }
        }
        pairs
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_floats(fields: &[&str], path: &Path, line: usize) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CoreError::Manifest {
                    path: path.to_path_buf(),
                    line,
                    detail: format!("`{f}` is not a finite number"),
                })
        })
        .collect()
}

/// Parse manifest text. `base` resolves relative image paths.
pub fn parse_manifest(
    text: &str,
    path: &Path,
    base: &Path,
    expected_points: Option<usize>,
    check_files: bool,
) -> Result<Dataset> {
    let mut ds = Dataset::default();
    let mut n_points = expected_points;
    for (line, row) in content_lines(text) {
        let err = |detail: String| CoreError::Manifest {
            path: path.to_path_buf(),
            line,
            detail,
        };
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if fields.len() < 5 + 9 {
            return Err(err(format!("{} fields; need a path, a box and 3 points", fields.len())));
        }
        let numeric = fields.len() - 5;
        let has_ids = numeric % 3 == 2;
        if numeric % 3 == 1 {
            return Err(err(format!("{numeric} values after the box is not 3N or 3N + 2")));
        }
        let coord_end = if has_ids { fields.len() - 2 } else { fields.len() };
        let n = (coord_end - 5) / 3;
        match n_points {
            Some(e) if e != n => {
                return Err(err(format!("{n} landmarks; expected {e}")));
            }
            None => n_points = Some(n),
            _ => {}
        }
        let b = parse_floats(&fields[1..5], path, line)?;
        let bbox = BBox::new(b[0], b[1], b[2], b[3]).map_err(|e| err(e.to_string()))?;
        let coords = parse_floats(&fields[5..coord_end], path, line)?;
        let landmarks = LandmarkSet3D::from_flat(&coords).map_err(|e| err(e.to_string()))?;
        let id = fields[0].to_string();
        if id.is_empty() {
            return Err(err("empty image path".into()));
        }
        let image_path = base.join(&id);
        if check_files && !image_path.is_file() {
            return Err(err(format!("image {} does not exist", image_path.display())));
        }
        let (subject, view) = if has_ids {
            (
                Some(fields[coord_end].to_string()),
                Some(fields[coord_end + 1].to_string()),
            )
        } else {
            (None, None)
        };
        ds.records.push(DatasetRecord {
            id,
            image_path,
            bbox,
            landmarks,
            subject,
            view,
        });
    }
    if ds.records.is_empty() {
        ds.warnings.push(format!("manifest {} has no records", path.display()));
    }
    Ok(ds)
}

pub fn load_dataset(path: &Path, expected_points: Option<usize>) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CoreError::Data(format!("cannot read manifest {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, path, base, expected_points, true)
}

pub fn format_record(r: &DatasetRecord) -> String {
    let mut s = r.id.clone();
    for v in [r.bbox.x_min, r.bbox.y_min, r.bbox.x_max, r.bbox.y_max] {
        write!(s, ",{v}").unwrap();
    }
    for v in r.landmarks.flat() {
        write!(s, ",{v}").unwrap();
    }
    if let (Some(a), Some(b)) = (&r.subject, &r.view) {
        write!(s, ",{a},{b}").unwrap();
    }
    s
}

pub fn write_manifest(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut out = String::from("# path,x_min,y_min,x_max,y_max,x1,y1,z1,...[,subject,view]\n");
    for r in records {
        out.push_str(&format_record(r));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Predicted landmarks per image, mirroring the manifest coordinate block.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionFile {
    pub entries: Vec<(String, LandmarkSet3D)>,
}

impl PredictionFile {
    pub fn to_text(&self) -> String {
        let mut out = String::from("# path,x1,y1,z1,...\n");
        for (id, lm) in &self.entries {
            out.push_str(id);
            for v in lm.flat() {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let mut n_points = None;
        for (line, row) in content_lines(text) {
            let err = |detail: String| CoreError::Manifest {
                path: path.to_path_buf(),
                line,
                detail,
            };
            let fields: Vec<&str> = row.split(',').map(str::trim).collect();
            let coords = parse_floats(&fields[1..], path, line)?;
            let lm = LandmarkSet3D::from_flat(&coords).map_err(|e| err(e.to_string()))?;
            match n_points {
                Some(n) if n != lm.len() => return Err(err(format!("{} landmarks; expected {n}", lm.len()))),
                _ => n_points = Some(lm.len()),
            }
            entries.push((fields[0].to_string(), lm));
        }
        Ok(PredictionFile { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::Data(format!("cannot read predictions {}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Cross-view pairs file: `pred_path,gt_path` per line.
pub fn read_pairs(path: &Path, ds: &Dataset) -> Result<Vec<(usize, usize)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CoreError::Data(format!("cannot read pairs {}: {e}", path.display())))?;
    let index = |id: &str, line: usize| {
        ds.records
            .iter()
            .position(|r| r.id == id)
            .ok_or_else(|| CoreError::Manifest {
                path: path.to_path_buf(),
                line,
                detail: format!("unknown image `{id}`"),
            })
    };
    content_lines(&text)
        .map(|(line, row)| {
            let f: Vec<&str> = row.split(',').map(str::trim).collect();
            if f.len() != 2 {
                return Err(CoreError::Manifest {
                    path: path.to_path_buf(),
                    line,
                    detail: "expected `pred_path,gt_path`".into(),
                });
            }
            Ok((index(f[0], line)?, index(f[1], line)?))
        })
        .collect()
}

/// Placeholder for a converter from an external annotation layout. The
/// challenge distribution's file format is not public, so this only reports
/// what is missing.
pub fn convert_external_annotations(_src: &Path) -> Result<Dataset> {
    Err(CoreError::Config(
        "no converter for this annotation layout; write a manifest instead".into(),
    ))
}
