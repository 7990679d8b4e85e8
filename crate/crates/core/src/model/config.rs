use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Stem plus bottleneck stages of a pre-activation residual network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub counts: Vec<usize>,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    /// Output channels of a bottleneck = width · expansion.
    pub expansion: usize,
}

impl BackboneConfig {
    pub fn out_channels(&self) -> usize {
        self.widths.last().copied().unwrap_or(self.stem_channels) * self.expansion
    }

    /// Total downsampling including the stride-2 stem and pool.
    pub fn total_stride(&self) -> usize {
        4 * self.strides.iter().product::<usize>()
    }

    pub fn bottlenecks(&self) -> usize {
        self.counts.iter().sum()
    }

    fn validate(&self, what: &str) -> Result<()> {
        let n = self.counts.len();
        if n == 0 || self.widths.len() != n || self.strides.len() != n {
            return Err(CoreError::Config(format!(
                "{what}: counts, widths and strides must have equal non-zero length"
            )));
        }
        if self.counts.contains(&0) || self.widths.contains(&0) || self.stem_channels == 0 {
            return Err(CoreError::Config(format!("{what}: zero-sized stage")));
        }
        if self.strides.iter().any(|s| *s != 1 && *s != 2) || self.expansion == 0 {
            return Err(CoreError::Config(format!("{what}: strides must be 1 or 2")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionNetConfig {
    pub backbone: BackboneConfig,
    /// Channels after the upsampling deconvolution.
    pub head_channels: usize,
    /// Deconvolution upsampling factor.
    pub upsample: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourglassConfig {
    pub channels: usize,
    pub depth: usize,
    /// Factor of the last deconvolution, map → crop resolution.
    pub final_upsample: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZRegressorConfig {
    pub in_channels: usize,
    pub backbone: BackboneConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            _ => Err(CoreError::Config(format!("unknown preset `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    pub preset: Preset,
    pub crop: usize,
    pub n_points: usize,
    /// Side of the detection heatmaps.
    pub heatmap: usize,
    pub detection: DetectionNetConfig,
    pub regression: HourglassConfig,
    pub z: ZRegressorConfig,
    /// Gaussian std (crop pixels) of regression targets and Z-net inputs.
    pub gaussian_std: f64,
    /// Depths are divided by this before entering the Z loss.
    pub z_scale: f64,
}

impl CascadeConfig {
    pub fn preset(preset: Preset, n_points: usize) -> Self {
        match preset {
            Preset::Paper => Self::paper(n_points),
            Preset::Desk => Self::desk(n_points),
        }
    }

    /// Full-size topology: ResNet-152-style detection, 384 crop, Z regressor
    /// with 3/24/38/3 bottlenecks.
    pub fn paper(n_points: usize) -> Self {
        CascadeConfig {
            preset: Preset::Paper,
            crop: 384,
            n_points,
            heatmap: 96,
            detection: DetectionNetConfig {
                backbone: BackboneConfig {
                    stem_channels: 64,
                    counts: vec![3, 8, 36, 3],
                    widths: vec![64, 128, 256, 512],
                    strides: vec![1, 2, 2, 1],
                    expansion: 4,
                },
                head_channels: 256,
                upsample: 4,
            },
            regression: HourglassConfig {
                channels: 256,
                depth: 4,
                final_upsample: 4,
            },
            z: ZRegressorConfig {
                in_channels: 3 + n_points,
                backbone: BackboneConfig {
                    stem_channels: 64,
                    counts: vec![3, 24, 38, 3],
                    widths: vec![64, 128, 256, 512],
                    strides: vec![1, 2, 2, 2],
                    expansion: 4,
                },
            },
            gaussian_std: 6.0,
            z_scale: 96.0,
        }
    }

    /// Same topology with channels ÷ 8, bottleneck counts {2,2,3,2} and a
    /// 96-pixel crop.
    pub fn desk(n_points: usize) -> Self {
        let backbone = BackboneConfig {
            stem_channels: 8,
            counts: vec![2, 2, 3, 2],
            widths: vec![8, 16, 32, 64],
            strides: vec![1, 2, 2, 1],
            expansion: 4,
        };
        CascadeConfig {
            preset: Preset::Desk,
            crop: 96,
            n_points,
            heatmap: 24,
            detection: DetectionNetConfig {
                backbone: backbone.clone(),
                head_channels: 32,
                upsample: 4,
            },
            regression: HourglassConfig {
                channels: 32,
                depth: 3,
                final_upsample: 4,
            },
            z: ZRegressorConfig {
                in_channels: 3 + n_points,
                backbone: BackboneConfig {
                    strides: vec![1, 2, 2, 2],
                    ..backbone
                },
            },
            // Wide enough to survive the hourglass's 4x downsampling.
            gaussian_std: 5.0,
            z_scale: 24.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.detection.backbone.validate("detection backbone")?;
        self.z.backbone.validate("z backbone")?;
        if self.n_points == 0 || self.crop == 0 {
            return Err(CoreError::Config("crop and landmark count must be positive".into()));
        }
        let stride = self.detection.backbone.total_stride();
        if self.crop % stride != 0 {
            return Err(CoreError::Config(format!(
                "crop {} not divisible by detection stride {stride}",
                self.crop
            )));
        }
        let feat = self.crop / stride;
        if feat * self.detection.upsample != self.heatmap {
            return Err(CoreError::Config(format!(
                "detection output {}×{} ≠ configured heatmap {}",
                feat * self.detection.upsample,
                feat * self.detection.upsample,
                self.heatmap
            )));
        }
        if self.heatmap % (1 << self.regression.depth) != 0 || self.regression.depth == 0 {
            return Err(CoreError::Config(format!(
                "heatmap {} not divisible by 2^{}",
                self.heatmap, self.regression.depth
            )));
        }
        if self.heatmap * self.regression.final_upsample != self.crop {
            return Err(CoreError::Config(format!(
                "regression output {} ≠ crop {}",
                self.heatmap * self.regression.final_upsample,
                self.crop
            )));
        }
        if self.z.in_channels != 3 + self.n_points {
            return Err(CoreError::Config(format!(
                "z regressor takes {} channels; expected 3 + {}",
                self.z.in_channels, self.n_points
            )));
        }
        if self.crop % self.z.backbone.total_stride() != 0 {
            return Err(CoreError::Config("crop not divisible by z-net stride".into()));
        }
        if self.regression.channels < 2 || self.detection.head_channels == 0 {
            return Err(CoreError::Config("hourglass needs at least 2 channels".into()));
        }
        if !(self.gaussian_std > 0.0) || !(self.z_scale > 0.0) {
            return Err(CoreError::Config("gaussian_std and z_scale must be positive".into()));
        }
        Ok(())
    }
}
