//! Run configuration for `train`: JSON, with relative paths resolved
//! against the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::geometry::AugmentConfig;
use crate::landmarks::scheme_defaults;
use crate::metrics::MetricConfig;
use crate::model::train::TrainSchedule;
use crate::model::{CascadeConfig, Preset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AugmentSetting {
    /// `true` → standard ranges, `false` → none.
    Toggle(bool),
    Custom(AugmentConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub n_points: usize,
    /// Replaces the preset topology wholesale.
    #[serde(default)]
    pub model: Option<CascadeConfig>,
    #[serde(default)]
    pub precision: Precision,
    /// Defaults to the preset's schedule.
    #[serde(default)]
    pub schedule: Option<TrainSchedule>,
    #[serde(default = "default_augment", with = "augment_serde")]
    pub augment: AugmentSetting,
    /// Defaults to the scheme's eye pair with the 2D normaliser.
    #[serde(default)]
    pub metric: Option<MetricConfig>,
    pub train_manifest: PathBuf,
    pub val_manifest: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn default_augment() -> AugmentSetting {
    AugmentSetting::Toggle(true)
}

mod augment_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Toggle(bool),
        Custom(AugmentConfig),
    }

    pub fn serialize<S: Serializer>(v: &AugmentSetting, s: S) -> std::result::Result<S::Ok, S::Error> {
        match v {
            AugmentSetting::Toggle(b) => Raw::Toggle(*b).serialize(s),
            AugmentSetting::Custom(c) => Raw::Custom(c.clone()).serialize(s),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<AugmentSetting, D::Error> {
        Ok(match Raw::deserialize(d)? {
            Raw::Toggle(b) => AugmentSetting::Toggle(b),
            Raw::Custom(c) => AugmentSetting::Custom(c),
        })
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| CoreError::Config(format!("invalid run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.train_manifest, &mut cfg.val_manifest, &mut cfg.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.cascade().validate()?;
        self.schedule().validate()?;
        if let Some(a) = self.augment_config()? {
            a.validate()?;
        }
        let m = self.metric_config()?;
        if m.eye_indices.0 >= self.n_points || m.eye_indices.1 >= self.n_points || m.eye_indices.0 == m.eye_indices.1 {
            return Err(CoreError::Config(format!("eye indices {:?} invalid for {} points", m.eye_indices, self.n_points)));
        }
        Ok(())
    }

    pub fn cascade(&self) -> CascadeConfig {
        self.model.clone().unwrap_or_else(|| CascadeConfig::preset(self.preset, self.n_points))
    }

    pub fn schedule(&self) -> TrainSchedule {
        self.schedule.clone().unwrap_or_else(|| TrainSchedule::for_preset(self.preset))
    }

    pub fn metric_config(&self) -> Result<MetricConfig> {
        match &self.metric {
            Some(m) => Ok(m.clone()),
            None => scheme_defaults(self.n_points)
                .map(|(_, eyes)| MetricConfig::new(eyes))
                .ok_or_else(|| CoreError::Config(format!("no default eye pair for {} points; set `metric`", self.n_points))),
        }
    }

    pub fn augment_config(&self) -> Result<Option<AugmentConfig>> {
        match &self.augment {
            AugmentSetting::Toggle(false) => Ok(None),
            AugmentSetting::Custom(c) => Ok(Some(c.clone())),
            AugmentSetting::Toggle(true) => scheme_defaults(self.n_points)
                .map(|(perm, _)| Some(AugmentConfig::standard(perm, self.seed)))
                .ok_or_else(|| {
                    CoreError::Config(format!("no flip table for {} points; give `augment` explicitly", self.n_points))
                }),
        }
    }

    /// sha256 of the canonical JSON form, hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
