use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use phr_tensor::{Element, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::CascadeConfig;
use super::layers::{Builder, Ctx};
use super::nets::{DetectionNet, Hourglass, ZRegressor};
use crate::error::{CoreError, Result};
use crate::geometry::{crop_resize, expand_bbox, to_source_coords, Affine2D, BBox, Image, TEST_EXPANSION};
use crate::heatmap::{decode_argmax, HeatmapKind, HeatmapStack};
use crate::landmarks::{LandmarkSet2D, LandmarkSet3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStage {
    Detection,
    Regression,
    JointXy,
    Z,
    Done,
}

pub struct CascadeModel<T: Element> {
    pub cfg: CascadeConfig,
    pub store: ParamStore<T>,
    pub det: DetectionNet,
    pub reg: Hourglass,
    pub zreg: ZRegressor,
    pub stage: TrainStage,
}

/// Values of one XY forward pass.
pub struct XyVars {
    pub logits: Var,
    pub features: Var,
    pub det_maps: Var,
    pub reg_maps: Var,
}

/// Everything the cascade predicts for one crop.
#[derive(Debug, Clone)]
pub struct CropPrediction {
    /// Decoded detection heatmaps, crop coordinates.
    pub detection: LandmarkSet2D,
    /// Decoded regression heatmaps, crop coordinates.
    pub regression: LandmarkSet2D,
    /// Depth in crop pixels.
    pub z: Vec<f64>,
    pub low_confidence: Vec<bool>,
}

impl CropPrediction {
    pub fn landmarks(&self) -> LandmarkSet3D {
        LandmarkSet3D {
            points: self
                .regression
                .points
                .iter()
                .zip(&self.z)
                .map(|(p, z)| [p[0], p[1], *z])
                .collect(),
            visible: vec![true; self.z.len()],
        }
    }
}

/// Stack crops into a normalised `[B, 3, S, S]` tensor.
pub fn image_batch<T: Element>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| CoreError::Data("empty image batch".into()))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if img.width != w || img.height != h {
            return Err(CoreError::Data("images in a batch must share a size".into()));
        }
        data.extend(img.data.iter().map(|&v| T::of(v as f64 - 0.5)));
    }
    Ok(Tensor::new(vec![images.len(), 3, h, w], data)?)
}

fn sigmoid_f64(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Per-sample heatmap stacks out of a `[B, N, H, W]` tensor.
pub fn stacks_of<T: Element>(
    t: &Tensor<T>,
    kind: HeatmapKind,
    crop: usize,
    map: impl Fn(f64) -> f64,
) -> Result<Vec<HeatmapStack>> {
    let [b, n, h, w] = t.dims4("heatmaps")?;
    let per = n * h * w;
    (0..b)
        .map(|i| {
            let data = t.data()[i * per..(i + 1) * per]
                .iter()
                .map(|v| map(v.as_f64()))
                .collect();
            HeatmapStack::new(n, (h, w), data, kind, (crop, crop))
        })
        .collect()
}

impl<T: Element> CascadeModel<T> {
    pub fn new(cfg: CascadeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let det = DetectionNet::build(&mut b, &cfg)?;
        let reg = Hourglass::build(&mut b, &cfg)?;
        let zreg = ZRegressor::build(&mut b, &cfg)?;
        Ok(CascadeModel {
            cfg,
            store,
            det,
            reg,
            zreg,
            stage: TrainStage::Detection,
        })
    }

    fn check_images(&self, images: &Tensor<T>) -> Result<usize> {
        let [b, c, h, w] = images.dims4("images")?;
        if c != 3 || h != self.cfg.crop || w != self.cfg.crop {
            return Err(CoreError::Data(format!(
                "expected [B, 3, {0}, {0}] images, got {1:?}",
                self.cfg.crop,
                images.shape()
            )));
        }
        Ok(b)
    }

    /// Record detection + regression into `cx`.
    pub fn record_xy(&self, cx: &mut Ctx<T>, images: Var, det_training: bool, reg_training: bool) -> Result<XyVars> {
        let d = self.det.forward(cx, images, det_training)?;
        let det_maps = cx.tape.sigmoid(d.logits)?;
        let reg_maps = self.reg.forward(cx, det_maps, d.features, reg_training)?;
        Ok(XyVars {
            logits: d.logits,
            features: d.features,
            det_maps,
            reg_maps,
        })
    }

    /// Record the depth regressor on `[images, maps]`.
    pub fn record_z(&self, cx: &mut Ctx<T>, images: Var, maps: Var, training: bool) -> Result<Var> {
        let input = cx.tape.concat_channels(&[images, maps])?;
        if cx.tape.shape(input)[1] != self.zreg.in_channels {
            return Err(CoreError::Data(format!(
                "z regressor expects {} input channels, got {}",
                self.zreg.in_channels,
                cx.tape.shape(input)[1]
            )));
        }
        self.zreg.forward(cx, input, training)
    }

    /// Detection logits `[B, N, Hm, Hm]`, eval mode.
    pub fn forward_detection(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_images(images)?;
        let mut tape = Tape::new();
        let mut cx = Ctx::inference(&mut tape, &self.store);
        let x = cx.tape.constant(images.clone())?;
        let d = self.det.forward(&mut cx, x, false)?;
        Ok(tape.value(d.logits).clone())
    }

    /// Backbone features feeding the regression stage, eval mode.
    pub fn detection_features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_images(images)?;
        let mut tape = Tape::new();
        let mut cx = Ctx::inference(&mut tape, &self.store);
        let x = cx.tape.constant(images.clone())?;
        let d = self.det.forward(&mut cx, x, false)?;
        Ok(tape.value(d.features).clone())
    }

    /// Regression heatmaps `[B, N, S, S]` from detection heatmaps and
    /// backbone features, eval mode.
    pub fn forward_regression(&self, det_maps: &Tensor<T>, features: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, n, h, _] = det_maps.dims4("detection heatmaps")?;
        if n != self.cfg.n_points || h != self.cfg.heatmap {
            return Err(CoreError::Data(format!(
                "expected [B, {0}, {2}, {2}] heatmaps, got {1:?}",
                self.cfg.n_points,
                det_maps.shape(),
                self.cfg.heatmap
            )));
        }
        let mut tape = Tape::new();
        let mut cx = Ctx::inference(&mut tape, &self.store);
        let m = cx.tape.constant(det_maps.clone())?;
        let f = cx.tape.constant(features.clone())?;
        let out = self.reg.forward(&mut cx, m, f, false)?;
        Ok(tape.value(out).clone())
    }

    /// Depth predictions `[B, N]` in normalised units, eval mode.
    pub fn forward_z(&self, images: &Tensor<T>, maps: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_images(images)?;
        let mut tape = Tape::new();
        let mut cx = Ctx::inference(&mut tape, &self.store);
        let x = cx.tape.constant(images.clone())?;
        let m = cx.tape.constant(maps.clone())?;
        let z = self.record_z(&mut cx, x, m, false)?;
        Ok(tape.value(z).clone())
    }

    /// Full cascade on prepared crops.
    pub fn predict_crops(&self, crops: &[&Image]) -> Result<Vec<CropPrediction>> {
        let images = image_batch::<T>(crops)?;
        self.check_images(&images)?;
        let mut tape = Tape::new();
        let mut cx = Ctx::inference(&mut tape, &self.store);
        let x = cx.tape.constant(images)?;
        let xy = self.record_xy(&mut cx, x, false, false)?;
        let z = self.record_z(&mut cx, x, xy.reg_maps, false)?;
        let crop = self.cfg.crop;
        let det = stacks_of(tape.value(xy.logits), HeatmapKind::Predicted, crop, sigmoid_f64)?;
        let reg = stacks_of(tape.value(xy.reg_maps), HeatmapKind::Predicted, crop, |v| v)?;
        let n = self.cfg.n_points;
        let zs = tape.value(z).data();
        Ok(det
            .iter()
            .zip(&reg)
            .enumerate()
            .map(|(i, (d, r))| {
                let dd = decode_argmax(d);
                let rd = decode_argmax(r);
                CropPrediction {
                    detection: dd.landmarks,
                    regression: rd.landmarks,
                    z: zs[i * n..(i + 1) * n]
                        .iter()
                        .map(|v| v.as_f64() * self.cfg.z_scale)
                        .collect(),
                    low_confidence: rd.low_confidence,
                }
            })
            .collect())
    }

    /// Test-time crop of a face box.
    pub fn crop_for(&self, image: &Image, bbox: &BBox) -> Result<(Image, Affine2D)> {
        let b = expand_bbox(bbox, TEST_EXPANSION).squared();
        crop_resize(image, &b, self.cfg.crop)
    }

    /// Crop → detection → regression → decode → depth → source coordinates.
    pub fn predict_landmarks_3d(&self, image: &Image, bbox: &BBox) -> Result<LandmarkSet3D> {
        if self.stage != TrainStage::Done {
            return Err(CoreError::Model(format!(
                "model is untrained (stage {:?})",
                self.stage
            )));
        }
        bbox.validate()?;
        let (crop, a) = self.crop_for(image, bbox)?;
        let p = self.predict_crops(&[&crop])?.remove(0);
        to_source_coords(&p.landmarks(), &a)
    }

    pub fn census(&self) -> Census {
        Census::of(self)
    }

    /// Write weights to `<stem>.phr` and the sidecar to `<stem>.json`.
    pub fn save_checkpoint(&self, stem: &Path, meta: &CheckpointMeta) -> Result<()> {
        if let Some(dir) = stem.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(File::create(stem.with_extension("phr"))?);
        self.store.save(&mut w)?;
        let side = Sidecar {
            config: self.cfg.clone(),
            stage: self.stage,
            dtype: if T::DTYPE == phr_tensor::DType::F64 { "f64" } else { "f32" }.into(),
            meta: meta.clone(),
        };
        std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn load_checkpoint(stem: &Path) -> Result<(Self, CheckpointMeta)> {
        let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
        let mut model = Self::new(side.config, 0)?;
        let r = BufReader::new(File::open(stem.with_extension("phr"))?);
        model.store.load(r)?;
        model.stage = side.stage;
        Ok((model, side.meta))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub seed: u64,
    /// Stage-local RNG stream index to resume from.
    pub rng_stream: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    config: CascadeConfig,
    stage: TrainStage,
    dtype: String,
    meta: CheckpointMeta,
}

/// Structural description of an instantiated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Census {
    pub total_params: usize,
    pub subnetworks: Vec<SubnetCensus>,
    /// Depth regressor blocks B1…B6.
    pub z_blocks: Vec<BlockCensus>,
    pub z_input_channels: usize,
    pub z_outputs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubnetCensus {
    pub name: String,
    pub params: usize,
    pub bottlenecks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCensus {
    pub name: String,
    pub description: String,
    pub bottlenecks: usize,
    /// (output channels, kernel) of the three convolutions of each
    /// bottleneck in the block, taken from the first one.
    pub layers: Vec<(usize, usize)>,
    pub params: usize,
}

impl Census {
    fn of<T: Element>(m: &CascadeModel<T>) -> Census {
        let s = &m.store;
        let shape = |id| s.param(id).value.shape().to_vec();
        let zb = &m.zreg.backbone;
        let stem = shape(zb.stem.w);
        let mut z_blocks = vec![BlockCensus {
            name: "B1".into(),
            description: format!(
                "conv({}, {}x{}, stride {}) + pool(3x3, stride 2)",
                stem[0], stem[2], stem[3], zb.stem.stride
            ),
            bottlenecks: 0,
            layers: vec![(stem[0], stem[2])],
            params: s.num_scalars_under("zreg.backbone.stem") + s.num_scalars_under("zreg.backbone.stem_bn"),
        }];
        for (i, st) in zb.stages.iter().enumerate() {
            let b0 = &st.blocks[0];
            let layers: Vec<(usize, usize)> = [b0.conv1.w, b0.conv2.w, b0.conv3.w]
                .iter()
                .map(|&w| {
                    let sh = shape(w);
                    (sh[0], sh[2])
                })
                .collect();
            let desc = layers
                .iter()
                .map(|(c, k)| format!("({c}, {k}x{k})"))
                .collect::<Vec<_>>()
                .join(", ");
            z_blocks.push(BlockCensus {
                name: format!("B{}", i + 2),
                description: format!("{} bottlenecks [{desc}]", st.blocks.len()),
                bottlenecks: st.blocks.len(),
                layers,
                params: s.num_scalars_under(&format!("zreg.backbone.stage{}", i + 1)),
            });
        }
        let fc = shape(m.zreg.fc_w);
        z_blocks.push(BlockCensus {
            name: format!("B{}", zb.stages.len() + 2),
            description: format!("fully connected ({})", fc[0]),
            bottlenecks: 0,
            layers: vec![(fc[0], 1)],
            params: s.num_scalars_under("zreg.fc"),
        });
        let subnetworks = vec![
            SubnetCensus {
                name: "detection".into(),
                params: s.num_scalars_under("detection"),
                bottlenecks: m.det.backbone.blocks().count(),
            },
            SubnetCensus {
                name: "regression".into(),
                params: s.num_scalars_under("regression"),
                bottlenecks: m.reg.bottlenecks(),
            },
            SubnetCensus {
                name: "zreg".into(),
                params: s.num_scalars_under("zreg"),
                bottlenecks: m.zreg.backbone.blocks().count(),
            },
        ];
        Census {
            total_params: s.num_scalars(),
            subnetworks,
            z_blocks,
            z_input_channels: stem[1],
            z_outputs: fc[0],
        }
    }
}
