//! Stage-wise training: detection, regression (detection frozen), joint XY,
//! then depth with a mix of ground-truth and predicted heatmaps.

use std::path::PathBuf;

use phr_tensor::{sgd_step, Element, LrSchedule, OptimizerState, Tape, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cascade::{image_batch, CascadeModel, CheckpointMeta, CropPrediction, TrainStage};
use super::config::Preset;
use super::layers::Ctx;
use crate::error::{CoreError, Result};
use crate::geometry::{
    crop_resize, expand_bbox, random_augment, stream_rng, to_crop_coords, AugmentConfig, BBox, Image,
    TEST_EXPANSION, TRAIN_EXPANSION,
};
use crate::heatmap::{encode_binary_disk, encode_gaussian};
use crate::landmarks::LandmarkSet3D;
use crate::metrics::{gte, Axes, MetricConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub epochs: usize,
    /// Start and end learning rate.
    pub lr: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub detection: StageSchedule,
    pub regression: StageSchedule,
    pub joint: StageSchedule,
    pub z: StageSchedule,
    /// Piecewise-constant steps per stage.
    pub lr_steps: usize,
    pub momentum: f64,
    pub batch_xy: usize,
    pub batch_z: usize,
    /// Probability that a Z-stage sample gets ground-truth heatmaps.
    pub gt_heatmap_mix: f64,
    /// Weights of (detection, regression) losses in the joint stage.
    pub joint_weights: [f64; 2],
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            detection: StageSchedule {
                epochs: 30,
                lr: [1e-3, 2.5e-5],
            },
            regression: StageSchedule {
                epochs: 30,
                lr: [1e-4, 2.5e-5],
            },
            joint: StageSchedule {
                epochs: 30,
                lr: [1e-4, 2.5e-5],
            },
            z: StageSchedule {
                epochs: 100,
                lr: [1e-2, 2.5e-4],
            },
            lr_steps: 4,
            momentum: 0.9,
            batch_xy: 8,
            batch_z: 16,
            gt_heatmap_mix: 0.5,
            joint_weights: [1.0, 1.0],
        }
    }
}

impl TrainSchedule {
    /// Desk-scale schedule: epochs {8, 8, 8, 20} with learning rates retuned
    /// for the ÷8 topology trained from scratch. End rates are start / 40,
    /// the same ratio as the full-scale detection schedule.
    pub fn desk() -> Self {
        let stage = |epochs, lr: f64| StageSchedule {
            epochs,
            lr: [lr, lr / 40.0],
        };
        TrainSchedule {
            detection: stage(8, 0.1),
            regression: stage(8, 1.0),
            joint: stage(8, 0.1),
            z: stage(20, 0.1),
            joint_weights: [1.0, 10.0],
            ..TrainSchedule::default()
        }
    }

    pub fn for_preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => Self::default(),
            Preset::Desk => Self::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in self.stages() {
            if s.epochs == 0 {
                return Err(CoreError::Config(format!("{name}: epochs must be positive")));
            }
            if !(s.lr[0] > 0.0 && s.lr[1] > 0.0) {
                return Err(CoreError::Config(format!("{name}: learning rates must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.gt_heatmap_mix) {
            return Err(CoreError::Config("gt_heatmap_mix must be in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CoreError::Config("momentum must be in [0, 1)".into()));
        }
        if self.batch_xy == 0 || self.batch_z == 0 || self.lr_steps == 0 {
            return Err(CoreError::Config("batch sizes and lr_steps must be positive".into()));
        }
        if self.joint_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(CoreError::Config("joint loss weights must be non-negative".into()));
        }
        Ok(())
    }

    fn stages(&self) -> [(&'static str, &StageSchedule); 4] {
        [
            ("detection", &self.detection),
            ("regression", &self.regression),
            ("joint_xy", &self.joint),
            ("z", &self.z),
        ]
    }

    fn lr_schedule(&self, s: &StageSchedule) -> Result<LrSchedule> {
        Ok(LrSchedule::stepped(s.lr[0], s.lr[1], s.epochs, self.lr_steps)?)
    }
}

/// A face in its source image.
#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub image: Image,
    pub bbox: BBox,
    pub landmarks: LandmarkSet3D,
}

/// A crop ready for the network, landmarks in crop pixels.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub image: Image,
    pub landmarks: LandmarkSet3D,
    pub face_height: f64,
}

/// Crop with `expansion`, then optionally augment.
pub fn prepare<R: Rng + ?Sized>(
    rec: &TrainRecord,
    crop: usize,
    expansion: f64,
    augment: Option<(&AugmentConfig, &mut R)>,
) -> Result<Prepared> {
    let b = expand_bbox(&rec.bbox, expansion).squared();
    let (image, a) = crop_resize(&rec.image, &b, crop)?;
    let mut landmarks = to_crop_coords(&rec.landmarks, &a);
    landmarks.clip_visibility((crop, crop));
    let face_height = rec.bbox.height() * a.scale();
    match augment {
        None => Ok(Prepared {
            image,
            landmarks,
            face_height,
        }),
        Some((cfg, rng)) => {
            let (image, landmarks, t) = random_augment(&image, &landmarks, cfg, rng)?;
            Ok(Prepared {
                image,
                landmarks,
                face_height: face_height * t.scale(),
            })
        }
    }
}

pub fn prepare_eval(rec: &TrainRecord, crop: usize) -> Result<Prepared> {
    prepare::<rand_chacha::ChaCha8Rng>(rec, crop, TEST_EXPANSION, None)
}

/// Network inputs and targets for a batch.
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub disks: Tensor<T>,
    pub gaussians: Tensor<T>,
    /// Depth / z_scale.
    pub z: Tensor<T>,
    /// One weight per (sample, landmark).
    pub mask: Vec<T>,
}

pub fn make_batch<T: Element>(m: &CascadeModel<T>, samples: &[&Prepared]) -> Result<Batch<T>> {
    let cfg = &m.cfg;
    let (crop, hm, n) = (cfg.crop, cfg.heatmap, cfg.n_points);
    let images = image_batch::<T>(&samples.iter().map(|s| &s.image).collect::<Vec<_>>())?;
    let mut disks = Vec::with_capacity(samples.len() * n * hm * hm);
    let mut gaussians = Vec::with_capacity(samples.len() * n * crop * crop);
    let mut z = Vec::with_capacity(samples.len() * n);
    let mut mask = Vec::with_capacity(samples.len() * n);
    for s in samples {
        if s.landmarks.len() != n {
            return Err(CoreError::Data(format!(
                "sample has {} landmarks, model expects {n}",
                s.landmarks.len()
            )));
        }
        let l2 = s.landmarks.to_2d((crop, crop));
        let d = encode_binary_disk(&l2, s.face_height, (hm, hm))?;
        let g = encode_gaussian(&l2, cfg.gaussian_std, (crop, crop))?;
        disks.extend(d.data.iter().map(|&v| T::of(v)));
        gaussians.extend(g.data.iter().map(|&v| T::of(v)));
        z.extend(s.landmarks.points.iter().map(|p| T::of(p[2] / cfg.z_scale)));
        mask.extend(s.landmarks.visible.iter().map(|&v| if v { T::one() } else { T::zero() }));
    }
    let b = samples.len();
    Ok(Batch {
        images,
        disks: Tensor::new(vec![b, n, hm, hm], disks)?,
        gaussians: Tensor::new(vec![b, n, crop, crop], gaussians)?,
        z: Tensor::new(vec![b, n], z)?,
        mask,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub stage: TrainStage,
    pub loss: f64,
    pub val_gte_xy: f64,
    /// Only measured in the Z stage.
    pub val_gte_z: Option<f64>,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "epoch,stage,loss,val_gte_xy,val_gte_z,lr";

impl LogRow {
    pub fn csv(&self) -> String {
        let stage = serde_json::to_value(self.stage)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            stage,
            self.loss,
            self.val_gte_xy,
            self.val_gte_z.map(|z| z.to_string()).unwrap_or_default(),
            self.lr
        )
    }
}

/// Validation measurements, all in crop coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValStats {
    pub gte_xy_detection: f64,
    pub gte_xy_regression: f64,
    /// Mean point distance in crop pixels.
    pub decode_error_detection: f64,
    pub decode_error_regression: f64,
    pub gte_z: f64,
    pub gte_xyz: f64,
    /// Depth loss of the form (1/N)·Σ(z̃ − z)², crop pixels², averaged over samples.
    pub z_loss: f64,
}

pub fn validate<T: Element>(m: &CascadeModel<T>, val: &[Prepared], metric: &MetricConfig) -> Result<ValStats> {
    if val.is_empty() {
        return Err(CoreError::Data("empty validation set".into()));
    }
    let mut preds: Vec<CropPrediction> = Vec::with_capacity(val.len());
    for chunk in val.chunks(16) {
        preds.extend(m.predict_crops(&chunk.iter().map(|p| &p.image).collect::<Vec<_>>())?);
    }
    let mut acc = [0.0f64; 7];
    let mut counted = [0usize; 2];
    for (p, v) in preds.iter().zip(val) {
        let gt = &v.landmarks;
        let as3 = |pts: &[[f64; 2]]| LandmarkSet3D {
            points: pts.iter().zip(&gt.points).map(|(a, g)| [a[0], a[1], g[2]]).collect(),
            visible: gt.visible.clone(),
        };
        let full = p.landmarks();
        acc[0] += gte(&as3(&p.detection.points), gt, Axes::XY, metric)?;
        acc[1] += gte(&as3(&p.regression.points), gt, Axes::XY, metric)?;
        acc[4] += gte(&full, gt, Axes::Z, metric)?;
        acc[5] += gte(&full, gt, Axes::XYZ, metric)?;
        let mut zl = 0.0;
        let mut nz = 0usize;
        for (k, g) in gt.points.iter().enumerate() {
            if !gt.visible[k] {
                continue;
            }
            let dist = |q: [f64; 2]| ((q[0] - g[0]).powi(2) + (q[1] - g[1]).powi(2)).sqrt();
            acc[2] += dist(p.detection.points[k]);
            acc[3] += dist(p.regression.points[k]);
            counted[0] += 1;
            zl += (p.z[k] - g[2]).powi(2);
            nz += 1;
        }
        if nz > 0 {
            acc[6] += zl / nz as f64;
            counted[1] += 1;
        }
    }
    let n = val.len() as f64;
    let pts = counted[0].max(1) as f64;
    Ok(ValStats {
        gte_xy_detection: acc[0] / n,
        gte_xy_regression: acc[1] / n,
        decode_error_detection: acc[2] / pts,
        decode_error_regression: acc[3] / pts,
        gte_z: acc[4] / n,
        gte_xyz: acc[5] / n,
        z_loss: acc[6] / counted[1].max(1) as f64,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub untrained: Option<ValStats>,
    pub after_detection: Option<ValStats>,
    pub after_regression: Option<ValStats>,
    pub after_joint: Option<ValStats>,
    pub final_stats: Option<ValStats>,
    /// Validation depth loss after each Z epoch.
    pub z_val_loss: Vec<f64>,
    /// Z-stage samples fed ground-truth / predicted heatmaps.
    pub gt_heatmap_samples: usize,
    pub predicted_heatmap_samples: usize,
}

pub struct TrainOptions<'a> {
    pub seed: u64,
    pub metric: MetricConfig,
    pub augment: Option<AugmentConfig>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Skip every stage up to and including this one (a loaded checkpoint's
    /// stage).
    pub resume_after: Option<TrainStage>,
    pub progress: Option<&'a mut dyn FnMut(&LogRow)>,
}

pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub summary: TrainSummary,
}

const SUBNETS: [&str; 3] = ["detection", "regression", "zreg"];

fn set_trainable<T: Element>(m: &mut CascadeModel<T>, trainable: &[&str]) -> Result<()> {
    for s in SUBNETS {
        if trainable.contains(&s) {
            m.store.unfreeze(s)?;
        } else {
            m.store.freeze(s)?;
        }
    }
    Ok(())
}

fn stage_tag(s: TrainStage) -> u64 {
    match s {
        TrainStage::Detection => 1,
        TrainStage::Regression => 2,
        TrainStage::JointXy => 3,
        TrainStage::Z => 4,
        TrainStage::Done => 5,
    }
}

fn numeric(stage: TrainStage, epoch: usize, batch: usize) -> impl Fn(TensorError) -> CoreError {
    move |e| match e {
        TensorError::NonFinite { .. } => CoreError::NonFiniteLoss {
            stage: format!("{stage:?}"),
            epoch,
            batch,
            loss: f64::NAN,
        },
        other => CoreError::Tensor(other),
    }
}

fn lift(e: CoreError, stage: TrainStage, epoch: usize, batch: usize) -> CoreError {
    match e {
        CoreError::Tensor(t) => numeric(stage, epoch, batch)(t),
        other => other,
    }
}

struct Trainer<'a, 'b, T: Element> {
    model: &'a mut CascadeModel<T>,
    train: &'a [TrainRecord],
    val: Vec<Prepared>,
    schedule: &'a TrainSchedule,
    opts: TrainOptions<'b>,
    log: Vec<LogRow>,
    summary: TrainSummary,
}

impl<T: Element> Trainer<'_, '_, T> {
    fn epoch_samples(&self, stage: TrainStage, epoch: usize) -> Result<Vec<Prepared>> {
        let crop = self.model.cfg.crop;
        self.train
            .iter()
            .enumerate()
            .map(|(i, rec)| {
                let mut rng = stream_rng(self.opts.seed, &[stage_tag(stage), epoch as u64, i as u64]);
                let frac = rng.random_range(TRAIN_EXPANSION[0]..=TRAIN_EXPANSION[1]);
                match &self.opts.augment {
                    Some(a) => prepare(rec, crop, frac, Some((a, &mut rng))),
                    None => prepare::<rand_chacha::ChaCha8Rng>(rec, crop, frac, None),
                }
            })
            .collect()
    }

    fn order(&self, stage: TrainStage, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.train.len()).collect();
        let mut rng = stream_rng(self.opts.seed, &[stage_tag(stage), epoch as u64, u64::MAX]);
        idx.shuffle(&mut rng);
        idx
    }

    fn push_row(&mut self, row: LogRow) {
        if let Some(cb) = self.opts.progress.as_mut() {
            cb(&row);
        }
        self.log.push(row);
    }

    fn checkpoint(&self, name: &str, epoch: usize) -> Result<()> {
        if let Some(dir) = &self.opts.checkpoint_dir {
            let meta = CheckpointMeta {
                epoch,
                seed: self.opts.seed,
                rng_stream: stage_tag(self.model.stage),
            };
            self.model.save_checkpoint(&dir.join(format!("stage_{name}")), &meta)?;
        }
        Ok(())
    }

    fn xy_stage(&mut self, stage: TrainStage, sched: &StageSchedule) -> Result<ValStats> {
        let (det_on, reg_on) = match stage {
            TrainStage::Detection => (true, false),
            TrainStage::Regression => (false, true),
            _ => (true, true),
        };
        let trainable: Vec<&str> = [("detection", det_on), ("regression", reg_on)]
            .iter()
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect();
        set_trainable(self.model, &trainable)?;
        self.model.stage = stage;
        let mut opt = OptimizerState::<T>::new(self.schedule.lr_schedule(sched)?, self.schedule.momentum)?;
        let w = self.schedule.joint_weights;
        let mut stats = None;
        for epoch in 0..sched.epochs {
            let samples = self.epoch_samples(stage, epoch)?;
            let order = self.order(stage, epoch);
            let mut total = 0.0;
            let mut batches = 0usize;
            for (bi, chunk) in order.chunks(self.schedule.batch_xy).enumerate() {
                let picked: Vec<&Prepared> = chunk.iter().map(|&i| &samples[i]).collect();
                let batch = make_batch(self.model, &picked)?;
                let m = &mut *self.model;
                m.store.zero_grad();
                let mut tape = Tape::new();
                let loss = {
                    let CascadeModel {
                        store, det, reg, ..
                    } = m;
                    let mut cx = Ctx::training(&mut tape, store);
                    let run = |cx: &mut Ctx<T>| -> Result<_> {
                        let x = cx.tape.constant(batch.images.clone())?;
                        let d = det.forward(cx, x, det_on)?;
                        let mut terms = Vec::new();
                        if det_on {
                            let l = cx.tape.sigmoid_cross_entropy(d.logits, &batch.disks, Some(&batch.mask))?;
                            terms.push((l, w[0]));
                        }
                        if reg_on {
                            let maps = cx.tape.sigmoid(d.logits)?;
                            let r = reg.forward(cx, maps, d.features, true)?;
                            let l = cx.tape.l2_pixelwise(r, &batch.gaussians, Some(&batch.mask))?;
                            terms.push((l, w[1]));
                        }
                        let loss = if terms.len() == 1 {
                            terms[0].0
                        } else {
                            let a = cx.tape.weighted_sum(terms[0].0, &Tensor::scalar(T::of(terms[0].1)))?;
                            let b = cx.tape.weighted_sum(terms[1].0, &Tensor::scalar(T::of(terms[1].1)))?;
                            cx.tape.add(a, b)?
                        };
                        Ok(loss)
                    };
                    run(&mut cx).map_err(|e| lift(e, stage, epoch + 1, bi))?
                };
                let value = tape.value(loss).item().as_f64();
                if !value.is_finite() {
                    return Err(CoreError::NonFiniteLoss {
                        stage: format!("{stage:?}"),
                        epoch: epoch + 1,
                        batch: bi,
                        loss: value,
                    });
                }
                tape.backward_into(loss, &mut m.store)
                    .map_err(numeric(stage, epoch + 1, bi))?;
                sgd_step(&mut m.store, &mut opt, epoch as f64)?;
                total += value;
                batches += 1;
            }
            let s = validate(self.model, &self.val, &self.opts.metric)?;
            let gte_xy = if stage == TrainStage::Detection {
                s.gte_xy_detection
            } else {
                s.gte_xy_regression
            };
            let lr = opt.schedule.rate(epoch as f64);
            self.push_row(LogRow {
                epoch: epoch + 1,
                stage,
                loss: total / batches as f64,
                val_gte_xy: gte_xy,
                val_gte_z: None,
                lr,
            });
            stats = Some(s);
        }
        Ok(stats.expect("at least one epoch"))
    }

    /// Regression heatmaps for a batch, eval mode, as `[B, N, S, S]`.
    fn predicted_maps(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut cx = Ctx::inference(&mut tape, &self.model.store);
        let x = cx.tape.constant(images.clone())?;
        let xy = self.model.record_xy(&mut cx, x, false, false)?;
        Ok(tape.value(xy.reg_maps).clone())
    }

    fn z_stage(&mut self, sched: &StageSchedule) -> Result<ValStats> {
        let stage = TrainStage::Z;
        set_trainable(self.model, &["zreg"])?;
        self.model.stage = stage;
        let mut opt = OptimizerState::<T>::new(self.schedule.lr_schedule(sched)?, self.schedule.momentum)?;
        let mix = self.schedule.gt_heatmap_mix;
        let mut stats = None;
        for epoch in 0..sched.epochs {
            let samples = self.epoch_samples(stage, epoch)?;
            let order = self.order(stage, epoch);
            let mut total = 0.0;
            let mut batches = 0usize;
            for (bi, chunk) in order.chunks(self.schedule.batch_z).enumerate() {
                let picked: Vec<&Prepared> = chunk.iter().map(|&i| &samples[i]).collect();
                let batch = make_batch(self.model, &picked)?;
                let use_gt: Vec<bool> = chunk
                    .iter()
                    .map(|&i| {
                        let mut rng = stream_rng(self.opts.seed, &[99, epoch as u64, i as u64]);
                        rng.random::<f64>() < mix
                    })
                    .collect();
                let maps = if use_gt.iter().all(|&g| g) {
                    batch.gaussians.clone()
                } else {
                    let pred = self.predicted_maps(&batch.images)?;
                    let per = pred.len() / chunk.len();
                    let mut data = batch.gaussians.data().to_vec();
                    for (k, &g) in use_gt.iter().enumerate() {
                        if !g {
                            data[k * per..(k + 1) * per].copy_from_slice(&pred.data()[k * per..(k + 1) * per]);
                        }
                    }
                    Tensor::new(batch.gaussians.shape().to_vec(), data)?
                };
                let n_gt = use_gt.iter().filter(|&&g| g).count();
                self.summary.gt_heatmap_samples += n_gt;
                self.summary.predicted_heatmap_samples += use_gt.len() - n_gt;

                let m = &mut *self.model;
                m.store.zero_grad();
                let mut tape = Tape::new();
                let loss = {
                    let CascadeModel { store, zreg, .. } = m;
                    let mut cx = Ctx::training(&mut tape, store);
                    let run = |cx: &mut Ctx<T>| -> Result<_> {
                        let x = cx.tape.constant(batch.images.clone())?;
                        let hm = cx.tape.constant(maps)?;
                        let input = cx.tape.concat_channels(&[x, hm])?;
                        let z = zreg.forward(cx, input, true)?;
                        Ok(cx.tape.l2_z(z, &batch.z, Some(&batch.mask))?)
                    };
                    run(&mut cx).map_err(|e| lift(e, stage, epoch + 1, bi))?
                };
                let value = tape.value(loss).item().as_f64();
                if !value.is_finite() {
                    return Err(CoreError::NonFiniteLoss {
                        stage: "Z".into(),
                        epoch: epoch + 1,
                        batch: bi,
                        loss: value,
                    });
                }
                tape.backward_into(loss, &mut m.store)
                    .map_err(numeric(stage, epoch + 1, bi))?;
                sgd_step(&mut m.store, &mut opt, epoch as f64)?;
                // Reported in pixels².
                total += value * m.cfg.z_scale * m.cfg.z_scale;
                batches += 1;
            }
            let s = validate(self.model, &self.val, &self.opts.metric)?;
            self.summary.z_val_loss.push(s.z_loss);
            let lr = opt.schedule.rate(epoch as f64);
            self.push_row(LogRow {
                epoch: epoch + 1,
                stage,
                loss: total / batches as f64,
                val_gte_xy: s.gte_xy_regression,
                val_gte_z: Some(s.gte_z),
                lr,
            });
            stats = Some(s);
        }
        Ok(stats.expect("at least one epoch"))
    }
}

/// Run all four stages in order.
pub fn train_stagewise<T: Element>(
    model: &mut CascadeModel<T>,
    train: &[TrainRecord],
    val: &[TrainRecord],
    schedule: &TrainSchedule,
    opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(CoreError::Data("training and validation sets must be non-empty".into()));
    }
    if let Some(a) = &opts.augment {
        a.validate()?;
    }
    let crop = model.cfg.crop;
    let val = val.iter().map(|r| prepare_eval(r, crop)).collect::<Result<Vec<_>>>()?;
    let mut t = Trainer {
        model,
        train,
        val,
        schedule,
        opts,
        log: Vec::new(),
        summary: TrainSummary::default(),
    };
    t.summary.untrained = Some(validate(t.model, &t.val, &t.opts.metric)?);

    let resume = t.opts.resume_after;
    let skip = |s: TrainStage| resume.is_some_and(|r| stage_tag(s) <= stage_tag(r));
    let xy = [
        (TrainStage::Detection, &schedule.detection, "detection"),
        (TrainStage::Regression, &schedule.regression, "regression"),
        (TrainStage::JointXy, &schedule.joint, "joint_xy"),
    ];
    for (stage, sched, name) in xy {
        if skip(stage) {
            continue;
        }
        let stats = t.xy_stage(stage, sched)?;
        match stage {
            TrainStage::Detection => t.summary.after_detection = Some(stats),
            TrainStage::Regression => t.summary.after_regression = Some(stats),
            _ => t.summary.after_joint = Some(stats),
        }
        t.checkpoint(name, sched.epochs)?;
    }
    if skip(TrainStage::Z) {
        return Err(CoreError::Config("nothing left to train after the Z stage".into()));
    }
    t.summary.final_stats = Some(t.z_stage(&schedule.z)?);
    t.model.stage = TrainStage::Done;
    t.checkpoint("done", schedule.z.epochs)?;
    Ok(TrainOutcome {
        log: t.log,
        summary: t.summary,
    })
}
