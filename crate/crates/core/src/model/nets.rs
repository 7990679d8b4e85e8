//! Detection backbone + head, hourglass regressor and depth regressor.

use phr_tensor::{Element, InitSpec, Var};
use rand::Rng;

use super::config::{BackboneConfig, CascadeConfig, HourglassConfig};
use super::layers::{bn_relu, BatchNorm, Bottleneck, Builder, Conv, Ctx, Deconv, Stage};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Backbone {
    pub stem: Conv,
    pub stem_bn: BatchNorm,
    pub stages: Vec<Stage>,
    pub post_bn: BatchNorm,
}

impl Backbone {
    pub fn build<T: Element, R: Rng + ?Sized>(
        b: &mut Builder<T, R>,
        cfg: &BackboneConfig,
        in_channels: usize,
    ) -> Result<Self> {
        let stem = Conv::build(b, "stem", in_channels, cfg.stem_channels, 7, 2, 3, false)?;
        let stem_bn = BatchNorm::build(b, "stem_bn", cfg.stem_channels)?;
        let mut cin = cfg.stem_channels;
        let mut stages = Vec::new();
        for (i, ((&count, &width), &stride)) in
            cfg.counts.iter().zip(&cfg.widths).zip(&cfg.strides).enumerate()
        {
            let out = width * cfg.expansion;
            stages.push(Stage::build(b, &format!("stage{}", i + 1), cin, count, width, out, stride)?);
            cin = out;
        }
        let post_bn = BatchNorm::build(b, "post_bn", cin)?;
        Ok(Backbone {
            stem,
            stem_bn,
            stages,
            post_bn,
        })
    }

    /// Returns the BN-ReLU activated final feature map.
    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var, training: bool) -> Result<Var> {
        let h = self.stem.forward(cx, x)?;
        let h = bn_relu(cx, &self.stem_bn, h, training)?;
        let mut h = cx.tape.maxpool2d(h, (3, 3), (2, 2), (1, 1))?;
        for s in &self.stages {
            h = s.forward(cx, h, training)?;
        }
        bn_relu(cx, &self.post_bn, h, training)
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Bottleneck> {
        self.stages.iter().flat_map(|s| s.blocks.iter())
    }
}

#[derive(Debug, Clone)]
pub struct DetectionNet {
    pub backbone: Backbone,
    pub up: Deconv,
    pub up_bn: BatchNorm,
    pub out: Conv,
}

pub struct DetectionOutput {
    pub logits: Var,
    /// Backbone features before the deconvolution.
    pub features: Var,
}

impl DetectionNet {
    pub fn build<T: Element, R: Rng + ?Sized>(b: &mut Builder<T, R>, cfg: &CascadeConfig) -> Result<Self> {
        let d = &cfg.detection;
        b.scoped("detection", |b| {
            let backbone = b.scoped("backbone", |b| Backbone::build(b, &d.backbone, 3))?;
            let cf = d.backbone.out_channels();
            Ok(DetectionNet {
                backbone,
                up: Deconv::build(b, "up", cf, d.head_channels, d.upsample, false)?,
                up_bn: BatchNorm::build(b, "up_bn", d.head_channels)?,
                out: Conv::build_with(
                    b,
                    "out",
                    d.head_channels,
                    cfg.n_points,
                    3,
                    1,
                    1,
                    true,
                    InitSpec::Gaussian(0.01),
                )?,
            })
        })
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, image: Var, training: bool) -> Result<DetectionOutput> {
        let features = self.backbone.forward(cx, image, training)?;
        let h = self.up.forward(cx, features)?;
        let h = bn_relu(cx, &self.up_bn, h, training)?;
        let logits = self.out.forward(cx, h)?;
        Ok(DetectionOutput { logits, features })
    }
}

/// One hourglass level; `inner` is the next level down, if any.
#[derive(Debug, Clone)]
pub struct HourglassLevel {
    pub up1: Bottleneck,
    pub low1: Bottleneck,
    pub inner: Option<Box<HourglassLevel>>,
    pub mid: Option<Bottleneck>,
    pub low3: Bottleneck,
    pub up: Deconv,
}

impl HourglassLevel {
    fn build<T: Element, R: Rng + ?Sized>(b: &mut Builder<T, R>, c: usize, depth: usize) -> Result<Self> {
        let w = c / 2;
        b.scoped(format!("level{depth}"), |b| {
            let up1 = Bottleneck::build(b, "up1", c, w, c, 1)?;
            let low1 = Bottleneck::build(b, "low1", c, w, c, 1)?;
            let (inner, mid) = if depth > 1 {
                (Some(Box::new(HourglassLevel::build(b, c, depth - 1)?)), None)
            } else {
                (None, Some(Bottleneck::build(b, "mid", c, w, c, 1)?))
            };
            Ok(HourglassLevel {
                up1,
                low1,
                inner,
                mid,
                low3: Bottleneck::build(b, "low3", c, w, c, 1)?,
                up: Deconv::build(b, "up", c, c, 2, false)?,
            })
        })
    }

    fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var, training: bool) -> Result<Var> {
        let up1 = self.up1.forward(cx, x, training)?;
        let low = cx.tape.maxpool2d(x, (2, 2), (2, 2), (0, 0))?;
        let low = self.low1.forward(cx, low, training)?;
        let low = match (&self.inner, &self.mid) {
            (Some(inner), _) => inner.forward(cx, low, training)?,
            (None, Some(mid)) => mid.forward(cx, low, training)?,
            (None, None) => low,
        };
        let low = self.low3.forward(cx, low, training)?;
        let up2 = self.up.forward(cx, low)?;
        Ok(cx.tape.add(up1, up2)?)
    }

    fn blocks(&self) -> usize {
        3 + self.mid.is_some() as usize + self.inner.as_ref().map_or(0, |i| i.blocks())
    }
}

#[derive(Debug, Clone)]
pub struct Hourglass {
    pub in_maps: Conv,
    pub in_features: Conv,
    pub feature_upsample: usize,
    pub body: HourglassLevel,
    pub tail: Bottleneck,
    pub tail_bn: BatchNorm,
    pub out: Conv,
    pub up: Deconv,
}

impl Hourglass {
    pub fn build<T: Element, R: Rng + ?Sized>(b: &mut Builder<T, R>, cfg: &CascadeConfig) -> Result<Self> {
        let h: &HourglassConfig = &cfg.regression;
        let c = h.channels;
        let cf = cfg.detection.backbone.out_channels();
        let feat = cfg.crop / cfg.detection.backbone.total_stride();
        b.scoped("regression", |b| {
            Ok(Hourglass {
                in_maps: Conv::build(b, "in_maps", cfg.n_points, c, 1, 1, 0, true)?,
                in_features: Conv::build(b, "in_features", cf, c, 1, 1, 0, false)?,
                feature_upsample: cfg.heatmap / feat,
                body: HourglassLevel::build(b, c, h.depth)?,
                tail: Bottleneck::build(b, "tail", c, c / 2, c, 1)?,
                tail_bn: BatchNorm::build(b, "tail_bn", c)?,
                out: Conv::build_with(b, "out", c, cfg.n_points, 1, 1, 0, true, InitSpec::Gaussian(0.01))?,
                up: Deconv::build(b, "up", cfg.n_points, cfg.n_points, h.final_upsample, false)?,
            })
        })
    }

    /// `maps` are detection heatmaps at map resolution, `features` the
    /// detection backbone output.
    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, maps: Var, features: Var, training: bool) -> Result<Var> {
        // A 1×1 convolution over [maps, upsample(features)] split into its two
        // channel groups; nearest upsampling commutes with the 1×1 kernel.
        let a = self.in_maps.forward(cx, maps)?;
        let f = self.in_features.forward(cx, features)?;
        let f = if self.feature_upsample > 1 {
            cx.tape.upsample_nearest(f, self.feature_upsample)?
        } else {
            f
        };
        let x = cx.tape.add(a, f)?;
        let x = self.body.forward(cx, x, training)?;
        let x = self.tail.forward(cx, x, training)?;
        let x = bn_relu(cx, &self.tail_bn, x, training)?;
        let x = self.out.forward(cx, x)?;
        self.up.forward(cx, x)
    }

    pub fn bottlenecks(&self) -> usize {
        self.body.blocks() + 1
    }
}

#[derive(Debug, Clone)]
pub struct ZRegressor {
    pub backbone: Backbone,
    pub fc_w: phr_tensor::ParamId,
    pub fc_b: phr_tensor::ParamId,
    pub in_channels: usize,
    pub outputs: usize,
}

impl ZRegressor {
    pub fn build<T: Element, R: Rng + ?Sized>(b: &mut Builder<T, R>, cfg: &CascadeConfig) -> Result<Self> {
        let z = &cfg.z;
        b.scoped("zreg", |b| {
            let backbone = b.scoped("backbone", |b| Backbone::build(b, &z.backbone, z.in_channels))?;
            let f = z.backbone.out_channels();
            let (fc_w, fc_b) = b.scoped("fc", |b| {
                Ok((
                    b.param("weight", &[cfg.n_points, f], InitSpec::Gaussian(0.01))?,
                    b.param("bias", &[cfg.n_points], InitSpec::Zeros)?,
                ))
            })?;
            Ok(ZRegressor {
                backbone,
                fc_w,
                fc_b,
                in_channels: z.in_channels,
                outputs: cfg.n_points,
            })
        })
    }

    /// `input` is the image stacked with N heatmaps.
    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, input: Var, training: bool) -> Result<Var> {
        let h = self.backbone.forward(cx, input, training)?;
        let h = cx.tape.global_avg_pool(h)?;
        let w = cx.param(self.fc_w)?;
        let b = cx.param(self.fc_b)?;
        Ok(cx.tape.linear(h, w, Some(b))?)
    }
}
