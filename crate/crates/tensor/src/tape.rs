//! Wengert-list reverse-mode differentiation.
//!
//! A [`Tape`] records every op applied during one forward pass. Values are
//! immutable once recorded. [`Tape::backward`] walks the list in reverse and
//! sums gradient contributions for every node that fans out.

use rayon::prelude::*;

use crate::conv::{self, ConvAlgorithm, ConvGeom};
use crate::element::Element;
use crate::error::{shape_err, Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormConfig {
    /// Weight of the old running value: `running = m·running + (1−m)·batch`.
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            momentum: 0.9,
            eps: 1e-5,
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        g: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        g: ConvGeom,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    UpsampleNearest {
        x: Var,
        factor: usize,
    },
    GlobalAvgPool {
        x: Var,
    },
    /// Scalar reduction whose local gradient was computed during forward.
    Reduce {
        x: Var,
        local_grad: Vec<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } | Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::MaxPool2d { x, .. }
            | Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::UpsampleNearest { x, .. }
            | Op::GlobalAvgPool { x }
            | Op::Reduce { x, .. } => vec![*x],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Add { a, b } => vec![*a, *b],
            Op::Concat { parts } => parts.clone(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Linear { .. } => "linear",
            Op::Add { .. } => "add",
            Op::Concat { .. } => "concat_channels",
            Op::UpsampleNearest { .. } => "upsample_nearest",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Reduce { .. } => "loss",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records one forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    algo: ConvAlgorithm,
}

/// Gradients of a scalar with respect to every leaf that requires one.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            algo: ConvAlgorithm::Im2col,
        }
    }

    pub fn with_conv_algorithm(algo: ConvAlgorithm) -> Self {
        Tape {
            nodes: Vec::new(),
            algo,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        value.ensure_finite(op.name())?;
        let requires_grad = match op {
            Op::Leaf => false,
            Op::Param(_) => false,
            _ => op.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor<T>) -> Result<Var> {
        let v = self.push(value, Op::Leaf)?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    /// Record a model parameter; frozen parameters are recorded as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        let p = store.param(id);
        let v = self.push(p.value.clone(), Op::Param(id))?;
        self.nodes[v.0].requires_grad = !p.frozen;
        Ok(v)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        let [batch, c_in, h, wd] = self.value(x).dims4(OP)?;
        let wdims = self.value(w).dims4(OP)?;
        let g = ConvGeom::forward(OP, c_in, h, wd, wdims, stride, padding)?;
        self.check_bias(OP, b, g.c_out)?;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bias = b.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); batch * g.out_len()];
        let algo = self.algo;
        out.par_chunks_mut(g.out_len())
            .zip(xv.par_chunks(g.in_len()))
            .for_each(|(o, xs)| {
                conv::forward_sample(xs, wv, &g, o, algo);
                if let Some(bias) = bias {
                    add_channel_bias(o, bias, g.out_pixels());
                }
            });
        let value = Tensor::new(vec![batch, g.c_out, g.oh, g.ow], out)?;
        self.push(value, Op::Conv2d { x, w, b, g })
    }

    /// Transposed convolution with weight `[c_in, c_out, kh, kw]`; output
    /// size `(H−1)·s − 2p + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        const OP: &str = "conv_transpose2d";
        let [batch, c_in, h, wd] = self.value(x).dims4(OP)?;
        let wdims = self.value(w).dims4(OP)?;
        let g = ConvGeom::transposed(OP, c_in, h, wd, wdims, stride, padding)?;
        self.check_bias(OP, b, g.c_in)?;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bias = b.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); batch * g.in_len()];
        let algo = self.algo;
        out.par_chunks_mut(g.in_len())
            .zip(xv.par_chunks(g.out_len()))
            .for_each(|(o, xs)| {
                conv::backward_data_sample(xs, wv, &g, o, algo);
                if let Some(bias) = bias {
                    add_channel_bias(o, bias, g.h * g.w);
                }
            });
        let value = Tensor::new(vec![batch, g.c_in, g.h, g.w], out)?;
        self.push(value, Op::ConvTranspose2d { x, w, b, g })
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [channels] {
                return Err(shape_err(
                    op,
                    format!("bias shape {:?}, expected [{channels}]", self.shape(b)),
                ));
            }
        }
        Ok(())
    }

    pub fn maxpool2d(
        &mut self,
        x: Var,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        const OP: &str = "maxpool2d";
        let [b, c, h, w] = self.value(x).dims4(OP)?;
        let (kh, kw) = kernel;
        let (sh, sw) = stride;
        let (ph, pw) = padding;
        if sh == 0 || sw == 0 || kh == 0 || kw == 0 {
            return Err(shape_err(OP, "kernel and stride must be at least 1"));
        }
        if h + 2 * ph < kh || w + 2 * pw < kw || ph >= kh || pw >= kw {
            return Err(shape_err(
                OP,
                format!("kernel {kh}x{kw} with pad ({ph},{pw}) does not fit {h}x{w}"),
            ));
        }
        let oh = (h + 2 * ph - kh) / sh + 1;
        let ow = (w + 2 * pw - kw) / sw + 1;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = None::<(T, usize)>;
                    for ki in 0..kh {
                        let ii = (oi * sh + ki) as isize - ph as isize;
                        if ii < 0 || ii as usize >= h {
                            continue;
                        }
                        for kj in 0..kw {
                            let jj = (oj * sw + kj) as isize - pw as isize;
                            if jj < 0 || jj as usize >= w {
                                continue;
                            }
                            let idx = base + ii as usize * w + jj as usize;
                            let v = xv[idx];
                            if best.is_none_or(|(m, _)| v > m) {
                                best = Some((v, idx));
                            }
                        }
                    }
                    let (v, idx) = best.expect("window overlaps input");
                    out.push(v);
                    argmax.push(idx);
                }
            }
        }
        let value = Tensor::new(vec![b, c, oh, ow], out)?;
        self.push(value, Op::MaxPool2d { x, argmax })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&a| a.max(T::zero())).collect(),
        )?;
        self.push(out, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| sigmoid(a)).collect())?;
        self.push(out, Op::Sigmoid { x })
    }

    /// Per-channel batch normalisation over `[B, C, H, W]`.
    ///
    /// In training mode batch statistics are used and the running buffers are
    /// updated; otherwise the running statistics normalise the input.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [T],
        running_var: &mut [T],
        cfg: BatchNormConfig,
        training: bool,
    ) -> Result<Var> {
        const OP: &str = "batchnorm2d";
        let [b, c, h, w] = self.value(x).dims4(OP)?;
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(shape_err(OP, format!("{what} must have shape [{c}]")));
            }
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err(OP, format!("running statistics must have {c} entries")));
        }
        let hw = h * w;
        let count = b * hw;
        if training && count < 2 {
            return Err(TensorError::Invalid {
                op: OP,
                detail: "training-mode batch norm needs more than one value per channel".into(),
            });
        }
        let xv = self.value(x).data();
        let eps = T::of(cfg.eps);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        if training {
            let n = T::from_usize(count).unwrap();
            for ch in 0..c {
                let mut s = T::zero();
                for bi in 0..b {
                    let off = (bi * c + ch) * hw;
                    s = s + xv[off..off + hw].iter().copied().sum::<T>();
                }
                let m = s / n;
                let mut sq = T::zero();
                for bi in 0..b {
                    let off = (bi * c + ch) * hw;
                    sq = sq + xv[off..off + hw].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                }
                mean[ch] = m;
                var[ch] = sq / n;
            }
            let mom = T::of(cfg.momentum);
            let unbias = n / (n - T::one());
            for ch in 0..c {
                running_mean[ch] = mom * running_mean[ch] + (T::one() - mom) * mean[ch];
                running_var[ch] = mom * running_var[ch] + (T::one() - mom) * var[ch] * unbias;
            }
        } else {
            mean.copy_from_slice(running_mean);
            var.copy_from_slice(running_var);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    let xh = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let value = Tensor::new(vec![b, c, h, w], out)?;
        self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
        )
    }

    /// `x·wᵀ + b` for `x: [B, F]`, `w: [O, F]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let [batch, f] = self.value(x).dims2(OP)?;
        let [o, wf] = self.value(w).dims2(OP)?;
        if wf != f {
            return Err(shape_err(OP, format!("input has {f} features, weight expects {wf}")));
        }
        self.check_bias(OP, b, o)?;
        let mut out = vec![T::zero(); batch * o];
        T::gemm(batch, f, o, self.value(x).data(), false, self.value(w).data(), true, &mut out, false);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                add_into(row, bv);
            }
        }
        let value = Tensor::new(vec![batch, o], out)?;
        self.push(value, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(value, Op::Add { a, b })
    }

    /// Stack `[B, Cᵢ, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let first = *parts.first().ok_or_else(|| shape_err(OP, "no inputs"))?;
        let [b, _, h, w] = self.value(first).dims4(OP)?;
        let mut total = 0;
        for &p in parts {
            let [pb, pc, ph, pw] = self.value(p).dims4(OP)?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(shape_err(
                    OP,
                    format!("part {:?} does not match [{b}, _, {h}, {w}]", self.shape(p)),
                ));
            }
            total += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(b * total * hw);
        for bi in 0..b {
            for &p in parts {
                let pc = self.shape(p)[1];
                let d = self.value(p).data();
                out.extend_from_slice(&d[bi * pc * hw..(bi + 1) * pc * hw]);
            }
        }
        let value = Tensor::new(vec![b, total, h, w], out)?;
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        const OP: &str = "upsample_nearest";
        if factor == 0 {
            return Err(shape_err(OP, "factor must be at least 1"));
        }
        let [b, c, h, w] = self.value(x).dims4(OP)?;
        let (oh, ow) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            for i in 0..oh {
                for j in 0..ow {
                    out.push(src[(i / factor) * w + j / factor]);
                }
            }
        }
        let value = Tensor::new(vec![b, c, oh, ow], out)?;
        self.push(value, Op::UpsampleNearest { x, factor })
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4("global_avg_pool")?;
        let hw = h * w;
        let n = T::from_usize(hw).unwrap();
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() / n)
            .collect();
        let value = Tensor::new(vec![b, c], out)?;
        self.push(value, Op::GlobalAvgPool { x })
    }

    /// `Σ x·weights`, mainly useful for probing gradients.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != weights.shape() {
            return Err(shape_err("weighted_sum", "weights must match input shape"));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        self.push(
            Tensor::scalar(s),
            Op::Reduce {
                x,
                local_grad: weights.data().to_vec(),
            },
        )
    }

    /// Mean pixel-wise sigmoid cross-entropy against binary targets.
    ///
    /// `mask`, if given, holds one weight in {0, 1} per `(sample, channel)`;
    /// masked-out maps contribute nothing and are not counted.
    pub fn sigmoid_cross_entropy(
        &mut self,
        logits: Var,
        targets: &Tensor<T>,
        mask: Option<&[T]>,
    ) -> Result<Var> {
        const OP: &str = "sigmoid_cross_entropy";
        let [b, c, h, w] = self.value(logits).dims4(OP)?;
        if targets.shape() != [b, c, h, w] {
            return Err(shape_err(OP, "targets must match logits"));
        }
        if targets.data().iter().any(|&t| t != T::zero() && t != T::one()) {
            return Err(TensorError::Invalid {
                op: OP,
                detail: "targets must be 0 or 1".into(),
            });
        }
        let weights = channel_weights(OP, mask, b * c)?;
        let hw = h * w;
        let count: T = weights.iter().copied().sum::<T>() * T::from_usize(hw).unwrap();
        let xv = self.value(logits).data();
        let mut local = vec![T::zero(); xv.len()];
        let mut total = T::zero();
        if count > T::zero() {
            for (plane, &m) in weights.iter().enumerate() {
                if m == T::zero() {
                    continue;
                }
                for i in plane * hw..(plane + 1) * hw {
                    let (x, t) = (xv[i], targets.data()[i]);
                    // max(x, 0) − x·t + log(1 + e^{−|x|})
                    let l = x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p();
                    total = total + m * l;
                    local[i] = m * (sigmoid(x) - t) / count;
                }
            }
            total = total / count;
        }
        self.push(Tensor::scalar(total), Op::Reduce { x: logits, local_grad: local })
    }

    /// Mean squared difference over all (unmasked) elements of `[B, N, H, W]`.
    pub fn l2_pixelwise(&mut self, pred: Var, target: &Tensor<T>, mask: Option<&[T]>) -> Result<Var> {
        const OP: &str = "l2_pixelwise";
        let [b, c, h, w] = self.value(pred).dims4(OP)?;
        if target.shape() != [b, c, h, w] {
            return Err(shape_err(
                OP,
                format!("pred {:?} vs target {:?}", self.shape(pred), target.shape()),
            ));
        }
        let weights = channel_weights(OP, mask, b * c)?;
        let hw = h * w;
        let count: T = weights.iter().copied().sum::<T>() * T::from_usize(hw).unwrap();
        let pv = self.value(pred).data();
        let mut local = vec![T::zero(); pv.len()];
        let mut total = T::zero();
        if count > T::zero() {
            let two = T::of(2.0);
            for (plane, &m) in weights.iter().enumerate() {
                if m == T::zero() {
                    continue;
                }
                for i in plane * hw..(plane + 1) * hw {
                    let d = pv[i] - target.data()[i];
                    total = total + m * d * d;
                    local[i] = two * m * d / count;
                }
            }
            total = total / count;
        }
        self.push(Tensor::scalar(total), Op::Reduce { x: pred, local_grad: local })
    }

    /// Per-sample `(1/N)·Σ(z̃ − z)²` averaged over the batch, for `[B, N]`.
    ///
    /// With a mask, each sample averages over its valid points only and
    /// samples with no valid point are skipped.
    pub fn l2_z(&mut self, pred: Var, target: &Tensor<T>, mask: Option<&[T]>) -> Result<Var> {
        const OP: &str = "l2_z";
        let [b, n] = self.value(pred).dims2(OP)?;
        if target.shape() != [b, n] {
            return Err(shape_err(
                OP,
                format!("pred {:?} vs target {:?}", self.shape(pred), target.shape()),
            ));
        }
        let weights = channel_weights(OP, mask, b * n)?;
        let pv = self.value(pred).data();
        let per_sample: Vec<T> = weights.chunks(n).map(|r| r.iter().copied().sum()).collect();
        let valid = per_sample.iter().filter(|&&s| s > T::zero()).count();
        let mut local = vec![T::zero(); pv.len()];
        let mut total = T::zero();
        if valid > 0 {
            let nv = T::from_usize(valid).unwrap();
            let two = T::of(2.0);
            for bi in 0..b {
                let cnt = per_sample[bi];
                if cnt == T::zero() {
                    continue;
                }
                let mut s = T::zero();
                for k in bi * n..(bi + 1) * n {
                    let d = pv[k] - target.data()[k];
                    s = s + weights[k] * d * d;
                    local[k] = two * weights[k] * d / (cnt * nv);
                }
                total = total + s / cnt;
            }
            total = total / nv;
        }
        self.push(Tensor::scalar(total), Op::Reduce { x: pred, local_grad: local })
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if !g.iter().all(|v| v.is_finite()) {
                return Err(TensorError::NonFinite { op: node.op.name() });
            }
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[i] = Some(g);
                }
                op => self.backward_op(op, &node.value, g, &mut grads)?,
            }
        }
        Ok(Gradients { grads })
    }

    /// Backward pass that adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        self.accumulate_param_grads(&grads, store);
        Ok(grads)
    }

    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.accumulate_grad(*id, g);
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_op(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        let mut acc = |v: Var, contrib: Vec<T>| -> Result<()> {
            if !self.wants(v) {
                return Ok(());
            }
            if !contrib.iter().all(|x| x.is_finite()) {
                return Err(TensorError::NonFinite { op: op.name() });
            }
            match &mut grads[v.0] {
                Some(existing) => add_into(existing, &contrib),
                slot @ None => *slot = Some(contrib),
            }
            Ok(())
        };
        match op {
            Op::Leaf | Op::Param(_) => unreachable!("leaves handled by caller"),
            Op::Conv2d { x, w, b, g: geom } => {
                let (dx, dw) = self.conv_grads(*x, *w, &g, geom, false);
                if let Some(dx) = dx {
                    acc(*x, dx)?;
                }
                if let Some(dw) = dw {
                    acc(*w, dw)?;
                }
                if let Some(b) = b {
                    acc(*b, channel_sums(&g, geom.c_out, geom.out_pixels()))?;
                }
            }
            Op::ConvTranspose2d { x, w, b, g: geom } => {
                let (dx, dw) = self.conv_grads(*x, *w, &g, geom, true);
                if let Some(dx) = dx {
                    acc(*x, dx)?;
                }
                if let Some(dw) = dw {
                    acc(*w, dw)?;
                }
                if let Some(b) = b {
                    acc(*b, channel_sums(&g, geom.c_in, geom.h * geom.w))?;
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&idx, &d) in argmax.iter().zip(&g) {
                    dx[idx] = dx[idx] + d;
                }
                acc(*x, dx)?;
            }
            Op::Relu { x } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                acc(*x, dx)?;
            }
            Op::Sigmoid { x } => {
                let dx = out
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&s, &d)| d * s * (T::one() - s))
                    .collect();
                acc(*x, dx)?;
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let [b, c, h, w] = self.value(*x).dims4("batchnorm2d")?;
                let hw = h * w;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * hw;
                        for i in off..off + hw {
                            dgamma[ch] = dgamma[ch] + g[i] * xhat[i];
                            dbeta[ch] = dbeta[ch] + g[i];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    let n = T::from_usize(b * hw).unwrap();
                    for ch in 0..c {
                        let k = gv[ch] * inv_std[ch];
                        // Σ dxhat and Σ dxhat·xhat reduce to dbeta and dgamma.
                        let (mean_d, mean_dx) = (dbeta[ch] / n, dgamma[ch] / n);
                        for bi in 0..b {
                            let off = (bi * c + ch) * hw;
                            for i in off..off + hw {
                                dx[i] = if *training {
                                    k * (g[i] - mean_d - xhat[i] * mean_dx)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                    acc(*x, dx)?;
                }
                acc(*gamma, dgamma)?;
                acc(*beta, dbeta)?;
            }
            Op::Linear { x, w, b } => {
                let [batch, f] = self.value(*x).dims2("linear")?;
                let o = self.shape(*w)[0];
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); batch * f];
                    T::gemm(batch, o, f, &g, false, self.value(*w).data(), false, &mut dx, false);
                    acc(*x, dx)?;
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); o * f];
                    T::gemm(o, batch, f, &g, true, self.value(*x).data(), false, &mut dw, false);
                    acc(*w, dw)?;
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); o];
                    for row in g.chunks(o) {
                        add_into(&mut db, row);
                    }
                    acc(*b, db)?;
                }
            }
            Op::Add { a, b } => {
                acc(*a, g.clone())?;
                acc(*b, g)?;
            }
            Op::Concat { parts } => {
                let [b, total, h, w] = out.dims4("concat_channels")?;
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(b * pc * hw);
                        for bi in 0..b {
                            let start = (bi * total + offset) * hw;
                            dp.extend_from_slice(&g[start..start + pc * hw]);
                        }
                        acc(p, dp)?;
                    }
                    offset += pc;
                }
            }
            Op::UpsampleNearest { x, factor } => {
                let [b, c, h, w] = self.value(*x).dims4("upsample_nearest")?;
                let (oh, ow) = (h * factor, w * factor);
                let mut dx = vec![T::zero(); b * c * h * w];
                for plane in 0..b * c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let d = &mut dx[plane * h * w + (i / factor) * w + j / factor];
                            *d = *d + g[plane * oh * ow + i * ow + j];
                        }
                    }
                }
                acc(*x, dx)?;
            }
            Op::GlobalAvgPool { x } => {
                let [_, _, h, w] = self.value(*x).dims4("global_avg_pool")?;
                let hw = h * w;
                let n = T::from_usize(hw).unwrap();
                let dx = g.iter().flat_map(|&d| std::iter::repeat_n(d / n, hw)).collect();
                acc(*x, dx)?;
            }
            Op::Reduce { x, local_grad } => {
                let s = g[0];
                acc(*x, local_grad.iter().map(|&l| l * s).collect())?;
            }
        }
        Ok(())
    }

    /// Input and weight gradients of a (transposed) convolution, computed
    /// per sample and reduced in batch order.
    fn conv_grads(
        &self,
        x: Var,
        w: Var,
        dy: &[T],
        geom: &ConvGeom,
        transposed: bool,
    ) -> (Option<Vec<T>>, Option<Vec<T>>) {
        let want_x = self.wants(x);
        let want_w = self.wants(w);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let algo = self.algo;
        // In the transposed case the op's input plays the role of the
        // convolution's output and vice versa.
        let (x_chunk, dy_chunk) = if transposed {
            (geom.out_len(), geom.in_len())
        } else {
            (geom.in_len(), geom.out_len())
        };
        let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = xv
            .par_chunks(x_chunk)
            .zip(dy.par_chunks(dy_chunk))
            .map(|(xs, dys)| {
                let mut dx = None;
                let mut dw = None;
                if want_x {
                    let mut buf = vec![T::zero(); x_chunk];
                    if transposed {
                        conv::forward_sample(dys, wv, geom, &mut buf, algo);
                    } else {
                        conv::backward_data_sample(dys, wv, geom, &mut buf, algo);
                    }
                    dx = Some(buf);
                }
                if want_w {
                    let mut buf = vec![T::zero(); geom.weight_len()];
                    if transposed {
                        conv::backward_weight_sample(dys, xs, geom, &mut buf, algo);
                    } else {
                        conv::backward_weight_sample(xs, dys, geom, &mut buf, algo);
                    }
                    dw = Some(buf);
                }
                (dx, dw)
            })
            .collect();
        let mut dx_all = want_x.then(|| Vec::with_capacity(xv.len()));
        let mut dw_all = want_w.then(|| vec![T::zero(); geom.weight_len()]);
        for (dx, dw) in per_sample {
            if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
                all.extend_from_slice(&dx);
            }
            if let (Some(all), Some(dw)) = (dw_all.as_mut(), dw) {
                add_into(all, &dw);
            }
        }
        (dx_all, dw_all)
    }
}

fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn add_channel_bias<T: Element>(out: &mut [T], bias: &[T], pixels: usize) {
    for (plane, &bv) in out.chunks_mut(pixels).zip(bias) {
        for v in plane {
            *v = *v + bv;
        }
    }
}

/// Sum of `[B, C, P]` over batch and pixels.
fn channel_sums<T: Element>(g: &[T], c: usize, pixels: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for (i, plane) in g.chunks(pixels).enumerate() {
        out[i % c] = out[i % c] + plane.iter().copied().sum::<T>();
    }
    out
}

fn channel_weights<T: Element>(op: &'static str, mask: Option<&[T]>, len: usize) -> Result<Vec<T>> {
    match mask {
        None => Ok(vec![T::one(); len]),
        Some(m) if m.len() == len => {
            if m.iter().any(|&v| v != T::zero() && v != T::one()) {
                return Err(TensorError::Invalid {
                    op,
                    detail: "mask entries must be 0 or 1".into(),
                });
            }
            Ok(m.to_vec())
        }
        Some(m) => Err(shape_err(op, format!("mask has {} entries, expected {len}", m.len()))),
    }
}
