//! Parameterised building blocks shared by the three subnetworks.

use phr_tensor::{BatchNormConfig, BufferId, Element, InitSpec, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{CoreError, Result};

/// Parameter store access for one forward pass. Batch-norm layers may only
/// run in training mode through mutable access.
pub enum StoreAccess<'a, T> {
    Mut(&'a mut ParamStore<T>),
    Shared(&'a ParamStore<T>),
}

pub struct Ctx<'a, T: Element> {
    pub tape: &'a mut Tape<T>,
    pub store: StoreAccess<'a, T>,
    pub bn: BatchNormConfig,
}

impl<'a, T: Element> Ctx<'a, T> {
    pub fn training(tape: &'a mut Tape<T>, store: &'a mut ParamStore<T>) -> Self {
        Ctx {
            tape,
            store: StoreAccess::Mut(store),
            bn: BatchNormConfig::default(),
        }
    }

    pub fn inference(tape: &'a mut Tape<T>, store: &'a ParamStore<T>) -> Self {
        Ctx {
            tape,
            store: StoreAccess::Shared(store),
            bn: BatchNormConfig::default(),
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        match &self.store {
            StoreAccess::Mut(s) => s,
            StoreAccess::Shared(s) => s,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let store = match &self.store {
            StoreAccess::Mut(s) => &**s,
            StoreAccess::Shared(s) => *s,
        };
        Ok(self.tape.param(store, id)?)
    }
}

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a, T, R: ?Sized> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    prefix: Vec<String>,
}

impl<'a, T: Element, R: Rng + ?Sized> Builder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        Builder {
            store,
            rng,
            prefix: Vec::new(),
        }
    }

    pub fn scoped<X>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> Result<X>) -> Result<X> {
        self.prefix.push(name.into());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn path(&self, leaf: &str) -> String {
        let mut s = self.prefix.join(".");
        s.push('.');
        s.push_str(leaf);
        s
    }

    pub fn param(&mut self, leaf: &str, shape: &[usize], init: InitSpec) -> Result<ParamId> {
        let name = self.path(leaf);
        Ok(self.store.add(name, shape, init, self.rng)?)
    }

    pub fn buffer(&mut self, leaf: &str, value: Tensor<T>) -> Result<BufferId> {
        let name = self.path(leaf);
        Ok(self.store.add_buffer(name, value)?)
    }
}

/// He-style fan-in standard deviation.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Element, R: Rng + ?Sized>(
        b: &mut Builder<T, R>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        Self::build_with(b, name, cin, cout, k, stride, pad, bias, InitSpec::Gaussian(he_std(cin * k * k)))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn build_with<T: Element, R: Rng + ?Sized>(
        b: &mut Builder<T, R>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: InitSpec,
    ) -> Result<Self> {
        b.scoped(name, |b| {
            let w = b.param("weight", &[cout, cin, k, k], init)?;
            let bias = if bias {
                Some(b.param("bias", &[cout], InitSpec::Zeros)?)
            } else {
                None
            };
            Ok(Conv {
                w,
                b: bias,
                stride,
                pad,
                cin,
                cout,
                k,
            })
        })
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = cx.param(self.w)?;
        let b = self.b.map(|b| cx.param(b)).transpose()?;
        Ok(cx
            .tape
            .conv2d(x, w, b, (self.stride, self.stride), (self.pad, self.pad))?)
    }
}

/// Learnable upsampling by an integer factor, bilinear-initialised.
#[derive(Debug, Clone)]
pub struct Deconv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub factor: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Deconv {
    pub fn build<T: Element, R: Rng + ?Sized>(
        b: &mut Builder<T, R>,
        name: &str,
        cin: usize,
        cout: usize,
        factor: usize,
        bias: bool,
    ) -> Result<Self> {
        if factor < 2 || factor % 2 != 0 {
            return Err(CoreError::Config(format!("upsampling factor {factor} must be even")));
        }
        let k = 2 * factor;
        b.scoped(name, |b| {
            let w = b.param("weight", &[cin, cout, k, k], InitSpec::BilinearUpsample)?;
            let bias = if bias {
                Some(b.param("bias", &[cout], InitSpec::Zeros)?)
            } else {
                None
            };
            Ok(Deconv {
                w,
                b: bias,
                factor,
                cin,
                cout,
            })
        })
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = cx.param(self.w)?;
        let b = self.b.map(|b| cx.param(b)).transpose()?;
        let (s, p) = (self.factor, self.factor / 2);
        Ok(cx.tape.conv_transpose2d(x, w, b, (s, s), (p, p))?)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: BufferId,
    pub var: BufferId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn build<T: Element, R: Rng + ?Sized>(b: &mut Builder<T, R>, name: &str, c: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(BatchNorm {
                gamma: b.param("gamma", &[c], InitSpec::Identity)?,
                beta: b.param("beta", &[c], InitSpec::Zeros)?,
                mean: b.buffer("running_mean", Tensor::zeros(&[c]))?,
                var: b.buffer("running_var", Tensor::full(&[c], T::one()))?,
                channels: c,
            })
        })
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var, training: bool) -> Result<Var> {
        let g = cx.param(self.gamma)?;
        let beta = cx.param(self.beta)?;
        let bn = cx.bn;
        match &mut cx.store {
            StoreAccess::Mut(store) => {
                let (m, v) = store.buffer_pair_mut(self.mean, self.var);
                Ok(cx
                    .tape
                    .batch_norm2d(x, g, beta, m.data_mut(), v.data_mut(), bn, training)?)
            }
            StoreAccess::Shared(store) => {
                if training {
                    return Err(CoreError::Model(
                        "training-mode batch norm needs mutable parameters".into(),
                    ));
                }
                let mut m = store.buffer(self.mean).data().to_vec();
                let mut v = store.buffer(self.var).data().to_vec();
                Ok(cx.tape.batch_norm2d(x, g, beta, &mut m, &mut v, bn, false)?)
            }
        }
    }
}

/// BN → ReLU.
pub fn bn_relu<T: Element>(cx: &mut Ctx<T>, bn: &BatchNorm, x: Var, training: bool) -> Result<Var> {
    let y = bn.forward(cx, x, training)?;
    Ok(cx.tape.relu(y)?)
}

/// Pre-activation bottleneck: (BN-ReLU-conv1×1) → (BN-ReLU-conv3×3, stride)
/// → (BN-ReLU-conv1×1), plus an identity or projected skip path.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub bn1: BatchNorm,
    pub conv1: Conv,
    pub bn2: BatchNorm,
    pub conv2: Conv,
    pub bn3: BatchNorm,
    pub conv3: Conv,
    pub proj: Option<Conv>,
    pub width: usize,
    pub out: usize,
    pub stride: usize,
}

impl Bottleneck {
    pub fn build<T: Element, R: Rng + ?Sized>(
        b: &mut Builder<T, R>,
        name: &str,
        cin: usize,
        width: usize,
        out: usize,
        stride: usize,
    ) -> Result<Self> {
        b.scoped(name, |b| {
            let proj = if cin != out || stride != 1 {
                Some(Conv::build(b, "proj", cin, out, 1, stride, 0, false)?)
            } else {
                None
            };
            Ok(Bottleneck {
                bn1: BatchNorm::build(b, "bn1", cin)?,
                conv1: Conv::build(b, "conv1", cin, width, 1, 1, 0, false)?,
                bn2: BatchNorm::build(b, "bn2", width)?,
                conv2: Conv::build(b, "conv2", width, width, 3, stride, 1, false)?,
                bn3: BatchNorm::build(b, "bn3", width)?,
                conv3: Conv::build(b, "conv3", width, out, 1, 1, 0, false)?,
                proj,
                width,
                out,
                stride,
            })
        })
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var, training: bool) -> Result<Var> {
        let pre = bn_relu(cx, &self.bn1, x, training)?;
        let skip = match &self.proj {
            Some(p) => p.forward(cx, pre)?,
            None => x,
        };
        let h = self.conv1.forward(cx, pre)?;
        let h = bn_relu(cx, &self.bn2, h, training)?;
        let h = self.conv2.forward(cx, h)?;
        let h = bn_relu(cx, &self.bn3, h, training)?;
        let h = self.conv3.forward(cx, h)?;
        Ok(cx.tape.add(h, skip)?)
    }
}

/// A run of bottlenecks; only the first may change stride or width.
#[derive(Debug, Clone)]
pub struct Stage {
    pub blocks: Vec<Bottleneck>,
}

impl Stage {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Element, R: Rng + ?Sized>(
        b: &mut Builder<T, R>,
        name: &str,
        cin: usize,
        count: usize,
        width: usize,
        out: usize,
        stride: usize,
    ) -> Result<Self> {
        b.scoped(name, |b| {
            let blocks = (0..count)
                .map(|i| {
                    let (c, s) = if i == 0 { (cin, stride) } else { (out, 1) };
                    Bottleneck::build(b, &format!("block{i}"), c, width, out, s)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Stage { blocks })
        })
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, mut x: Var, training: bool) -> Result<Var> {
        for blk in &self.blocks {
            x = blk.forward(cx, x, training)?;
        }
        Ok(x)
    }
}
