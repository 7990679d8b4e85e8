use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// How a parameter is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitSpec {
    /// Zero-mean normal with the given standard deviation (> 0).
    Gaussian(f64),
    Zeros,
    /// Bilinear upsampling filters for a transposed-convolution weight
    /// `[c_in, c_out, k, k]`, placed on the channel "diagonal".
    BilinearUpsample,
    /// Multiplicative identity: ones for vectors, a centred delta on the
    /// channel diagonal for convolution kernels, eye for matrices.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub init: InitSpec,
    pub frozen: bool,
    /// Set when a backward pass has written into `grad` since the last
    /// `zero_grad`.
    pub has_grad: bool,
}

/// Non-trainable state such as batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Named collection of all trainable parameters and buffers of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
    names: HashMap<String, Slot>,
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Param(usize),
    Buffer(usize),
}

/// 1-D bilinear interpolation weights for an upsampling kernel of size `k`.
pub fn bilinear_kernel_1d(k: usize) -> Vec<f64> {
    let factor = k.div_ceil(2) as f64;
    let center = if k % 2 == 1 {
        factor - 1.0
    } else {
        factor - 0.5
    };
    (0..k)
        .map(|i| 1.0 - (i as f64 - center).abs() / factor)
        .collect()
}

fn init_tensor<T: Element, R: Rng + ?Sized>(
    shape: &[usize],
    init: InitSpec,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros(shape);
    match init {
        InitSpec::Zeros => {}
        InitSpec::Gaussian(std) => {
            if !(std > 0.0 && std.is_finite()) {
                return Err(TensorError::Invalid {
                    op: "init",
                    detail: format!("gaussian std must be positive, got {std}"),
                });
            }
            let normal = Normal::new(0.0, std).expect("valid std");
            for v in t.data_mut() {
                *v = T::of(normal.sample(rng));
            }
        }
        InitSpec::BilinearUpsample => {
            let &[c_in, c_out, kh, kw] = shape else {
                return Err(TensorError::Invalid {
                    op: "init",
                    detail: format!("bilinear init needs a rank-4 weight, got {shape:?}"),
                });
            };
            let fh = bilinear_kernel_1d(kh);
            let fw = bilinear_kernel_1d(kw);
            let data = t.data_mut();
            for ci in 0..c_in {
                for co in 0..c_out {
                    if ci % c_out != co % c_in {
                        continue;
                    }
                    for i in 0..kh {
                        for j in 0..kw {
                            data[((ci * c_out + co) * kh + i) * kw + j] = T::of(fh[i] * fw[j]);
                        }
                    }
                }
            }
        }
        InitSpec::Identity => match *shape {
            [_] => t.data_mut().fill(T::one()),
            [o, f] => {
                for i in 0..o.min(f) {
                    t.data_mut()[i * f + i] = T::one();
                }
            }
            [c_out, c_in, kh, kw] => {
                let (ci_, cj) = (kh / 2, kw / 2);
                for c in 0..c_out.min(c_in) {
                    t.data_mut()[((c * c_in + c) * kh + ci_) * kw + cj] = T::one();
                }
            }
            _ => {
                return Err(TensorError::Invalid {
                    op: "init",
                    detail: format!("identity init unsupported for shape {shape:?}"),
                })
            }
        },
    }
    Ok(t)
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
            names: HashMap::new(),
        }
    }

    fn claim(&mut self, name: &str, slot: Slot) -> Result<()> {
        if self.names.contains_key(name) {
            return Err(TensorError::DuplicateName(name.to_string()));
        }
        self.names.insert(name.to_string(), slot);
        Ok(())
    }

    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: InitSpec,
        rng: &mut R,
    ) -> Result<ParamId> {
        let name = name.into();
        let value = init_tensor(shape, init, rng)?;
        self.claim(&name, Slot::Param(self.params.len()))?;
        self.params.push(Parameter {
            name,
            grad: Tensor::zeros(shape),
            value,
            init,
            frozen: false,
            has_grad: false,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<BufferId> {
        let name = name.into();
        self.claim(&name, Slot::Buffer(self.buffers.len()))?;
        self.buffers.push(Buffer { name, value });
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].value
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    /// Mutable access to two distinct buffers at once.
    pub fn buffer_pair_mut(&mut self, a: BufferId, b: BufferId) -> (&mut Tensor<T>, &mut Tensor<T>) {
        assert_ne!(a.0, b.0, "buffer_pair_mut needs distinct buffers");
        if a.0 < b.0 {
            let (lo, hi) = self.buffers.split_at_mut(b.0);
            (&mut lo[a.0].value, &mut hi[0].value)
        } else {
            let (lo, hi) = self.buffers.split_at_mut(a.0);
            (&mut hi[0].value, &mut lo[b.0].value)
        }
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        match self.names.get(name) {
            Some(Slot::Param(i)) => Some(ParamId(*i)),
            _ => None,
        }
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        match self.names.get(name) {
            Some(Slot::Buffer(i)) => Some(BufferId(*i)),
            _ => None,
        }
    }

    /// Number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn num_scalars_under(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| under(&p.name, prefix))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
            p.has_grad = false;
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[T]) {
        let p = &mut self.params[id.0];
        for (g, d) in p.grad.data_mut().iter_mut().zip(grad) {
            *g = *g + *d;
        }
        p.has_grad = true;
    }

    fn set_frozen(&mut self, subnetwork: &str, frozen: bool) -> Result<usize> {
        let mut hits = 0;
        for p in self.params.iter_mut().filter(|p| under(&p.name, subnetwork)) {
            p.frozen = frozen;
            hits += 1;
        }
        if hits == 0 {
            return Err(TensorError::UnknownName(subnetwork.to_string()));
        }
        Ok(hits)
    }

    /// Exclude every parameter under the `subnetwork` path from updates.
    pub fn freeze(&mut self, subnetwork: &str) -> Result<usize> {
        self.set_frozen(subnetwork, true)
    }

    pub fn unfreeze(&mut self, subnetwork: &str) -> Result<usize> {
        self.set_frozen(subnetwork, false)
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.frozen = true;
        }
    }

    pub fn is_frozen(&self, subnetwork: &str) -> Result<bool> {
        let mut it = self.params.iter().filter(|p| under(&p.name, subnetwork)).peekable();
        if it.peek().is_none() {
            return Err(TensorError::UnknownName(subnetwork.to_string()));
        }
        Ok(it.all(|p| p.frozen))
    }

    /// Every stored tensor, parameters first, in insertion order.
    pub fn named_tensors(&self) -> Vec<(&str, &Tensor<T>)> {
        self.params
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .chain(self.buffers.iter().map(|b| (b.name.as_str(), &b.value)))
            .collect()
    }

    /// Overwrite a stored tensor (parameter or buffer) by name.
    pub fn set_tensor(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = *self
            .names
            .get(name)
            .ok_or_else(|| TensorError::UnknownName(name.to_string()))?;
        let dst = match slot {
            Slot::Param(i) => &mut self.params[i].value,
            Slot::Buffer(i) => &mut self.buffers[i].value,
        };
        if dst.shape() != value.shape() {
            return Err(TensorError::Shape {
                op: "set_tensor",
                detail: format!(
                    "`{name}` has shape {:?}, got {:?}",
                    dst.shape(),
                    value.shape()
                ),
            });
        }
        *dst = value;
        Ok(())
    }
}

fn under(name: &str, prefix: &str) -> bool {
    name == prefix
        || (name.len() > prefix.len()
            && name.starts_with(prefix)
            && name.as_bytes()[prefix.len()] == b'.')
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bilinear_kernel_values() {
        assert_eq!(bilinear_kernel_1d(4), vec![0.25, 0.75, 0.75, 0.25]);
        let k3 = bilinear_kernel_1d(3);
        assert_eq!(k3, vec![0.5, 1.0, 0.5]);
        let k8 = bilinear_kernel_1d(8);
        // Stride-4 kernel: taps four apart sum to one.
        for phase in 0..4 {
            let s: f64 = (phase..8).step_by(4).map(|i| k8[i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn names_unique_and_freeze_by_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::<f32>::new();
        s.add("det.conv.weight", &[2, 2], InitSpec::Gaussian(0.1), &mut rng).unwrap();
        s.add("detx.conv.weight", &[2], InitSpec::Zeros, &mut rng).unwrap();
        assert!(matches!(
            s.add("det.conv.weight", &[1], InitSpec::Zeros, &mut rng),
            Err(TensorError::DuplicateName(_))
        ));
        assert_eq!(s.freeze("det").unwrap(), 1);
        assert!(s.is_frozen("det").unwrap());
        assert!(!s.is_frozen("detx").unwrap());
        assert!(matches!(s.freeze("zreg"), Err(TensorError::UnknownName(_))));
        s.unfreeze("det").unwrap();
        assert!(!s.is_frozen("det").unwrap());
    }

    #[test]
    fn gaussian_std_must_be_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::<f64>::new();
        assert!(s.add("w", &[3], InitSpec::Gaussian(0.0), &mut rng).is_err());
        assert!(s.add("w", &[3], InitSpec::Gaussian(-1.0), &mut rng).is_err());
    }

    #[test]
    fn identity_init_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::<f64>::new();
        let g = s.add("g", &[3], InitSpec::Identity, &mut rng).unwrap();
        assert_eq!(s.param(g).value.data(), &[1.0, 1.0, 1.0]);
        let k = s.add("k", &[2, 2, 3, 3], InitSpec::Identity, &mut rng).unwrap();
        let d = s.param(k).value.data();
        assert_eq!(d.iter().filter(|&&v| v == 1.0).count(), 2);
        assert_eq!(d[4], 1.0);
    }
}
