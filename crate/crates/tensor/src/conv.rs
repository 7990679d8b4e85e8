//! Convolution kernels.
//!
//! Every kernel works on a single sample; the tape fans samples out over the
//! batch. Two interchangeable paths exist: a nested-loop reference and an
//! im2col + GEMM fast path. Transposed convolution is expressed through the
//! same three kernels (its forward is the data-gradient of a convolution).

use crate::element::Element;
use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvAlgorithm {
    /// Nested loops; slow, used as the correctness reference.
    Direct,
    #[default]
    Im2col,
}

/// Geometry of a plain convolution `[c_in, h, w] -> [c_out, oh, ow]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Geometry for `conv2d` given input `[.., c_in, h, w]` and weight
    /// `[c_out, c_in, kh, kw]`.
    pub fn forward(
        op: &'static str,
        c_in: usize,
        h: usize,
        w: usize,
        weight: [usize; 4],
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        let [c_out, wc_in, kh, kw] = weight;
        if wc_in != c_in {
            return Err(shape_err(
                op,
                format!("input has {c_in} channels but weight expects {wc_in}"),
            ));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(shape_err(op, "stride must be at least 1"));
        }
        let (ph, pw) = padding;
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(shape_err(
                op,
                format!("kernel {kh}x{kw} does not fit padded input {h}x{w} (pad {ph},{pw})"),
            ));
        }
        let oh = (h + 2 * ph - kh) / stride.0 + 1;
        let ow = (w + 2 * pw - kw) / stride.1 + 1;
        Ok(ConvGeom {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph,
            pw,
            oh,
            ow,
        })
    }

    /// Geometry of the convolution whose data-gradient is the transposed
    /// convolution of input `[.., c_in_t, h, w]` with weight
    /// `[c_in_t, c_out_t, kh, kw]`.
    pub fn transposed(
        op: &'static str,
        c_in_t: usize,
        h: usize,
        w: usize,
        weight: [usize; 4],
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        let [wc_in, c_out_t, kh, kw] = weight;
        if wc_in != c_in_t {
            return Err(shape_err(
                op,
                format!("input has {c_in_t} channels but weight expects {wc_in}"),
            ));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(shape_err(op, "stride must be at least 1"));
        }
        let full_h = (h - 1) * stride.0 + kh;
        let full_w = (w - 1) * stride.1 + kw;
        if full_h <= 2 * padding.0 || full_w <= 2 * padding.1 {
            return Err(shape_err(op, "padding removes the whole output"));
        }
        let out_h = full_h - 2 * padding.0;
        let out_w = full_w - 2 * padding.1;
        Ok(ConvGeom {
            c_in: c_out_t,
            h: out_h,
            w: out_w,
            c_out: c_in_t,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
            oh: h,
            ow: w,
        })
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.oh * self.ow
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.patch_len()
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }

    /// Input coordinate touched by output `(o, k)` along one axis, if inside.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, size: usize) -> Option<usize> {
        let pos = (o * stride + k) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < size).then_some(pos as usize)
    }
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oi in 0..g.oh {
                    let line = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                    match ConvGeom::src(oi, ki, g.sh, g.ph, g.h) {
                        None => line.fill(T::zero()),
                        Some(ii) => {
                            let src = &plane[ii * g.w..(ii + 1) * g.w];
                            for (oj, v) in line.iter_mut().enumerate() {
                                *v = match ConvGeom::src(oj, kj, g.sw, g.pw, g.w) {
                                    Some(jj) => src[jj],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..g.oh {
                    let Some(ii) = ConvGeom::src(oi, ki, g.sh, g.ph, g.h) else {
                        continue;
                    };
                    let dst = &mut plane[ii * g.w..(ii + 1) * g.w];
                    for oj in 0..g.ow {
                        if let Some(jj) = ConvGeom::src(oj, kj, g.sw, g.pw, g.w) {
                            dst[jj] = dst[jj] + src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

/// `out = w ⋆ x` for one sample. `out` is overwritten.
pub fn forward_sample<T: Element>(
    x: &[T],
    w: &[T],
    g: &ConvGeom,
    out: &mut [T],
    algo: ConvAlgorithm,
) {
    match algo {
        ConvAlgorithm::Direct => direct_forward(x, w, g, out),
        ConvAlgorithm::Im2col => {
            let (k, p) = (g.patch_len(), g.out_pixels());
            if g.is_pointwise() {
                T::gemm(g.c_out, k, p, w, false, x, false, out, false);
            } else {
                let mut cols = vec![T::zero(); k * p];
                im2col(x, g, &mut cols);
                T::gemm(g.c_out, k, p, w, false, &cols, false, out, false);
            }
        }
    }
}

/// Accumulates the input gradient `dx += wᵀ ⋆ dy` for one sample.
pub fn backward_data_sample<T: Element>(
    dy: &[T],
    w: &[T],
    g: &ConvGeom,
    dx: &mut [T],
    algo: ConvAlgorithm,
) {
    match algo {
        ConvAlgorithm::Direct => direct_backward_data(dy, w, g, dx),
        ConvAlgorithm::Im2col => {
            let (k, p) = (g.patch_len(), g.out_pixels());
            if g.is_pointwise() {
                T::gemm(k, g.c_out, p, w, true, dy, false, dx, true);
            } else {
                let mut cols = vec![T::zero(); k * p];
                T::gemm(k, g.c_out, p, w, true, dy, false, &mut cols, false);
                col2im(&cols, g, dx);
            }
        }
    }
}

/// Accumulates the weight gradient `dw += dy · patches(x)ᵀ` for one sample.
pub fn backward_weight_sample<T: Element>(
    x: &[T],
    dy: &[T],
    g: &ConvGeom,
    dw: &mut [T],
    algo: ConvAlgorithm,
) {
    match algo {
        ConvAlgorithm::Direct => direct_backward_weight(x, dy, g, dw),
        ConvAlgorithm::Im2col => {
            let (k, p) = (g.patch_len(), g.out_pixels());
            if g.is_pointwise() {
                T::gemm(g.c_out, p, k, dy, false, x, true, dw, true);
            } else {
                let mut cols = vec![T::zero(); k * p];
                im2col(x, g, &mut cols);
                T::gemm(g.c_out, p, k, dy, false, &cols, true, dw, true);
            }
        }
    }
}

fn direct_forward<T: Element>(x: &[T], w: &[T], g: &ConvGeom, out: &mut [T]) {
    for co in 0..g.c_out {
        for oi in 0..g.oh {
            for oj in 0..g.ow {
                let mut acc = T::zero();
                for ci in 0..g.c_in {
                    for ki in 0..g.kh {
                        let Some(ii) = ConvGeom::src(oi, ki, g.sh, g.ph, g.h) else {
                            continue;
                        };
                        for kj in 0..g.kw {
                            let Some(jj) = ConvGeom::src(oj, kj, g.sw, g.pw, g.w) else {
                                continue;
                            };
                            let wv = w[((co * g.c_in + ci) * g.kh + ki) * g.kw + kj];
                            acc = acc + wv * x[(ci * g.h + ii) * g.w + jj];
                        }
                    }
                }
                out[(co * g.oh + oi) * g.ow + oj] = acc;
            }
        }
    }
}

fn direct_backward_data<T: Element>(dy: &[T], w: &[T], g: &ConvGeom, dx: &mut [T]) {
    for co in 0..g.c_out {
        for oi in 0..g.oh {
            for oj in 0..g.ow {
                let d = dy[(co * g.oh + oi) * g.ow + oj];
                for ci in 0..g.c_in {
                    for ki in 0..g.kh {
                        let Some(ii) = ConvGeom::src(oi, ki, g.sh, g.ph, g.h) else {
                            continue;
                        };
                        for kj in 0..g.kw {
                            let Some(jj) = ConvGeom::src(oj, kj, g.sw, g.pw, g.w) else {
                                continue;
                            };
                            let wv = w[((co * g.c_in + ci) * g.kh + ki) * g.kw + kj];
                            let idx = (ci * g.h + ii) * g.w + jj;
                            dx[idx] = dx[idx] + wv * d;
                        }
                    }
                }
            }
        }
    }
}

fn direct_backward_weight<T: Element>(x: &[T], dy: &[T], g: &ConvGeom, dw: &mut [T]) {
    for co in 0..g.c_out {
        for oi in 0..g.oh {
            for oj in 0..g.ow {
                let d = dy[(co * g.oh + oi) * g.ow + oj];
                for ci in 0..g.c_in {
                    for ki in 0..g.kh {
                        let Some(ii) = ConvGeom::src(oi, ki, g.sh, g.ph, g.h) else {
                            continue;
                        };
                        for kj in 0..g.kw {
                            let Some(jj) = ConvGeom::src(oj, kj, g.sw, g.pw, g.w) else {
                                continue;
                            };
                            let idx = ((co * g.c_in + ci) * g.kh + ki) * g.kw + kj;
                            dw[idx] = dw[idx] + d * x[(ci * g.h + ii) * g.w + jj];
                        }
                    }
                }
            }
        }
    }
}
