//! Raw forward/backward kernels on flat `N×C×H×W` buffers.
//!
//! Work is split per image; reductions across images run in index order, so
//! results do not depend on the size of the rayon pool.

use rayon::prelude::*;

use super::{gemm, MatRef, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.kw) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds one image (`cin×h×w`) into a `patch_len × positions` matrix.
fn im2col<T: Scalar>(img: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let pad = g.padding as isize;
    for c in 0..g.cin {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride) as isize + i as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride) as isize + j as isize - pad;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Folds a `patch_len × positions` matrix back onto one image, summing overlaps.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, img: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let pad = g.padding as isize;
    img.fill(T::zero());
    for c in 0..g.cin {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride) as isize + i as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * g.stride) as isize + j as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    input: &[T],
    n: usize,
    g: &ConvGeometry,
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let p = g.positions();
    let k = g.patch_len();
    let in_len = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); n * g.cout * p];
    out.par_chunks_mut(g.cout * p).enumerate().for_each(|(b, dst)| {
        for (c, row) in dst.chunks_mut(p).enumerate() {
            row.fill(bias[c]);
        }
        let img = &input[b * in_len..(b + 1) * in_len];
        let wmat = MatRef::new(weight, g.cout, k);
        if g.is_pointwise() {
            gemm(wmat, MatRef::new(img, k, p), T::one(), dst);
        } else {
            let mut cols = vec![T::zero(); k * p];
            im2col(img, g, &mut cols);
            gemm(wmat, MatRef::new(&cols, k, p), T::one(), dst);
        }
    });
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

/// Which gradients a backward call should produce.
#[derive(Clone, Copy, Debug)]
pub struct ConvWants {
    pub input: bool,
    pub weight: bool,
    pub bias: bool,
}

pub fn conv2d_backward<T: Scalar>(
    input: &[T],
    n: usize,
    g: &ConvGeometry,
    weight: &[T],
    grad_out: &[T],
    wants: ConvWants,
) -> ConvGrads<T> {
    let p = g.positions();
    let k = g.patch_len();
    let in_len = g.cin * g.h * g.w;

    let per_image: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..n)
        .into_par_iter()
        .map(|b| {
            let img = &input[b * in_len..(b + 1) * in_len];
            let gy = &grad_out[b * g.cout * p..(b + 1) * g.cout * p];
            let gy_mat = MatRef::new(gy, g.cout, p);
            let owned_cols;
            let cols: &[T] = if g.is_pointwise() {
                img
            } else if wants.weight {
                let mut buf = vec![T::zero(); k * p];
                im2col(img, g, &mut buf);
                owned_cols = buf;
                &owned_cols
            } else {
                &[]
            };
            let gw = wants.weight.then(|| {
                let mut gw = vec![T::zero(); g.cout * k];
                gemm(gy_mat, MatRef::new(cols, k, p).t(), T::zero(), &mut gw);
                gw
            });
            let gx = wants.input.then(|| {
                let wmat = MatRef::new(weight, g.cout, k).t();
                if g.is_pointwise() {
                    let mut gx = vec![T::zero(); in_len];
                    gemm(wmat, gy_mat, T::zero(), &mut gx);
                    gx
                } else {
                    let mut gcols = vec![T::zero(); k * p];
                    gemm(wmat, gy_mat, T::zero(), &mut gcols);
                    let mut gx = vec![T::zero(); in_len];
                    col2im(&gcols, g, &mut gx);
                    gx
                }
            });
            (gx, gw)
        })
        .collect();

    let mut grad_input = wants.input.then(|| Vec::with_capacity(n * in_len));
    let mut grad_weight = wants.weight.then(|| vec![T::zero(); g.cout * k]);
    for (gx, gw) in per_image {
        if let (Some(acc), Some(gx)) = (grad_input.as_mut(), gx) {
            acc.extend_from_slice(&gx);
        }
        if let (Some(acc), Some(gw)) = (grad_weight.as_mut(), gw) {
            acc.iter_mut().zip(&gw).for_each(|(a, &v)| *a += v);
        }
    }

    let grad_bias = wants.bias.then(|| {
        let mut gb = vec![T::zero(); g.cout];
        for b in 0..n {
            for (c, acc) in gb.iter_mut().enumerate() {
                let start = (b * g.cout + c) * p;
                *acc += grad_out[start..start + p].iter().copied().sum::<T>();
            }
        }
        gb
    });

    ConvGrads { input: grad_input, weight: grad_weight, bias: grad_bias }
}

/// Output extent of a pooling window sweep with implicit −∞ padding at the far edge.
pub fn pool_out_len(len: usize, k: usize, stride: usize) -> usize {
    if len <= k {
        1
    } else {
        (len - k).div_ceil(stride) + 1
    }
}

/// Max pooling over every `n×c` plane. Returns the pooled values and, per output
/// cell, the flat input index that won (first row-major maximum on ties).
pub fn maxpool_forward<T: Scalar>(
    input: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (pool_out_len(h, k, stride), pool_out_len(w, k, stride));
    let mut out = vec![T::zero(); planes * oh * ow];
    let mut arg = vec![0usize; planes * oh * ow];
    out.par_chunks_mut(oh * ow).zip(arg.par_chunks_mut(oh * ow)).enumerate().for_each(
        |(pl, (dst, idx))| {
            let base = pl * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for dy in 0..k {
                        let iy = oy * stride + dy;
                        if iy >= h {
                            break;
                        }
                        for dx in 0..k {
                            let ix = ox * stride + dx;
                            if ix >= w {
                                break;
                            }
                            let i = base + iy * w + ix;
                            if best_i == usize::MAX || input[i] > best {
                                best = input[i];
                                best_i = i;
                            }
                        }
                    }
                    dst[oy * ow + ox] = best;
                    idx[oy * ow + ox] = best_i;
                }
            }
        },
    );
    (out, arg)
}

pub fn maxpool_backward<T: Scalar>(input_len: usize, argmax: &[usize], grad_out: &[T]) -> Vec<T> {
    let mut gx = vec![T::zero(); input_len];
    for (&i, &g) in argmax.iter().zip(grad_out) {
        gx[i] += g;
    }
    gx
}

/// Source taps of one output coordinate for align-corners=false bilinear sampling.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            Tap { lo, hi, frac: src - lo as f64 }
        })
        .collect()
}

pub fn bilinear_forward<T: Scalar>(
    input: &[T],
    planes: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = vec![T::zero(); planes * out_h * out_w];
    out.par_chunks_mut(out_h * out_w).enumerate().for_each(|(pl, dst)| {
        let src = &input[pl * h * w..(pl + 1) * h * w];
        for (oy, y) in ty.iter().enumerate() {
            let fy = T::of(y.frac);
            for (ox, x) in tx.iter().enumerate() {
                let fx = T::of(x.frac);
                let top = src[y.lo * w + x.lo] * (T::one() - fx) + src[y.lo * w + x.hi] * fx;
                let bot = src[y.hi * w + x.lo] * (T::one() - fx) + src[y.hi * w + x.hi] * fx;
                dst[oy * out_w + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    });
    out
}

pub fn bilinear_backward<T: Scalar>(
    grad_out: &[T],
    planes: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut gx = vec![T::zero(); planes * h * w];
    gx.par_chunks_mut(h * w).enumerate().for_each(|(pl, dst)| {
        let g = &grad_out[pl * out_h * out_w..(pl + 1) * out_h * out_w];
        for (oy, y) in ty.iter().enumerate() {
            let fy = T::of(y.frac);
            for (ox, x) in tx.iter().enumerate() {
                let fx = T::of(x.frac);
                let v = g[oy * out_w + ox];
                dst[y.lo * w + x.lo] += v * (T::one() - fy) * (T::one() - fx);
                dst[y.lo * w + x.hi] += v * (T::one() - fy) * fx;
                dst[y.hi * w + x.lo] += v * fy * (T::one() - fx);
                dst[y.hi * w + x.hi] += v * fy * fx;
            }
        }
    });
    gx
}
