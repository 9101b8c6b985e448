//! Plain (non-recording) kernels shared by the graph ops.

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self) -> (usize, usize) {
        let ho = (self.h + 2 * self.pad - self.kernel) / self.stride + 1;
        let wo = (self.w + 2 * self.pad - self.kernel) / self.stride + 1;
        (ho, wo)
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride + kx − pad` lies
/// inside `0..w`.
fn valid_range(g: &ConvGeom, wo: usize, kx: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride).min(wo);
    let hi = if g.w + g.pad > kx { ((g.w + g.pad - kx - 1) / g.stride + 1).min(wo) } else { 0 };
    (lo, hi.max(lo))
}

/// Unfolds one `C×H×W` image into a `(C·k·k) × (Ho·Wo)` column matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = g.out_size();
    let hw = ho * wo;
    let k = g.kernel;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let (lo, hi) = valid_range(g, wo, kx);
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        drow[lo..hi].copy_from_slice(&src[first..first + (hi - lo)]);
                    } else {
                        for (i, d) in drow[lo..hi].iter_mut().enumerate() {
                            *d = src[first + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let (ho, wo) = g.out_size();
    let hw = ho * wo;
    let k = g.kernel;
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let (lo, hi) = valid_range(g, wo, kx);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * wo + lo..oy * wo + hi];
                    for (i, &v) in srow.iter().enumerate() {
                        let d = &mut drow[first + i * g.stride];
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

/// Direct 2D convolution of an NCHW batch with `weight: [Co, Ci, k, k]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, ci, h, w) = x.dims4();
    let (co, wci, kh, kw) = weight.dims4();
    assert_eq!(ci, wci, "conv input channels {ci} != weight channels {wci}");
    assert_eq!(kh, kw, "square kernels only");
    assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "input smaller than kernel");
    let geom = ConvGeom { c_in: ci, h, w, kernel: kh, stride, pad };
    let (ho, wo) = geom.out_size();
    let hw = ho * wo;
    let kk = geom.patch_len();
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    let mut cols = vec![T::zero(); kk * hw];
    let wdata = weight.data();
    for b in 0..n {
        im2col(x.item(b), &geom, &mut cols);
        let dst = &mut out.data_mut()[b * co * hw..(b + 1) * co * hw];
        T::gemm(co, kk, hw, wdata, kk as isize, 1, &cols, hw as isize, 1, T::zero(), dst, hw as isize, 1);
        if let Some(bias) = bias {
            for (c, plane) in dst.chunks_mut(hw).enumerate() {
                let bv = bias[c];
                for v in plane {
                    *v = *v + bv;
                }
            }
        }
    }
    out
}

pub fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        for y in 0..2 * h {
            for xo in 0..2 * w {
                dst[(p * 2 * h + y) * 2 * w + xo] = src[(p * h + y / 2) * w + xo / 2];
            }
        }
    }
    out
}

pub fn avgpool2x<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    assert!(h % 2 == 0 && w % 2 == 0, "avgpool2x needs even spatial size");
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::cst(0.25);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        for y in 0..ho {
            for xo in 0..wo {
                let base = (p * h + 2 * y) * w + 2 * xo;
                dst[(p * ho + y) * wo + xo] =
                    (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]) * quarter;
            }
        }
    }
    out
}
