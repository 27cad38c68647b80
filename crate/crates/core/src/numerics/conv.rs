//! 2-D cross-correlation over HWC feature maps, lowered to GEMM via im2col.
//!
//! Kernels are stored `[out, kh, kw, in]` so an im2col row is a contiguous
//! copy of input pixels.

use crate::error::{shape_err, Result};
use crate::scalar::{matmul_acc, Scalar};
use crate::tensor::{FeatureMap, Level, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const POINTWISE: ConvGeometry = ConvGeometry { kernel: 1, stride: 1, padding: 0 };
    pub const SAME3: ConvGeometry = ConvGeometry { kernel: 3, stride: 1, padding: 1 };
    pub const DOWN3: ConvGeometry = ConvGeometry { kernel: 3, stride: 2, padding: 1 };

    pub fn output_extent(&self, n: usize) -> usize {
        (n + 2 * self.padding - self.kernel) / self.stride + 1
    }
}

pub struct ConvGrads<T> {
    pub input: FeatureMap<T>,
    pub kernel: Tensor<T>,
    pub bias: Vec<T>,
}

fn check_kernel<T: Scalar>(map: &FeatureMap<T>, kernel: &Tensor<T>) -> Result<ConvGeometry> {
    let s = kernel.shape();
    if s.len() != 4 || s[1] != s[2] {
        return shape_err(format!("conv kernel must be [out, k, k, in], got {s:?}"));
    }
    if s[1] != 1 && s[1] != 3 {
        return shape_err(format!("conv kernel size must be 1 or 3, got {}", s[1]));
    }
    if s[3] != map.channels {
        return shape_err(format!("conv kernel expects {} input channels, map has {}", s[3], map.channels));
    }
    Ok(ConvGeometry { kernel: s[1], stride: 1, padding: 0 })
}

fn is_identity_layout(g: &ConvGeometry) -> bool {
    g.kernel == 1 && g.stride == 1 && g.padding == 0
}

fn im2col<T: Scalar>(map: &FeatureMap<T>, g: &ConvGeometry, oh: usize, ow: usize) -> Vec<T> {
    let c = map.channels;
    let k = g.kernel;
    let row_len = k * k * c;
    let mut cols = vec![T::zero(); oh * ow * row_len];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * row_len..(oy * ow + ox + 1) * row_len];
            for ky in 0..k {
                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                if iy < 0 || iy >= map.height as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                    if ix < 0 || ix >= map.width as isize {
                        continue;
                    }
                    let dst = (ky * k + kx) * c;
                    row[dst..dst + c].copy_from_slice(map.pixel(iy as usize, ix as usize));
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, oh: usize, ow: usize, out: &mut FeatureMap<T>) {
    let c = out.channels;
    let k = g.kernel;
    let row_len = k * k * c;
    let (h, w) = (out.height, out.width);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols[(oy * ow + ox) * row_len..(oy * ow + ox + 1) * row_len];
            for ky in 0..k {
                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (ky * k + kx) * c;
                    let o = (iy as usize * w + ix as usize) * c;
                    for (d, &s) in out.data[o..o + c].iter_mut().zip(&row[src..src + c]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding. The output level is the input level
/// times the stride.
pub fn conv2d<T: Scalar>(
    map: &FeatureMap<T>,
    kernel: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    padding: usize,
) -> Result<FeatureMap<T>> {
    let mut g = check_kernel(map, kernel)?;
    g.stride = stride.max(1);
    g.padding = padding;
    if map.height + 2 * padding < g.kernel || map.width + 2 * padding < g.kernel {
        return shape_err("conv input smaller than kernel");
    }
    let co = kernel.shape()[0];
    if let Some(b) = bias {
        if b.len() != co {
            return shape_err(format!("conv bias has {} entries for {co} outputs", b.len()));
        }
    }
    let (oh, ow) = (g.output_extent(map.height), g.output_extent(map.width));
    let kk = g.kernel * g.kernel * map.channels;
    let mut out = vec![T::zero(); oh * ow * co];
    if let Some(b) = bias {
        for px in out.chunks_mut(co) {
            px.copy_from_slice(b);
        }
    }
    if is_identity_layout(&g) {
        matmul_acc(oh * ow, kk, co, &map.data, false, kernel.data(), true, &mut out);
    } else {
        let cols = im2col(map, &g, oh, ow);
        matmul_acc(oh * ow, kk, co, &cols, false, kernel.data(), true, &mut out);
    }
    FeatureMap::from_vec(oh, ow, co, Level(map.level.0 * g.stride as u32), out)
}

/// Adjoint of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward<T: Scalar>(
    map: &FeatureMap<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
    grad_out: &FeatureMap<T>,
) -> Result<ConvGrads<T>> {
    let mut g = check_kernel(map, kernel)?;
    g.stride = stride.max(1);
    g.padding = padding;
    let co = kernel.shape()[0];
    let (oh, ow) = (g.output_extent(map.height), g.output_extent(map.width));
    if grad_out.height != oh || grad_out.width != ow || grad_out.channels != co {
        return shape_err("conv upstream gradient has the wrong shape");
    }
    let kk = g.kernel * g.kernel * map.channels;
    let mut bias = vec![T::zero(); co];
    for px in grad_out.data.chunks(co) {
        for (b, &v) in bias.iter_mut().zip(px) {
            *b += v;
        }
    }
    let mut dk = Tensor::zeros(kernel.shape());
    let mut input = map.zeros_like();
    if is_identity_layout(&g) {
        matmul_acc(co, oh * ow, kk, &grad_out.data, true, &map.data, false, dk.data_mut());
        matmul_acc(oh * ow, co, kk, &grad_out.data, false, kernel.data(), false, &mut input.data);
    } else {
        let cols = im2col(map, &g, oh, ow);
        matmul_acc(co, oh * ow, kk, &grad_out.data, true, &cols, false, dk.data_mut());
        let mut dcols = vec![T::zero(); oh * ow * kk];
        matmul_acc(oh * ow, co, kk, &grad_out.data, false, kernel.data(), false, &mut dcols);
        col2im(&dcols, &g, oh, ow, &mut input);
    }
    Ok(ConvGrads { input, kernel: dk, bias })
}
