//! Average-pool downsampling and bilinear (half-pixel) upsampling.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, Level};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    /// Mean over `f x f` blocks.
    Down(usize),
    /// Bilinear interpolation by an integer factor, edge-clamped.
    Up(usize),
}

impl Resample {
    pub const DOWN2: Resample = Resample::Down(2);
    pub const DOWN4: Resample = Resample::Down(4);
    pub const UP2: Resample = Resample::Up(2);
    pub const UP4: Resample = Resample::Up(4);

    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        match *self {
            Resample::Down(f) => (h / f, w / f),
            Resample::Up(f) => (h * f, w * f),
        }
    }
}

/// Per-output-index source taps `(i0, i1, w1)` for bilinear upsampling.
fn taps(n_in: usize, f: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * f)
        .map(|o| {
            let s = ((o as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub fn resample<T: Scalar>(map: &FeatureMap<T>, mode: Resample) -> Result<FeatureMap<T>> {
    let c = map.channels;
    match mode {
        Resample::Down(f) => {
            if f == 0 || !map.height.is_multiple_of(f) || !map.width.is_multiple_of(f) {
                return shape_err(format!("{}x{} not divisible by {f}", map.height, map.width));
            }
            let (oh, ow) = (map.height / f, map.width / f);
            let mut out = FeatureMap::zeros(oh, ow, c, Level(map.level.0 * f as u32));
            let inv = T::lit(1.0 / (f * f) as f64);
            for y in 0..map.height {
                for x in 0..map.width {
                    let o = ((y / f) * ow + x / f) * c;
                    for (d, &s) in out.data[o..o + c].iter_mut().zip(map.pixel(y, x)) {
                        *d += s * inv;
                    }
                }
            }
            Ok(out)
        }
        Resample::Up(f) => {
            if f == 0 || map.height == 0 || map.width == 0 {
                return shape_err("cannot upsample an empty map");
            }
            let (oh, ow) = (map.height * f, map.width * f);
            let ty = taps(map.height, f);
            let tx = taps(map.width, f);
            let level = Level((map.level.0 / f as u32).max(1));
            let mut out = FeatureMap::zeros(oh, ow, c, level);
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                let wy = T::lit(wy);
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let wx = T::lit(wx);
                    let w00 = (T::one() - wy) * (T::one() - wx);
                    let w01 = (T::one() - wy) * wx;
                    let w10 = wy * (T::one() - wx);
                    let w11 = wy * wx;
                    let (p00, p01, p10, p11) =
                        (map.pixel(y0, x0), map.pixel(y0, x1), map.pixel(y1, x0), map.pixel(y1, x1));
                    let o = (oy * ow + ox) * c;
                    for ch in 0..c {
                        out.data[o + ch] = w00 * p00[ch] + w01 * p01[ch] + w10 * p10[ch] + w11 * p11[ch];
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Adjoint of [`resample`]; `in_dims` are the forward input extents.
pub fn resample_backward<T: Scalar>(
    grad_out: &FeatureMap<T>,
    mode: Resample,
    in_dims: (usize, usize),
    in_level: Level,
) -> Result<FeatureMap<T>> {
    let (h, w) = in_dims;
    let c = grad_out.channels;
    if mode.output_dims(h, w) != (grad_out.height, grad_out.width) {
        return shape_err("resample gradient has the wrong shape");
    }
    let mut gin = FeatureMap::zeros(h, w, c, in_level);
    match mode {
        Resample::Down(f) => {
            let inv = T::lit(1.0 / (f * f) as f64);
            let ow = grad_out.width;
            for y in 0..h {
                for x in 0..w {
                    let o = ((y / f) * ow + x / f) * c;
                    let dst = (y * w + x) * c;
                    for ch in 0..c {
                        gin.data[dst + ch] = grad_out.data[o + ch] * inv;
                    }
                }
            }
        }
        Resample::Up(f) => {
            let ty = taps(h, f);
            let tx = taps(w, f);
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                let wy = T::lit(wy);
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let wx = T::lit(wx);
                    let g = grad_out.pixel(oy, ox);
                    let taps4 = [
                        ((y0, x0), (T::one() - wy) * (T::one() - wx)),
                        ((y0, x1), (T::one() - wy) * wx),
                        ((y1, x0), wy * (T::one() - wx)),
                        ((y1, x1), wy * wx),
                    ];
                    for ((yy, xx), wt) in taps4 {
                        let dst = (yy * w + xx) * c;
                        for ch in 0..c {
                            gin.data[dst + ch] += wt * g[ch];
                        }
                    }
                }
            }
        }
    }
    Ok(gin)
}
