//! Sinusoidal 2-D positional encodings.
//!
//! Channel `4k` carries `sin(w_k x)`, `4k+1` `cos(w_k x)`, `4k+2` `sin(w_k y)`
//! and `4k+3` `cos(w_k y)` with `w_k = 10000^(-2k/d)`. The normalized variant
//! rescales coordinates by the ratio of training to test extents so that an
//! encoder trained at one resolution sees the same phase range at another.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositionalEncodingConfig {
    pub channels: usize,
    /// (width, height) the model was trained at.
    pub train_size: (usize, usize),
    /// (width, height) of the map being encoded.
    pub test_size: (usize, usize),
}

impl PositionalEncodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || !self.channels.is_multiple_of(4) {
            return Err(Error::Config(format!("encoding channels {} not divisible by 4", self.channels)));
        }
        let (tw, th) = self.train_size;
        let (sw, sh) = self.test_size;
        if tw == 0 || th == 0 || sw == 0 || sh == 0 {
            return Err(Error::Config("encoding extents must be >= 1".into()));
        }
        Ok(())
    }
}

fn frequency(k: usize, d: usize) -> f64 {
    1.0 / 10000f64.powf(2.0 * k as f64 / d as f64)
}

/// Value of channel `i` of the base encoding at continuous position (x, y).
pub fn encoding_channel(i: usize, d: usize, x: f64, y: f64) -> f64 {
    let w = frequency(i / 4, d);
    match i % 4 {
        0 => (w * x).sin(),
        1 => (w * x).cos(),
        2 => (w * y).sin(),
        _ => (w * y).cos(),
    }
}

fn encode<T: Scalar>(d: usize, width: usize, height: usize, sx: f64, sy: f64) -> Tensor<T> {
    let mut data = Vec::with_capacity(height * width * d);
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 * sx, y as f64 * sy);
            for i in 0..d {
                data.push(T::lit(encoding_channel(i, d, px, py)));
            }
        }
    }
    Tensor::from_vec(&[height, width, d], data).expect("extent arithmetic")
}

/// Base encoding of a `height x width` grid, shape `[height, width, d]`.
pub fn positional_encoding<T: Scalar>(d: usize, height: usize, width: usize) -> Result<Tensor<T>> {
    PositionalEncodingConfig { channels: d, train_size: (width, height), test_size: (width, height) }.validate()?;
    Ok(encode(d, width, height, 1.0, 1.0))
}

/// Resolution-normalized encoding, shape `[H_test, W_test, d]`.
pub fn normalized_positional_encoding<T: Scalar>(cfg: &PositionalEncodingConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    let (tw, th) = cfg.train_size;
    let (sw, sh) = cfg.test_size;
    if tw == sw && th == sh {
        return Ok(encode(cfg.channels, sw, sh, 1.0, 1.0));
    }
    Ok(encode(cfg.channels, sw, sh, tw as f64 / sw as f64, th as f64 / sh as f64))
}

/// Adds a `[h, w, c]` encoding to a feature map in place.
pub fn add_encoding<T: Scalar>(map: &mut FeatureMap<T>, enc: &Tensor<T>) -> Result<()> {
    if enc.shape() != [map.height, map.width, map.channels] {
        return Err(Error::Shape(format!(
            "encoding {:?} does not fit map {}x{}x{}",
            enc.shape(),
            map.height,
            map.width,
            map.channels
        )));
    }
    for (a, &b) in map.data.iter_mut().zip(enc.data()) {
        *a += b;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_extents_reproduce_base_encoding() {
        let cfg = PositionalEncodingConfig { channels: 16, train_size: (6, 5), test_size: (6, 5) };
        let npe: Tensor<f64> = normalized_positional_encoding(&cfg).unwrap();
        let pe: Tensor<f64> = positional_encoding(16, 5, 6).unwrap();
        assert_eq!(npe, pe);
    }

    #[test]
    fn channel_zero_vanishes_on_first_column() {
        let pe: Tensor<f64> = positional_encoding(8, 4, 4).unwrap();
        for y in 0..4 {
            assert_eq!(pe.data()[(y * 4) * 8], 0.0);
        }
    }

    #[test]
    fn direct_formula_at_one_one() {
        let pe: Tensor<f64> = positional_encoding(8, 4, 4).unwrap();
        let base = (4 + 1) * 8;
        // k = 0: w = 1; k = 1: w = 10000^(-1/4) = 0.1
        let w1 = 0.1f64;
        let want = [1f64.sin(), 1f64.cos(), 1f64.sin(), 1f64.cos(), w1.sin(), w1.cos(), w1.sin(), w1.cos()];
        for (i, w) in want.iter().enumerate() {
            assert!((pe.data()[base + i] - w).abs() < 1e-15, "channel {i}");
        }
    }

    #[test]
    fn rescaled_coordinates() {
        let cfg = PositionalEncodingConfig { channels: 4, train_size: (8, 8), test_size: (16, 4) };
        let npe: Tensor<f64> = normalized_positional_encoding(&cfg).unwrap();
        // x = 3 on a 16-wide test map behaves like x = 1.5; y = 1 on a 4-tall map like y = 2.
        let o = (16 + 3) * 4;
        assert!((npe.data()[o] - 1.5f64.sin()).abs() < 1e-15);
        assert!((npe.data()[o + 2] - 2f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_channels() {
        let cfg = PositionalEncodingConfig { channels: 6, train_size: (1, 1), test_size: (1, 1) };
        assert!(normalized_positional_encoding::<f64>(&cfg).is_err());
    }
}
