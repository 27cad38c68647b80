//! Dense row-major tensors and HWC feature maps.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!("shape {shape:?} needs {n} values, got {}", data.len()));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return shape_err(format!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Element of a rank-2 tensor.
    pub fn at2(&self, r: usize, c: usize) -> T {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: T) {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, what: &'static str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what))
        }
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2(&self) -> Self {
        assert_eq!(self.rank(), 2, "transpose2 needs a matrix");
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Vec::with_capacity(self.data.len());
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Self { shape: vec![c, r], data: out }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| U::lit(x.as_f64())).collect() }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data.iter().zip(&other.data).fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

/// Resolution denominator of a pyramid level (1/2, 1/8, 1/32, ...).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Level(pub u32);

impl Level {
    pub const FULL: Level = Level(1);
    pub const HALF: Level = Level(2);
    pub const QUARTER: Level = Level(4);
    pub const EIGHTH: Level = Level(8);
    pub const SIXTEENTH: Level = Level(16);
    pub const THIRTY_SECOND: Level = Level(32);
}

/// Height x width x channels grid of values (channels fastest), tagged with
/// the pyramid level it lives on.
///
/// Flattened, the data is exactly a `[height * width, channels]` token matrix,
/// so grid <-> token conversions are free.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub level: Level,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(height: usize, width: usize, channels: usize, level: Level) -> Self {
        Self { height, width, channels, level, data: vec![T::zero(); height * width * channels] }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, level: Level, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return shape_err(format!(
                "feature map {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            ));
        }
        Ok(Self { height, width, channels, level, data })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        level: Level,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { height, width, channels, level, data }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.height, self.width, self.channels, self.level)
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[T] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn token(&self, i: usize) -> &[T] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Token-major `[height * width, channels]` view as a tensor.
    pub fn flatten(&self) -> Tensor<T> {
        Tensor { shape: vec![self.tokens(), self.channels], data: self.data.clone() }
    }

    /// Inverse of [`FeatureMap::flatten`].
    pub fn unflatten(t: &Tensor<T>, height: usize, width: usize, level: Level) -> Result<Self> {
        if t.rank() != 2 || t.shape()[0] != height * width {
            return shape_err(format!("cannot unflatten {:?} into {height}x{width}", t.shape()));
        }
        Self::from_vec(height, width, t.shape()[1], level, t.data().to_vec())
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_dims(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data.iter().zip(&other.data).fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap {
            height: self.height,
            width: self.width,
            channels: self.channels,
            level: self.level,
            data: self.data.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }
}
