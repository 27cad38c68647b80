//! Convolutional feature pyramid producing 1/2, 1/8 and 1/32 maps.
//!
//! Five stride-2 3x3 convolutions with elu build the bottom-up path
//! (1/2 .. 1/32). The top-down path projects each stage with 1x1
//! convolutions and adds the 2x-upsampled coarser map.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::numerics::{conv2d, conv2d_backward, elu, elu_grad, resample, resample_backward, Resample};
use crate::params::{conv_kernel, impl_parameters};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, Level, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PyramidConfig {
    /// Output channels of the five bottom-up stages (1/2 .. 1/32).
    pub channels: [usize; 5],
    /// Three input channels instead of one.
    pub color: bool,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self { channels: [32, 48, 64, 64, 64], color: false }
    }
}

impl PyramidConfig {
    /// Channel plan of the full-size model.
    pub fn full_size() -> Self {
        Self { channels: [128, 196, 256, 256, 256], color: false }
    }

    pub fn input_channels(&self) -> usize {
        if self.color {
            3
        } else {
            1
        }
    }

    /// Channels of the 1/8 and 1/32 maps.
    pub fn coarse_channels(&self) -> usize {
        self.channels[4]
    }

    /// Channels of the 1/2 map.
    pub fn fine_channels(&self) -> usize {
        self.channels[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::Config("pyramid channel counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidParams<T> {
    pub conv1: Tensor<T>,
    pub bias1: Tensor<T>,
    pub conv2: Tensor<T>,
    pub bias2: Tensor<T>,
    pub conv3: Tensor<T>,
    pub bias3: Tensor<T>,
    pub conv4: Tensor<T>,
    pub bias4: Tensor<T>,
    pub conv5: Tensor<T>,
    pub bias5: Tensor<T>,
    pub lat32: Tensor<T>,
    pub lat16: Tensor<T>,
    pub lat8: Tensor<T>,
    pub out8: Tensor<T>,
    pub top4: Tensor<T>,
    pub lat4: Tensor<T>,
    pub lat2: Tensor<T>,
}

impl_parameters!(PyramidParams {
    conv1, bias1, conv2, bias2, conv3, bias3, conv4, bias4, conv5, bias5, lat32, lat16, lat8, out8, top4, lat4, lat2
});

impl<T: Scalar> PyramidParams<T> {
    pub fn init(cfg: &PyramidConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.channels;
        let (cc, cf) = (cfg.coarse_channels(), cfg.fine_channels());
        let stage = |o: usize, i: usize, rng: &mut _| conv_kernel(o, 3, i, 1.4, rng);
        Self {
            conv1: stage(c[0], cfg.input_channels(), rng),
            bias1: Tensor::zeros(&[c[0]]),
            conv2: stage(c[1], c[0], rng),
            bias2: Tensor::zeros(&[c[1]]),
            conv3: stage(c[2], c[1], rng),
            bias3: Tensor::zeros(&[c[2]]),
            conv4: stage(c[3], c[2], rng),
            bias4: Tensor::zeros(&[c[3]]),
            conv5: stage(c[4], c[3], rng),
            bias5: Tensor::zeros(&[c[4]]),
            lat32: conv_kernel(cc, 1, c[4], 1.0, rng),
            lat16: conv_kernel(cc, 1, c[3], 1.0, rng),
            lat8: conv_kernel(cc, 1, c[2], 1.0, rng),
            out8: conv_kernel(cc, 3, cc, 1.0, rng),
            top4: conv_kernel(cf, 1, cc, 1.0, rng),
            lat4: conv_kernel(cf, 1, c[1], 1.0, rng),
            lat2: conv_kernel(cf, 1, c[0], 1.0, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        crate::params::Parameters::zero_grads(&mut z);
        z
    }
}

/// The three maps consumed downstream.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid<T> {
    pub half: FeatureMap<T>,
    pub eighth: FeatureMap<T>,
    pub thirty_second: FeatureMap<T>,
}

/// Intermediate values of [`pyramid_forward`].
#[derive(Clone, Debug)]
pub struct PyramidCache<T> {
    input: FeatureMap<T>,
    pre: Vec<FeatureMap<T>>,
    act: Vec<FeatureMap<T>>,
    p16: FeatureMap<T>,
    p8: FeatureMap<T>,
    e8: FeatureMap<T>,
    f8: FeatureMap<T>,
    t4: FeatureMap<T>,
    p4: FeatureMap<T>,
    f32: FeatureMap<T>,
}

fn elu_map<T: Scalar>(m: &FeatureMap<T>) -> FeatureMap<T> {
    let mut out = m.clone();
    out.data.iter_mut().for_each(|v| *v = elu(*v));
    out
}

fn add<T: Scalar>(mut a: FeatureMap<T>, b: &FeatureMap<T>) -> FeatureMap<T> {
    a.add_assign(b);
    a
}

pub fn extract_pyramid<T: Scalar>(image: &FeatureMap<T>, params: &PyramidParams<T>) -> Result<Pyramid<T>> {
    Ok(pyramid_forward(image, params)?.0)
}

pub fn pyramid_forward<T: Scalar>(image: &FeatureMap<T>, params: &PyramidParams<T>) -> Result<(Pyramid<T>, PyramidCache<T>)> {
    if image.height == 0 || image.width == 0 || !image.height.is_multiple_of(32) || !image.width.is_multiple_of(32) {
        return shape_err(format!("image extents {}x{} must be positive multiples of 32", image.height, image.width));
    }
    let stages = [
        (&params.conv1, &params.bias1),
        (&params.conv2, &params.bias2),
        (&params.conv3, &params.bias3),
        (&params.conv4, &params.bias4),
        (&params.conv5, &params.bias5),
    ];
    let mut pre = Vec::with_capacity(5);
    let mut act: Vec<FeatureMap<T>> = Vec::with_capacity(5);
    for (k, b) in stages {
        let input = act.last().unwrap_or(image);
        let z = conv2d(input, k, Some(b.data()), 2, 1)?;
        act.push(elu_map(&z));
        pre.push(z);
    }
    let f32 = conv2d(&act[4], &params.lat32, None, 1, 0)?;
    let p16 = add(conv2d(&act[3], &params.lat16, None, 1, 0)?, &resample(&f32, Resample::UP2)?);
    let p8 = add(conv2d(&act[2], &params.lat8, None, 1, 0)?, &resample(&p16, Resample::UP2)?);
    let e8 = elu_map(&p8);
    let f8 = conv2d(&e8, &params.out8, None, 1, 1)?;
    let t4 = conv2d(&f8, &params.top4, None, 1, 0)?;
    let p4 = add(conv2d(&act[1], &params.lat4, None, 1, 0)?, &resample(&t4, Resample::UP2)?);
    let half = add(conv2d(&act[0], &params.lat2, None, 1, 0)?, &resample(&p4, Resample::UP2)?);
    let pyr = Pyramid { half, eighth: f8.clone(), thirty_second: f32.clone() };
    let cache = PyramidCache { input: image.clone(), pre, act, p16, p8, e8, f8, t4, p4, f32 };
    Ok((pyr, cache))
}

fn dims<T: Scalar>(m: &FeatureMap<T>) -> (usize, usize) {
    (m.height, m.width)
}

/// Adjoint of [`pyramid_forward`]. Accumulates parameter gradients and
/// returns the image gradient.
pub fn pyramid_backward<T: Scalar>(
    cache: &PyramidCache<T>,
    params: &PyramidParams<T>,
    grad: &Pyramid<T>,
    grads: &mut PyramidParams<T>,
) -> Result<FeatureMap<T>> {
    let act = &cache.act;
    let mut dact: Vec<FeatureMap<T>> = act.iter().map(|a| a.zeros_like()).collect();

    let lateral = |input: &FeatureMap<T>, k: &Tensor<T>, g: &FeatureMap<T>, dk: &mut Tensor<T>, din: &mut FeatureMap<T>| -> Result<()> {
        let cg = conv2d_backward(input, k, 1, 0, g)?;
        dk.add_assign(&cg.kernel);
        din.add_assign(&cg.input);
        Ok(())
    };

    let dhalf = &grad.half;
    lateral(&act[0], &params.lat2, dhalf, &mut grads.lat2, &mut dact[0])?;
    let dp4 = resample_backward(dhalf, Resample::UP2, dims(&cache.p4), cache.p4.level)?;
    lateral(&act[1], &params.lat4, &dp4, &mut grads.lat4, &mut dact[1])?;
    let dt4 = resample_backward(&dp4, Resample::UP2, dims(&cache.t4), cache.t4.level)?;
    let mut df8 = grad.eighth.clone();
    lateral(&cache.f8, &params.top4, &dt4, &mut grads.top4, &mut df8)?;
    let cg = conv2d_backward(&cache.e8, &params.out8, 1, 1, &df8)?;
    grads.out8.add_assign(&cg.kernel);
    let mut dp8 = cg.input;
    for (g, &z) in dp8.data.iter_mut().zip(&cache.p8.data) {
        *g *= elu_grad(z);
    }
    lateral(&act[2], &params.lat8, &dp8, &mut grads.lat8, &mut dact[2])?;
    let dp16 = resample_backward(&dp8, Resample::UP2, dims(&cache.p16), cache.p16.level)?;
    lateral(&act[3], &params.lat16, &dp16, &mut grads.lat16, &mut dact[3])?;
    let mut df32 = grad.thirty_second.clone();
    df32.add_assign(&resample_backward(&dp16, Resample::UP2, dims(&cache.f32), cache.f32.level)?);
    lateral(&act[4], &params.lat32, &df32, &mut grads.lat32, &mut dact[4])?;

    let kernels = [&params.conv1, &params.conv2, &params.conv3, &params.conv4, &params.conv5];
    let mut dinput = cache.input.zeros_like();
    for s in (0..5).rev() {
        let mut dz = dact[s].clone();
        for (g, &z) in dz.data.iter_mut().zip(&cache.pre[s].data) {
            *g *= elu_grad(z);
        }
        let input = if s == 0 { &cache.input } else { &act[s - 1] };
        let cg = conv2d_backward(input, kernels[s], 2, 1, &dz)?;
        let (dk, db) = match s {
            0 => (&mut grads.conv1, &mut grads.bias1),
            1 => (&mut grads.conv2, &mut grads.bias2),
            2 => (&mut grads.conv3, &mut grads.bias3),
            3 => (&mut grads.conv4, &mut grads.bias4),
            _ => (&mut grads.conv5, &mut grads.bias5),
        };
        dk.add_assign(&cg.kernel);
        for (b, &g) in db.data_mut().iter_mut().zip(&cg.bias) {
            *b += g;
        }
        if s == 0 {
            dinput = cg.input;
        } else {
            dact[s - 1].add_assign(&cg.input);
        }
    }
    Ok(dinput)
}

/// Image as a one- or three-channel full-resolution map, standardized to
/// zero mean and unit variance.
pub fn standardize<T: Scalar>(image: &FeatureMap<T>) -> FeatureMap<T> {
    let n = T::lit(image.data.len().max(1) as f64);
    let mean = image.data.iter().copied().sum::<T>() / n;
    let var = image.data.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv = T::one() / (var.sqrt() + T::lit(1e-6));
    let mut out = image.clone();
    out.level = Level::FULL;
    out.data.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    out
}
