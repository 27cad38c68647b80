//! Sub-pixel refinement of coarse matches on the 1/2-resolution maps.
//!
//! A reference window of `s_i x s_i` cells and a source window of
//! `s_j x s_j` cells are cropped around the match, passed through one linear
//! self-attention and one linear cross-attention layer, and the updated
//! reference center is correlated with every source cell. The expectation
//! of source-cell image coordinates under the resulting heatmap is the
//! refined match.

use rand::Rng;

use crate::attention::{
    cross_attention_backward, cross_attention_forward, AttentionKind, AttentionLayerParams, LayerCache, TokenMasks,
};
use crate::error::{shape_err, Error, Result};
use crate::numerics::softmax_in_place;
use crate::params::{impl_parameters, Parameters};
use crate::scalar::Scalar;
use crate::tensor::FeatureMap;

/// Image coordinate of the center of half-resolution pixel `h`.
pub fn half_to_image(h: f64) -> f64 {
    2.0 * h + 0.5
}

/// A window of a 1/2-resolution map. Cells outside the map are zero and
/// flagged invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct Crop<T> {
    pub map: FeatureMap<T>,
    pub valid: Vec<bool>,
    /// Map position `(y, x)` of the window's top-left cell; may be negative.
    pub origin: (isize, isize),
    pub size: usize,
}

impl<T: Scalar> Crop<T> {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Image coordinates `(x, y)` of window cell `k`.
    pub fn cell_coord(&self, k: usize) -> (f64, f64) {
        let (ky, kx) = ((k / self.size) as isize, (k % self.size) as isize);
        (half_to_image((self.origin.1 + kx) as f64), half_to_image((self.origin.0 + ky) as f64))
    }

    /// Whether image point `(x, y)` lies in the hull of the window's cell
    /// coordinates, i.e. is reachable by the heatmap expectation.
    pub fn spans(&self, x: f64, y: f64) -> bool {
        let (x0, y0) = self.cell_coord(0);
        let (x1, y1) = self.cell_coord(self.size * self.size - 1);
        (x0..=x1).contains(&x) && (y0..=y1).contains(&y)
    }

    pub fn center_index(&self) -> usize {
        (self.size / 2) * self.size + self.size / 2
    }
}

/// `s x s` window of `f` centered at map position `center = (y, x)`.
pub fn crop_grid<T: Scalar>(f: &FeatureMap<T>, center: (usize, usize), s: usize) -> Result<Crop<T>> {
    if s.is_multiple_of(2) {
        return Err(Error::Config(format!("crop size {s} must be odd")));
    }
    if center.0 >= f.height || center.1 >= f.width {
        return Err(Error::IndexOutOfRange { index: center.0 * f.width + center.1, extent: f.height * f.width });
    }
    let r = (s / 2) as isize;
    let origin = (center.0 as isize - r, center.1 as isize - r);
    let c = f.channels;
    let mut data = vec![T::zero(); s * s * c];
    let mut valid = vec![false; s * s];
    for ky in 0..s {
        for kx in 0..s {
            let (y, x) = (origin.0 + ky as isize, origin.1 + kx as isize);
            if y >= 0 && x >= 0 && (y as usize) < f.height && (x as usize) < f.width {
                let k = ky * s + kx;
                valid[k] = true;
                data[k * c..(k + 1) * c].copy_from_slice(f.pixel(y as usize, x as usize));
            }
        }
    }
    Ok(Crop { map: FeatureMap::from_vec(s, s, c, f.level, data)?, valid, origin, size: s })
}

/// Scatter-adds a window gradient back into a full-map gradient.
pub fn crop_backward<T: Scalar>(crop: &Crop<T>, grad: &FeatureMap<T>, target: &mut FeatureMap<T>) {
    let (s, c) = (crop.size, grad.channels);
    for ky in 0..s {
        for kx in 0..s {
            let k = ky * s + kx;
            if !crop.valid[k] {
                continue;
            }
            let (y, x) = ((crop.origin.0 + ky as isize) as usize, (crop.origin.1 + kx as isize) as usize);
            let off = (y * target.width + x) * c;
            for (t, &g) in target.data[off..off + c].iter_mut().zip(&grad.data[k * c..(k + 1) * c]) {
                *t += g;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FineParams<T> {
    pub self_attn: AttentionLayerParams<T>,
    pub cross_attn: AttentionLayerParams<T>,
}

impl_parameters!(FineParams { self_attn, cross_attn });

impl<T: Scalar> FineParams<T> {
    pub fn init(channels: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            self_attn: AttentionLayerParams::init(channels, heads, rng),
            cross_attn: AttentionLayerParams::init(channels, heads, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_grads();
        z
    }
}

/// Refined source position of one match.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FineResult {
    pub x: f64,
    pub y: f64,
    /// Trace of the heatmap's coordinate covariance, in pixels squared.
    pub variance: f64,
    pub s_j: usize,
}

/// Heatmap over `n` source tokens: softmax of `tau <center, token>` over the
/// valid tokens; invalid tokens get weight zero.
pub fn heatmap<T: Scalar>(center: &[T], tokens: &[T], valid: &[bool], tau: T) -> Result<Vec<T>> {
    let c = center.len();
    let idx: Vec<usize> = (0..valid.len()).filter(|&k| valid[k]).collect();
    if idx.is_empty() {
        return Err(Error::NoRefinement);
    }
    let mut logits: Vec<T> =
        idx.iter().map(|&k| tau * center.iter().zip(&tokens[k * c..(k + 1) * c]).map(|(&a, &b)| a * b).sum::<T>()).collect();
    softmax_in_place(&mut logits);
    let mut w = vec![T::zero(); valid.len()];
    for (&k, &p) in idx.iter().zip(&logits) {
        w[k] = p;
    }
    Ok(w)
}

/// Mean and covariance trace of `coords` under weights `w`.
pub fn expectation<T: Scalar>(w: &[T], coords: &[(f64, f64)]) -> (f64, f64, f64) {
    let (mut mx, mut my) = (0.0, 0.0);
    for (&p, &(x, y)) in w.iter().zip(coords) {
        let p = p.as_f64();
        mx += p * x;
        my += p * y;
    }
    let var = w.iter().zip(coords).map(|(&p, &(x, y))| p.as_f64() * ((x - mx).powi(2) + (y - my).powi(2))).sum();
    (mx, my, var)
}

/// Intermediate values of one [`refine_forward`].
pub struct FineCache<T> {
    self_ref: LayerCache<T>,
    self_src: LayerCache<T>,
    cross_ref: LayerCache<T>,
    cross_src: LayerCache<T>,
    ref_out: FeatureMap<T>,
    src_out: FeatureMap<T>,
    weights: Vec<T>,
    coords: Vec<(f64, f64)>,
    center: usize,
    tau: T,
}

pub fn fine_tau<T: Scalar>(channels: usize) -> T {
    T::one() / T::lit(channels as f64).sqrt()
}

/// Refines one match from its reference and source windows.
pub fn refine_match<T: Scalar>(grid_ref: &Crop<T>, grid_src: &Crop<T>, params: &FineParams<T>) -> Result<FineResult> {
    Ok(refine_forward(grid_ref, grid_src, params)?.0)
}

pub fn refine_forward<T: Scalar>(
    grid_ref: &Crop<T>,
    grid_src: &Crop<T>,
    params: &FineParams<T>,
) -> Result<(FineResult, FineCache<T>)> {
    if grid_ref.map.channels != grid_src.map.channels {
        return shape_err("reference and source windows differ in channels");
    }
    if grid_src.valid_count() == 0 {
        return Err(Error::NoRefinement);
    }
    let rm = TokenMasks { query: Some(&grid_ref.valid), key: Some(&grid_ref.valid) };
    let sm = TokenMasks { query: Some(&grid_src.valid), key: Some(&grid_src.valid) };
    let lin = AttentionKind::Linear;
    let (r1, self_ref) = cross_attention_forward(&grid_ref.map, &grid_ref.map, &params.self_attn, lin, rm)?;
    let (s1, self_src) = cross_attention_forward(&grid_src.map, &grid_src.map, &params.self_attn, lin, sm)?;
    let rs = TokenMasks { query: Some(&grid_ref.valid), key: Some(&grid_src.valid) };
    let sr = TokenMasks { query: Some(&grid_src.valid), key: Some(&grid_ref.valid) };
    let (r2, cross_ref) = cross_attention_forward(&r1, &s1, &params.cross_attn, lin, rs)?;
    let (s2, cross_src) = cross_attention_forward(&s1, &r1, &params.cross_attn, lin, sr)?;
    let c = r2.channels;
    let center = grid_ref.center_index();
    let tau = fine_tau::<T>(c);
    let weights = heatmap(r2.token(center), &s2.data, &grid_src.valid, tau)?;
    let coords: Vec<(f64, f64)> = (0..grid_src.size * grid_src.size).map(|k| grid_src.cell_coord(k)).collect();
    let (x, y, variance) = expectation(&weights, &coords);
    let result = FineResult { x, y, variance, s_j: grid_src.size };
    let cache =
        FineCache { self_ref, self_src, cross_ref, cross_src, ref_out: r2, src_out: s2, weights, coords, center, tau };
    Ok((result, cache))
}

/// Adjoint of [`refine_forward`] for an upstream gradient on the refined
/// coordinate; returns window gradients `(d_ref, d_src)`.
pub fn refine_backward<T: Scalar>(
    cache: &FineCache<T>,
    params: &FineParams<T>,
    d_xy: (f64, f64),
    grads: &mut FineParams<T>,
) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
    let c = cache.ref_out.channels;
    // d/dw_k of sum_k w_k coord_k, then through the softmax
    let dw: Vec<T> = cache.coords.iter().map(|&(x, y)| T::lit(d_xy.0 * x + d_xy.1 * y)).collect();
    let dot: T = cache.weights.iter().zip(&dw).map(|(&w, &g)| w * g).sum();
    let dlogit: Vec<T> = cache.weights.iter().zip(&dw).map(|(&w, &g)| w * (g - dot) * cache.tau).collect();

    let mut d_r2 = cache.ref_out.zeros_like();
    let mut d_s2 = cache.src_out.zeros_like();
    let center = cache.ref_out.token(cache.center).to_vec();
    {
        let dc = &mut d_r2.data[cache.center * c..(cache.center + 1) * c];
        for (k, &g) in dlogit.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            let tok = cache.src_out.token(k);
            for ch in 0..c {
                dc[ch] += g * tok[ch];
                d_s2.data[k * c + ch] += g * center[ch];
            }
        }
    }
    let (mut d_s1, d_r1_from_s) = cross_attention_backward(&cache.cross_src, &params.cross_attn, &d_s2, &mut grads.cross_attn)?;
    let (mut d_r1, d_s1_from_r) = cross_attention_backward(&cache.cross_ref, &params.cross_attn, &d_r2, &mut grads.cross_attn)?;
    d_r1.add_assign(&d_r1_from_s);
    d_s1.add_assign(&d_s1_from_r);
    let (mut d_ref, dy) = cross_attention_backward(&cache.self_ref, &params.self_attn, &d_r1, &mut grads.self_attn)?;
    d_ref.add_assign(&dy);
    let (mut d_src, dy) = cross_attention_backward(&cache.self_src, &params.self_attn, &d_s1, &mut grads.self_attn)?;
    d_src.add_assign(&dy);
    Ok((d_ref, d_src))
}

/// Heatmap weights of a cached refinement.
pub fn cached_weights<T: Scalar>(cache: &FineCache<T>) -> &[T] {
    &cache.weights
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Level;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_fn(h, w, c, Level::HALF, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn crop_counts() {
        let f = map(16, 16, 2, 1);
        assert_eq!(crop_grid(&f, (8, 8), 5).unwrap().valid_count(), 25);
        let corner = crop_grid(&f, (0, 0), 5).unwrap();
        assert_eq!(corner.valid_count(), 9);
        assert_eq!(corner.map.data.iter().filter(|&&v| v == 0.0).count(), 16 * 2);
        assert!(crop_grid(&f, (16, 0), 5).is_err());
        assert!(crop_grid(&f, (3, 3), 4).is_err());
    }

    #[test]
    fn overlapping_crops_agree() {
        let f = map(12, 12, 3, 2);
        let a = crop_grid(&f, (5, 5), 5).unwrap();
        let b = crop_grid(&f, (6, 7), 7).unwrap();
        for ky in 0..5 {
            for kx in 0..5 {
                let (y, x) = (a.origin.0 + ky, a.origin.1 + kx);
                let (by, bx) = (y - b.origin.0, x - b.origin.1);
                if (0..7).contains(&by) && (0..7).contains(&bx) {
                    assert_eq!(a.map.pixel(ky as usize, kx as usize), b.map.pixel(by as usize, bx as usize));
                }
            }
        }
        assert_eq!(a.map.pixel(2, 2), f.pixel(5, 5));
    }

    #[test]
    fn delta_heatmap() {
        let w = [0.0, 0.0, 1.0, 0.0];
        let coords = [(0.5, 0.5), (2.5, 0.5), (0.5, 2.5), (2.5, 2.5)];
        assert_eq!(expectation(&w, &coords), (0.5, 2.5, 0.0));
    }

    #[test]
    fn uniform_heatmap_on_symmetric_grid() {
        let f = FeatureMap::<f64>::zeros(9, 9, 2, Level::HALF);
        let crop = crop_grid(&f, (4, 4), 3).unwrap();
        let w = heatmap(&[0.0, 0.0], &crop.map.data, &crop.valid, 1.0).unwrap();
        let coords: Vec<_> = (0..9).map(|k| crop.cell_coord(k)).collect();
        let (x, y, var) = expectation(&w, &coords);
        assert!((x - 8.5).abs() < 1e-12 && (y - 8.5).abs() < 1e-12);
        // offsets -2, 0, 2 per axis: variance 8/3 per axis
        assert!((var - 16.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn padded_cells_are_excluded() {
        let f = map(6, 6, 2, 3);
        let crop = crop_grid(&f, (0, 0), 3).unwrap();
        let w = heatmap(&[1.0, -1.0], &crop.map.data, &crop.valid, 1.0).unwrap();
        for (k, &p) in w.iter().enumerate() {
            assert_eq!(p > 0.0, crop.valid[k]);
        }
        let none = Crop { valid: vec![false; 9], ..crop };
        assert!(matches!(heatmap(&[1.0, -1.0], &none.map.data, &none.valid, 1.0), Err(Error::NoRefinement)));
    }

    #[test]
    fn refine_result_inside_window() {
        let f = map(16, 16, 8, 4);
        let g = map(16, 16, 8, 5);
        let params = FineParams::<f64>::init(8, 2, &mut ChaCha8Rng::seed_from_u64(6));
        let a = crop_grid(&f, (7, 7), 5).unwrap();
        let b = crop_grid(&g, (1, 14), 9).unwrap();
        let r = refine_match(&a, &b, &params).unwrap();
        assert_eq!(r.s_j, 9);
        let valid: Vec<_> = (0..81).filter(|&k| b.valid[k]).map(|k| b.cell_coord(k)).collect();
        let (lo_x, hi_x) = valid.iter().fold((f64::MAX, f64::MIN), |a, c| (a.0.min(c.0), a.1.max(c.0)));
        let (lo_y, hi_y) = valid.iter().fold((f64::MAX, f64::MIN), |a, c| (a.0.min(c.1), a.1.max(c.1)));
        assert!(r.x >= lo_x && r.x <= hi_x && r.y >= lo_y && r.y <= hi_y);
        assert!(r.variance >= 0.0);
    }

    proptest! {
        #[test]
        fn expectation_matches_weighted_sum(seed in 0u64..1000, n in 1usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = 4;
            let center: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let tokens: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let valid: Vec<bool> = (0..n).map(|k| k == 0 || rng.gen_bool(0.8)).collect();
            let coords: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0))).collect();
            let w = heatmap(&center, &tokens, &valid, 0.5).unwrap();
            // direct oracle
            let logits: Vec<f64> = (0..n).map(|k| 0.5 * (0..c).map(|ch| center[ch] * tokens[k * c + ch]).sum::<f64>()).collect();
            let z: f64 = (0..n).filter(|&k| valid[k]).map(|k| logits[k].exp()).sum();
            let p: Vec<f64> = (0..n).map(|k| if valid[k] { logits[k].exp() / z } else { 0.0 }).collect();
            let mx: f64 = (0..n).map(|k| p[k] * coords[k].0).sum();
            let my: f64 = (0..n).map(|k| p[k] * coords[k].1).sum();
            let var: f64 = (0..n).map(|k| p[k] * ((coords[k].0 - mx).powi(2) + (coords[k].1 - my).powi(2))).sum();
            let (ex, ey, ev) = expectation(&w, &coords);
            prop_assert!((ex - mx).abs() < 1e-10 && (ey - my).abs() < 1e-10 && (ev - var).abs() < 1e-10);
            // translation equivariance
            let shifted: Vec<(f64, f64)> = coords.iter().map(|&(x, y)| (x + 3.25, y - 7.5)).collect();
            let (sx, sy, sv) = expectation(&w, &shifted);
            prop_assert!((sx - ex - 3.25).abs() < 1e-9 && (sy - ey + 7.5).abs() < 1e-9 && (sv - ev).abs() < 1e-8);
        }
    }
}
