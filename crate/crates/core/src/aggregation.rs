//! Multi-level aggregation of the 1/32 and 1/8 maps of an image pair.
//!
//! Initialization runs vanilla cross attention at 1/32 and linear cross
//! attention at 1/8. Each block then fuses the two levels of each image,
//! updates 1/32 with vanilla cross attention and 1/8 with spot-guided
//! sparse cross attention. A final fusion folds 1/32 into 1/8.

use rand::Rng;

use crate::attention::{
    cross_attention_backward, cross_attention_forward, AttentionKind, AttentionLayerParams, LayerCache, TokenMasks,
};
use crate::coarse::DualSoftmax;
use crate::error::{shape_err, Result};
use crate::numerics::{conv2d, conv2d_backward, resample, resample_backward, Resample};
use crate::params::{conv_kernel, impl_parameters, Parameters};
use crate::scalar::{matmul_acc, Scalar};
use crate::spot::{matching_matrix_parts, spot_plan, SpotConfig, SpotMatrix};
use crate::tensor::{FeatureMap, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AggregationConfig {
    pub blocks: usize,
    pub spot: SpotConfig,
    /// Update the source side from the already-updated reference side
    /// instead of from the pre-block features.
    pub sequential: bool,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self { blocks: 4, spot: SpotConfig::default(), sequential: false }
    }
}

/// 1x1 projections of one two-level fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct FuseParams<T> {
    /// Applied to the downsampled 1/8 map before adding it to 1/32.
    pub down: Tensor<T>,
    /// Applied to the upsampled 1/32 map before adding it to 1/8.
    pub up: Tensor<T>,
}

impl_parameters!(FuseParams { down, up });

impl<T: Scalar> FuseParams<T> {
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        Self { down: conv_kernel(channels, 1, channels, 0.5, rng), up: conv_kernel(channels, 1, channels, 0.5, rng) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregationParams<T> {
    pub init32: AttentionLayerParams<T>,
    pub init8: AttentionLayerParams<T>,
    pub fuse: Vec<FuseParams<T>>,
    pub coarse: Vec<AttentionLayerParams<T>>,
    pub spot: Vec<AttentionLayerParams<T>>,
    pub final_fuse: FuseParams<T>,
}

impl_parameters!(AggregationParams { init32, init8, fuse, coarse, spot, final_fuse });

impl<T: Scalar> AggregationParams<T> {
    pub fn init(channels: usize, heads: usize, blocks: usize, rng: &mut impl Rng) -> Self {
        Self {
            init32: AttentionLayerParams::init(channels, heads, rng),
            init8: AttentionLayerParams::init(channels, heads, rng),
            fuse: (0..blocks).map(|_| FuseParams::init(channels, rng)).collect(),
            coarse: (0..blocks).map(|_| AttentionLayerParams::init(channels, heads, rng)).collect(),
            spot: (0..blocks).map(|_| AttentionLayerParams::init(channels, heads, rng)).collect(),
            final_fuse: FuseParams::init(channels, rng),
        }
    }

    pub fn blocks(&self) -> usize {
        self.fuse.len()
    }

    pub fn set_layer_norm(&mut self, on: bool) {
        self.init32.layer_norm = on;
        self.init8.layer_norm = on;
        for l in self.coarse.iter_mut().chain(self.spot.iter_mut()) {
            l.layer_norm = on;
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_grads();
        z
    }
}

/// Intermediate values of one [`fuse_forward`].
#[derive(Clone, Debug)]
pub struct FuseCache<T> {
    f32: FeatureMap<T>,
    f8: FeatureMap<T>,
    down8: FeatureMap<T>,
    up32: FeatureMap<T>,
}

/// `F32' = F32 + conv1x1(Down4 F8)`, `F8' = F8 + conv1x1(Up4 F32)`.
pub fn fuse_levels<T: Scalar>(
    f32: &FeatureMap<T>,
    f8: &FeatureMap<T>,
    params: &FuseParams<T>,
) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
    let (a, b, _) = fuse_forward(f32, f8, params)?;
    Ok((a, b))
}

pub fn fuse_forward<T: Scalar>(
    f32: &FeatureMap<T>,
    f8: &FeatureMap<T>,
    params: &FuseParams<T>,
) -> Result<(FeatureMap<T>, FeatureMap<T>, FuseCache<T>)> {
    if f8.height != 4 * f32.height || f8.width != 4 * f32.width {
        return shape_err(format!(
            "1/8 map {}x{} is not 4x the 1/32 map {}x{}",
            f8.height, f8.width, f32.height, f32.width
        ));
    }
    let down8 = resample(f8, Resample::DOWN4)?;
    let up32 = resample(f32, Resample::UP4)?;
    let mut o32 = f32.clone();
    o32.add_assign(&conv2d(&down8, &params.down, None, 1, 0)?);
    let mut o8 = f8.clone();
    o8.add_assign(&conv2d(&up32, &params.up, None, 1, 0)?);
    Ok((o32, o8, FuseCache { f32: f32.clone(), f8: f8.clone(), down8, up32 }))
}

/// Adjoint of [`fuse_forward`]; returns `(dF32, dF8)`.
pub fn fuse_backward<T: Scalar>(
    cache: &FuseCache<T>,
    params: &FuseParams<T>,
    d32: &FeatureMap<T>,
    d8: &FeatureMap<T>,
    grads: &mut FuseParams<T>,
) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
    let g_down = conv2d_backward(&cache.down8, &params.down, 1, 0, d32)?;
    grads.down.add_assign(&g_down.kernel);
    let g_up = conv2d_backward(&cache.up32, &params.up, 1, 0, d8)?;
    grads.up.add_assign(&g_up.kernel);
    let mut df32 = d32.clone();
    df32.add_assign(&resample_backward(&g_up.input, Resample::UP4, (cache.f32.height, cache.f32.width), cache.f32.level)?);
    let mut df8 = d8.clone();
    df8.add_assign(&resample_backward(&g_down.input, Resample::DOWN4, (cache.f8.height, cache.f8.width), cache.f8.level)?);
    Ok((df32, df8))
}

/// 1/32 and 1/8 maps of both images.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelPair<T> {
    pub ref32: FeatureMap<T>,
    pub src32: FeatureMap<T>,
    pub ref8: FeatureMap<T>,
    pub src8: FeatureMap<T>,
}

impl<T: Scalar> LevelPair<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            ref32: self.ref32.zeros_like(),
            src32: self.src32.zeros_like(),
            ref8: self.ref8.zeros_like(),
            src8: self.src8.zeros_like(),
        }
    }
}

/// Spot matching matrices of one block: reference-to-source and
/// source-to-reference.
#[derive(Clone, Debug)]
pub struct SpotMatrices<T> {
    pub ref_to_src: DualSoftmax<T>,
    pub src_to_ref: DualSoftmax<T>,
}

#[derive(Clone, Debug)]
pub struct AggregationOutput<T> {
    pub ref8: FeatureMap<T>,
    pub src8: FeatureMap<T>,
    /// One entry per block.
    pub spot: Vec<SpotMatrices<T>>,
}

struct PairCache<T> {
    r: LayerCache<T>,
    s: LayerCache<T>,
}

struct BlockCache<T> {
    fuse_r: FuseCache<T>,
    fuse_s: FuseCache<T>,
    coarse: PairCache<T>,
    spot: PairCache<T>,
    ref8: FeatureMap<T>,
    src8: FeatureMap<T>,
    tau: T,
}

pub struct AggregationCache<T> {
    init32: PairCache<T>,
    init8: PairCache<T>,
    blocks: Vec<BlockCache<T>>,
    final_r: FuseCache<T>,
    final_s: FuseCache<T>,
    sequential: bool,
}

/// Updates both maps of a pair with the same layer; returns the new maps
/// and caches.
fn pair_update<T: Scalar>(
    r: &FeatureMap<T>,
    s: &FeatureMap<T>,
    params: &AttentionLayerParams<T>,
    kinds: (AttentionKind<'_>, AttentionKind<'_>),
    sequential: bool,
) -> Result<(FeatureMap<T>, FeatureMap<T>, PairCache<T>)> {
    let (r2, rc) = cross_attention_forward(r, s, params, kinds.0, TokenMasks::default())?;
    let key = if sequential { &r2 } else { r };
    let (s2, sc) = cross_attention_forward(s, key, params, kinds.1, TokenMasks::default())?;
    Ok((r2, s2, PairCache { r: rc, s: sc }))
}

/// Adjoint of [`pair_update`]; returns `(dr, ds)` for the pre-update maps.
fn pair_backward<T: Scalar>(
    cache: &PairCache<T>,
    params: &AttentionLayerParams<T>,
    dr2: &FeatureMap<T>,
    ds2: &FeatureMap<T>,
    sequential: bool,
    grads: &mut AttentionLayerParams<T>,
) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
    let (mut ds, dkey) = cross_attention_backward(&cache.s, params, ds2, grads)?;
    let mut dr2 = dr2.clone();
    let mut extra_r = None;
    if sequential {
        dr2.add_assign(&dkey);
    } else {
        extra_r = Some(dkey);
    }
    let (mut dr, dy) = cross_attention_backward(&cache.r, params, &dr2, grads)?;
    ds.add_assign(&dy);
    if let Some(e) = extra_r {
        dr.add_assign(&e);
    }
    Ok((dr, ds))
}

/// `initialize_features`: vanilla cross attention at 1/32 and linear cross
/// attention at 1/8, both directions.
pub fn initialize_features<T: Scalar>(
    input: &LevelPair<T>,
    params: &AggregationParams<T>,
    sequential: bool,
) -> Result<LevelPair<T>> {
    let (r32, s32, _) =
        pair_update(&input.ref32, &input.src32, &params.init32, (AttentionKind::Vanilla, AttentionKind::Vanilla), sequential)?;
    let (r8, s8, _) =
        pair_update(&input.ref8, &input.src8, &params.init8, (AttentionKind::Linear, AttentionKind::Linear), sequential)?;
    Ok(LevelPair { ref32: r32, src32: s32, ref8: r8, src8: s8 })
}

pub fn run_aggregation<T: Scalar>(
    input: &LevelPair<T>,
    params: &AggregationParams<T>,
    cfg: &AggregationConfig,
) -> Result<AggregationOutput<T>> {
    Ok(aggregation_forward(input, params, cfg)?.0)
}

/// Full aggregation with the cache needed by [`aggregation_backward`].
pub fn aggregation_forward<T: Scalar>(
    input: &LevelPair<T>,
    params: &AggregationParams<T>,
    cfg: &AggregationConfig,
) -> Result<(AggregationOutput<T>, AggregationCache<T>)> {
    cfg.spot.validate()?;
    if params.blocks() != cfg.blocks {
        return shape_err(format!("parameters hold {} blocks, config asks for {}", params.blocks(), cfg.blocks));
    }
    let seq = cfg.sequential;
    let vanilla = (AttentionKind::Vanilla, AttentionKind::Vanilla);
    let linear = (AttentionKind::Linear, AttentionKind::Linear);
    let (mut r32, mut s32, init32) = pair_update(&input.ref32, &input.src32, &params.init32, vanilla, seq)?;
    let (mut r8, mut s8, init8) = pair_update(&input.ref8, &input.src8, &params.init8, linear, seq)?;
    let mut blocks = Vec::with_capacity(cfg.blocks);
    let mut spot_out = Vec::with_capacity(cfg.blocks);
    for b in 0..cfg.blocks {
        let (hr32, hr8, fuse_r) = fuse_forward(&r32, &r8, &params.fuse[b])?;
        let (hs32, hs8, fuse_s) = fuse_forward(&s32, &s8, &params.fuse[b])?;
        let (nr32, ns32, coarse) = pair_update(&hr32, &hs32, &params.coarse[b], vanilla, seq)?;

        let tau = cfg.spot.tau::<T>(hr8.channels);
        let rs = matching_matrix_parts(&hr8, &hs8, tau, cfg.spot.matrix)?;
        let sr = match cfg.spot.matrix {
            SpotMatrix::Dual => rs.transposed(),
            SpotMatrix::Row => matching_matrix_parts(&hs8, &hr8, tau, SpotMatrix::Row)?,
        };
        let (plan_r, _) = spot_plan(&hr8, &hs8, &rs.probs(), &cfg.spot)?;
        let (nr8, rc) = cross_attention_forward(&hr8, &hs8, &params.spot[b], AttentionKind::Sparse(&plan_r), TokenMasks::default())?;
        let key8_src = if seq { &nr8 } else { &hr8 };
        let (plan_s, _) = spot_plan(&hs8, key8_src, &sr.probs(), &cfg.spot)?;
        let (ns8, sc) =
            cross_attention_forward(&hs8, key8_src, &params.spot[b], AttentionKind::Sparse(&plan_s), TokenMasks::default())?;

        blocks.push(BlockCache {
            fuse_r,
            fuse_s,
            coarse,
            spot: PairCache { r: rc, s: sc },
            ref8: hr8,
            src8: hs8,
            tau,
        });
        spot_out.push(SpotMatrices { ref_to_src: rs, src_to_ref: sr });
        r32 = nr32;
        s32 = ns32;
        r8 = nr8;
        s8 = ns8;
    }
    let (_, fr8, final_r) = fuse_forward(&r32, &r8, &params.final_fuse)?;
    let (_, fs8, final_s) = fuse_forward(&s32, &s8, &params.final_fuse)?;
    let out = AggregationOutput { ref8: fr8, src8: fs8, spot: spot_out };
    let cache = AggregationCache { init32, init8, blocks, final_r, final_s, sequential: seq };
    Ok((out, cache))
}

/// Adjoint of [`aggregation_forward`].
///
/// `d_spot[b]` holds the loss gradients with respect to the block's
/// reference-to-source and source-to-reference score matrices (either may
/// be absent).
pub fn aggregation_backward<T: Scalar>(
    cache: &AggregationCache<T>,
    params: &AggregationParams<T>,
    d_ref8: &FeatureMap<T>,
    d_src8: &FeatureMap<T>,
    d_spot: &[(Option<Tensor<T>>, Option<Tensor<T>>)],
    grads: &mut AggregationParams<T>,
) -> Result<LevelPair<T>> {
    let seq = cache.sequential;
    let zero32_r = cache.final_r.f32.zeros_like();
    let zero32_s = cache.final_s.f32.zeros_like();
    let (mut dr32, mut dr8) = fuse_backward(&cache.final_r, &params.final_fuse, &zero32_r, d_ref8, &mut grads.final_fuse)?;
    let (ds32, ds8) = fuse_backward(&cache.final_s, &params.final_fuse, &zero32_s, d_src8, &mut grads.final_fuse)?;
    let (mut ds32, mut ds8) = (ds32, ds8);

    for b in (0..cache.blocks.len()).rev() {
        let bc = &cache.blocks[b];
        let (mut dhr8, mut dhs8) = pair_backward(&bc.spot, &params.spot[b], &dr8, &ds8, seq, &mut grads.spot[b])?;
        if let Some((g_rs, g_sr)) = d_spot.get(b) {
            let (n, m, c) = (bc.ref8.tokens(), bc.src8.tokens(), bc.ref8.channels);
            let mut ds = match g_rs {
                Some(g) => g.clone(),
                None => Tensor::zeros(&[n, m]),
            };
            if let Some(g) = g_sr {
                ds.add_assign(&g.transpose2());
            }
            ds.scale(bc.tau);
            matmul_acc(n, m, c, ds.data(), false, &bc.src8.data, false, &mut dhr8.data);
            matmul_acc(m, n, c, ds.data(), true, &bc.ref8.data, false, &mut dhs8.data);
        }
        let (dhr32, dhs32) = pair_backward(&bc.coarse, &params.coarse[b], &dr32, &ds32, seq, &mut grads.coarse[b])?;
        let (a32, a8) = fuse_backward(&bc.fuse_r, &params.fuse[b], &dhr32, &dhr8, &mut grads.fuse[b])?;
        let (c32, c8) = fuse_backward(&bc.fuse_s, &params.fuse[b], &dhs32, &dhs8, &mut grads.fuse[b])?;
        dr32 = a32;
        dr8 = a8;
        ds32 = c32;
        ds8 = c8;
    }
    let (ref8, src8) = pair_backward(&cache.init8, &params.init8, &dr8, &ds8, seq, &mut grads.init8)?;
    let (ref32, src32) = pair_backward(&cache.init32, &params.init32, &dr32, &ds32, seq, &mut grads.init32)?;
    Ok(LevelPair { ref32, src32, ref8, src8 })
}
