//! The full matcher: pyramid, aggregation, coarse matching and fine
//! refinement, with a forward path for inference and a loss/gradient path
//! for training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::aggregation::{
    aggregation_backward, aggregation_forward, AggregationCache, AggregationConfig, AggregationOutput, AggregationParams,
    LevelPair,
};
use crate::coarse::{cell_anchor_half, extract_matches, similarity_matrix, Correspondence, DualSoftmax, MatchSet};
use crate::error::{Error, Result};
use crate::fine::{crop_backward, crop_grid, refine_backward, refine_forward, FineParams, FineResult};
use crate::geometry::{estimate_relative_pose, grid_size_for_ratio, grid_sizes, scaled_depths, Mat3, PointPair, RansacConfig, TwoViewGeometry};
use crate::loss::{coarse_loss, fine_loss, spot_loss, total_loss, FineSample};
use crate::numerics::{add_encoding, normalized_positional_encoding, PositionalEncodingConfig};
use crate::params::{impl_parameters, Parameters};
use crate::pyramid::{pyramid_backward, pyramid_forward, standardize, Pyramid, PyramidCache, PyramidConfig, PyramidParams};
use crate::scalar::{matmul_acc, Scalar};
use crate::synth::PairTruth;
use crate::tensor::{FeatureMap, Level};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub pyramid: PyramidConfig,
    /// Attention heads of the coarse layers.
    pub heads: usize,
    /// Attention heads of the fine layers.
    pub fine_heads: usize,
    pub aggregation: AggregationConfig,
    /// Coarse similarity temperature; `None` means `1/sqrt(C)`.
    pub temperature: Option<f64>,
    /// Coarse confidence threshold.
    pub threshold: f64,
    /// Reference fine window `s_i`.
    pub fine_window: usize,
    /// Size source windows from estimated depth ratios.
    pub adaptive: bool,
    pub layer_norm: bool,
    /// `(width, height)` of training images, for the normalized encoding.
    pub train_size: (usize, usize),
    pub ransac: RansacConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            pyramid: PyramidConfig::default(),
            heads: 4,
            fine_heads: 4,
            aggregation: AggregationConfig::default(),
            temperature: None,
            threshold: 0.2,
            fine_window: 5,
            adaptive: true,
            layer_norm: false,
            train_size: (128, 128),
            ransac: RansacConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.pyramid.validate()?;
        self.aggregation.spot.validate()?;
        let (c, f) = (self.pyramid.coarse_channels(), self.pyramid.fine_channels());
        if self.heads == 0 || c % self.heads != 0 {
            return Err(Error::Config(format!("{c} coarse channels not divisible by {} heads", self.heads)));
        }
        if self.fine_heads == 0 || f % self.fine_heads != 0 {
            return Err(Error::Config(format!("{f} fine channels not divisible by {} heads", self.fine_heads)));
        }
        if c % 4 != 0 {
            return Err(Error::Config(format!("coarse channels {c} must be divisible by 4 for the positional encoding")));
        }
        if self.fine_window == 0 || self.fine_window.is_multiple_of(2) {
            return Err(Error::Config(format!("fine window {} must be odd", self.fine_window)));
        }
        if !(self.threshold >= 0.0 && self.threshold <= 1.0) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if let Some(t) = self.temperature {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("temperature {t} must be positive")));
            }
        }
        if !self.train_size.0.is_multiple_of(32) || !self.train_size.1.is_multiple_of(32) || self.train_size.0 == 0 || self.train_size.1 == 0 {
            return Err(Error::Config(format!("train size {:?} must be positive multiples of 32", self.train_size)));
        }
        if self.ransac.iterations == 0 || self.ransac.threshold.is_nan() || self.ransac.threshold <= 0.0 {
            return Err(Error::Config("ransac needs iterations >= 1 and a positive threshold".into()));
        }
        Ok(())
    }

    pub fn tau<T: Scalar>(&self) -> T {
        T::lit(self.temperature.unwrap_or(1.0 / (self.pyramid.coarse_channels() as f64).sqrt()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub pyramid: PyramidParams<T>,
    pub aggregation: AggregationParams<T>,
    pub fine: FineParams<T>,
}

impl_parameters!(ModelParams { pyramid, aggregation, fine });

impl<T: Scalar> ModelParams<T> {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.pyramid.coarse_channels();
        let mut aggregation = AggregationParams::init(c, cfg.heads, cfg.aggregation.blocks, rng);
        aggregation.set_layer_norm(cfg.layer_norm);
        let mut fine = FineParams::init(cfg.pyramid.fine_channels(), cfg.fine_heads, rng);
        fine.self_attn.layer_norm = cfg.layer_norm;
        fine.cross_attn.layer_norm = cfg.layer_norm;
        Self { pyramid: PyramidParams::init(&cfg.pyramid, rng), aggregation, fine }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_grads();
        z
    }

    /// The same parameters in another scalar type.
    pub fn cast<U: Scalar>(&self, cfg: &ModelConfig) -> ModelParams<U> {
        let mut out = ModelParams::<U>::init(cfg, &mut ChaCha8Rng::seed_from_u64(0));
        out.set_flat_values(&self.flat_values().iter().map(|v| U::lit(v.as_f64())).collect::<Vec<_>>());
        out
    }
}

/// Features of both images after aggregation, plus the coarse matrix.
pub struct Encoded<T> {
    pub ref_pyramid: Pyramid<T>,
    pub src_pyramid: Pyramid<T>,
    pub aggregation: AggregationOutput<T>,
    pub coarse: DualSoftmax<T>,
}

struct EncodeCache<T> {
    ref_pyr: PyramidCache<T>,
    src_pyr: PyramidCache<T>,
    agg: AggregationCache<T>,
}

fn add_npe<T: Scalar>(map: &mut FeatureMap<T>, cfg: &ModelConfig, stride: usize) -> Result<()> {
    let enc = normalized_positional_encoding::<T>(&PositionalEncodingConfig {
        channels: map.channels,
        train_size: (cfg.train_size.0 / stride, cfg.train_size.1 / stride),
        test_size: (map.width, map.height),
    })?;
    add_encoding(map, &enc)
}

fn check_image<T: Scalar>(img: &FeatureMap<T>, cfg: &ModelConfig) -> Result<()> {
    if img.channels != cfg.pyramid.input_channels() {
        return Err(Error::Shape(format!(
            "image has {} channels, model expects {}",
            img.channels,
            cfg.pyramid.input_channels()
        )));
    }
    Ok(())
}

fn encode_forward<T: Scalar>(
    img_ref: &FeatureMap<T>,
    img_src: &FeatureMap<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<(Encoded<T>, EncodeCache<T>)> {
    cfg.validate()?;
    check_image(img_ref, cfg)?;
    check_image(img_src, cfg)?;
    let (ref_pyramid, ref_pyr) = pyramid_forward(&standardize(img_ref), &params.pyramid)?;
    let (src_pyramid, src_pyr) = pyramid_forward(&standardize(img_src), &params.pyramid)?;
    let mut levels = LevelPair {
        ref32: ref_pyramid.thirty_second.clone(),
        src32: src_pyramid.thirty_second.clone(),
        ref8: ref_pyramid.eighth.clone(),
        src8: src_pyramid.eighth.clone(),
    };
    add_npe(&mut levels.ref32, cfg, 32)?;
    add_npe(&mut levels.src32, cfg, 32)?;
    add_npe(&mut levels.ref8, cfg, 8)?;
    add_npe(&mut levels.src8, cfg, 8)?;
    let (aggregation, agg) = aggregation_forward(&levels, &params.aggregation, &cfg.aggregation)?;
    let s = similarity_matrix(&aggregation.ref8, &aggregation.src8, cfg.tau::<T>())?;
    let coarse = DualSoftmax::new(&s)?;
    Ok((Encoded { ref_pyramid, src_pyramid, aggregation, coarse }, EncodeCache { ref_pyr, src_pyr, agg }))
}

/// Pyramid, aggregation and coarse matrix of an image pair.
pub fn encode_pair<T: Scalar>(
    img_ref: &FeatureMap<T>,
    img_src: &FeatureMap<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<Encoded<T>> {
    Ok(encode_forward(img_ref, img_src, params, cfg)?.0)
}

/// Intrinsics of the two cameras.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPair {
    pub k_ref: Mat3,
    pub k_src: Mat3,
}

/// How source fine windows are sized at inference.
#[derive(Clone, Copy)]
pub enum GridPolicy<'a> {
    /// `s_j = s_i` for every match.
    Fixed,
    /// Pose estimated from the coarse matches; falls back to `Fixed` when
    /// the pose is unavailable or degenerate.
    Estimated(&'a CameraPair),
    /// A known geometry (for controlled comparisons).
    Known(&'a TwoViewGeometry),
    /// Ground-truth magnification at each reference anchor, for pairs
    /// without a two-view geometry such as homography warps.
    KnownScale(&'a dyn PairTruth),
}

#[derive(Clone, Debug)]
pub struct MatchOutput {
    pub coarse: MatchSet,
    /// One entry per coarse match; `None` when refinement was impossible.
    pub fine: Vec<Option<FineResult>>,
    pub geometry: Option<TwoViewGeometry>,
    /// Source window size used per coarse match.
    pub grid_sizes: Vec<usize>,
}

impl MatchOutput {
    /// Refined correspondences; unrefined matches keep their coarse anchor.
    pub fn correspondences(&self) -> Vec<Correspondence> {
        self.coarse
            .correspondences()
            .into_iter()
            .zip(&self.fine)
            .map(|(mut c, f)| {
                if let Some(f) = f {
                    c.x_src = f.x;
                    c.y_src = f.y;
                }
                c
            })
            .collect()
    }
}

fn half_center(cell: usize, grid_w: usize) -> (usize, usize) {
    (cell_anchor_half(cell / grid_w), cell_anchor_half(cell % grid_w))
}

/// Source window sizes for a match set under `policy`.
pub fn source_grid_sizes(
    matches: &MatchSet,
    policy: GridPolicy<'_>,
    cfg: &ModelConfig,
) -> (Vec<usize>, Option<TwoViewGeometry>) {
    let s_i = cfg.fine_window;
    let fixed = vec![s_i; matches.len()];
    let geom = match policy {
        GridPolicy::Fixed => return (fixed, None),
        GridPolicy::KnownScale(truth) => {
            let sizes = matches
                .correspondences()
                .iter()
                .map(|c| truth.scale_ratio(c.x_ref, c.y_ref).map_or(s_i, |r| grid_size_for_ratio(r, s_i)))
                .collect();
            return (sizes, None);
        }
        GridPolicy::Known(g) => g.clone(),
        GridPolicy::Estimated(cams) => {
            let pts: Vec<PointPair> = matches
                .correspondences()
                .iter()
                .map(|c| [c.x_ref, c.y_ref, c.x_src, c.y_src])
                .collect();
            match estimate_relative_pose(&pts, &cams.k_ref, &cams.k_src, &cfg.ransac) {
                Ok(g) if g.is_valid() => g,
                Ok(g) => return (fixed, Some(g)),
                Err(_) => return (fixed, None),
            }
        }
    };
    let sizes = matches
        .correspondences()
        .iter()
        .map(|c| grid_sizes(&scaled_depths((c.x_ref, c.y_ref), (c.x_src, c.y_src), &geom), s_i))
        .collect();
    (sizes, Some(geom))
}

/// Matches an image pair end to end.
pub fn match_pair<T: Scalar>(
    img_ref: &FeatureMap<T>,
    img_src: &FeatureMap<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    policy: GridPolicy<'_>,
) -> Result<MatchOutput> {
    let enc = encode_pair(img_ref, img_src, params, cfg)?;
    let ref_grid = (enc.aggregation.ref8.height, enc.aggregation.ref8.width);
    let src_grid = (enc.aggregation.src8.height, enc.aggregation.src8.width);
    let coarse = extract_matches(&enc.coarse.probs(), cfg.threshold, ref_grid, src_grid)?;
    let policy = if cfg.adaptive { policy } else { GridPolicy::Fixed };
    let (sizes, geometry) = source_grid_sizes(&coarse, policy, cfg);
    let fine = refine_matches(&enc, &coarse, &sizes, params, cfg)?;
    Ok(MatchOutput { coarse, fine, geometry, grid_sizes: sizes })
}

/// Fine stage for given coarse matches and source window sizes.
pub fn refine_matches<T: Scalar>(
    enc: &Encoded<T>,
    coarse: &MatchSet,
    sizes: &[usize],
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<Vec<Option<FineResult>>> {
    let (rw, sw) = (coarse.ref_grid.1, coarse.src_grid.1);
    coarse
        .matches
        .par_iter()
        .zip(sizes)
        .map(|(m, &s_j)| {
            let a = crop_grid(&enc.ref_pyramid.half, half_center(m.i, rw), cfg.fine_window)?;
            let b = crop_grid(&enc.src_pyramid.half, half_center(m.j, sw), s_j)?;
            match refine_forward(&a, &b, &params.fine) {
                Ok((r, _)) => Ok(Some(r)),
                Err(Error::NoRefinement) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Ground-truth fine target for one coarse pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FineTarget {
    pub i: usize,
    pub j: usize,
    /// True source position of the reference anchor, image pixels.
    pub target: (f64, f64),
    /// Teacher-forced source window size.
    pub s_j: usize,
    /// Fixed loss weighting variance; `None` uses the (detached) heatmap
    /// variance.
    pub weight_variance: Option<f64>,
}

/// Supervision for one training pair.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Supervision {
    pub coarse: Vec<(usize, usize)>,
    pub fine: Vec<FineTarget>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub spot: f64,
    pub coarse: f64,
    pub fine: f64,
}

/// Total loss of a pair and, when `grads` is given, its parameter gradient
/// accumulated into `grads`.
pub fn pair_loss<T: Scalar>(
    img_ref: &FeatureMap<T>,
    img_src: &FeatureMap<T>,
    sup: &Supervision,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    grads: Option<&mut ModelParams<T>>,
) -> Result<LossBreakdown> {
    let (enc, cache) = encode_forward(img_ref, img_src, params, cfg)?;
    let (l_s, d_spot) = spot_loss(&enc.aggregation.spot, &sup.coarse);
    let (l_c, d_coarse) = coarse_loss(&enc.coarse, &sup.coarse);

    let (rw, sw) = (enc.aggregation.ref8.width, enc.aggregation.src8.width);
    let s_i = cfg.fine_window;
    let mut fine_runs = Vec::with_capacity(sup.fine.len());
    let mut samples = Vec::with_capacity(sup.fine.len());
    for t in &sup.fine {
        let a = crop_grid(&enc.ref_pyramid.half, half_center(t.i, rw), s_i)?;
        let b = crop_grid(&enc.src_pyramid.half, half_center(t.j, sw), if cfg.adaptive { t.s_j } else { s_i })?;
        if !b.spans(t.target.0, t.target.1) {
            continue;
        }
        match refine_forward(&a, &b, &params.fine) {
            Ok((r, c)) => {
                samples.push(FineSample { predicted: (r.x, r.y), variance: t.weight_variance.unwrap_or(r.variance), target: t.target });
                fine_runs.push((a, b, c));
            }
            Err(Error::NoRefinement) => {}
            Err(e) => return Err(e),
        }
    }
    let (l_f, d_xy) = fine_loss(&samples);
    let total = total_loss(l_s.as_f64(), l_c.as_f64(), l_f);
    let breakdown = LossBreakdown { total, spot: l_s.as_f64(), coarse: l_c.as_f64(), fine: l_f };
    if !total.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let Some(grads) = grads else { return Ok(breakdown) };

    let mut d_half_ref = enc.ref_pyramid.half.zeros_like();
    let mut d_half_src = enc.src_pyramid.half.zeros_like();
    for ((a, b, c), &g) in fine_runs.iter().zip(&d_xy) {
        let (da, db) = refine_backward(c, &params.fine, g, &mut grads.fine)?;
        crop_backward(a, &da, &mut d_half_ref);
        crop_backward(b, &db, &mut d_half_src);
    }

    let (r8, s8) = (&enc.aggregation.ref8, &enc.aggregation.src8);
    let (n, m, ch) = (r8.tokens(), s8.tokens(), r8.channels);
    let tau = cfg.tau::<T>();
    let mut ds = d_coarse;
    ds.scale(tau);
    let mut d_r8 = r8.zeros_like();
    let mut d_s8 = s8.zeros_like();
    matmul_acc(n, m, ch, ds.data(), false, &s8.data, false, &mut d_r8.data);
    matmul_acc(m, n, ch, ds.data(), true, &r8.data, false, &mut d_s8.data);
    let d_spot: Vec<_> = d_spot.into_iter().map(|(a, b)| (Some(a), Some(b))).collect();
    let d_levels = aggregation_backward(&cache.agg, &params.aggregation, &d_r8, &d_s8, &d_spot, &mut grads.aggregation)?;

    let g_ref = Pyramid { half: d_half_ref, eighth: d_levels.ref8, thirty_second: d_levels.ref32 };
    let g_src = Pyramid { half: d_half_src, eighth: d_levels.src8, thirty_second: d_levels.src32 };
    pyramid_backward(&cache.ref_pyr, &params.pyramid, &g_ref, &mut grads.pyramid)?;
    pyramid_backward(&cache.src_pyr, &params.pyramid, &g_src, &mut grads.pyramid)?;
    Ok(breakdown)
}

/// Grayscale image map from row-major intensities.
pub fn image_map<T: Scalar>(height: usize, width: usize, pixels: &[f64]) -> Result<FeatureMap<T>> {
    FeatureMap::from_vec(height, width, 1, Level::FULL, pixels.iter().map(|&v| T::lit(v)).collect())
}
