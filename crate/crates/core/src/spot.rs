//! Spot-guided attention: each query pixel attends only to small source
//! regions around the matched locations of itself and its most similar,
//! most confident neighbours.
//!
//! Selection is discrete and carries no gradient; gradients reach the
//! features through the attention values and through the supervised
//! matching matrix.

use std::fmt::Write as _;

use crate::attention::{cross_attention_layer, AttentionKind, AttentionLayerParams};
use crate::coarse::{argmax, similarity_matrix, DualSoftmax};
use crate::error::{Error, Result};
use crate::numerics::softmax_in_place;
use crate::scalar::Scalar;
use crate::sparse::SparseAttentionPlan;
use crate::tensor::{FeatureMap, Tensor};

/// How the cross-image matching matrix is normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpotMatrix {
    /// Row softmax times column softmax.
    Dual,
    /// Row softmax alone.
    Row,
}

/// Which features the neighbour similarity compares against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedSimilarity {
    /// The query's own neighbours in the same image.
    SameImage,
    /// The query feature against the other image's features at the
    /// neighbour positions (requires equal grid sizes).
    CrossImage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpotConfig {
    /// Side `l` of the local region (odd).
    pub window: usize,
    /// Number `k` of neighbours picked as extra seeds.
    pub seeds: usize,
    /// Similarity temperature; `None` means `1/sqrt(channels)`.
    pub temperature: Option<f64>,
    pub matrix: SpotMatrix,
    pub similarity: SeedSimilarity,
}

impl Default for SpotConfig {
    fn default() -> Self {
        Self { window: 5, seeds: 4, temperature: None, matrix: SpotMatrix::Dual, similarity: SeedSimilarity::SameImage }
    }
}

impl SpotConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::Config(format!("spot window must be odd and >= 3, got {}", self.window)));
        }
        if self.seeds == 0 {
            return Err(Error::Config("spot seed count must be >= 1".into()));
        }
        if let Some(t) = self.temperature {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("spot temperature must be positive, got {t}")));
            }
        }
        Ok(())
    }

    pub fn tau<T: Scalar>(&self, channels: usize) -> T {
        T::lit(self.temperature.unwrap_or(1.0 / (channels as f64).sqrt()))
    }
}

/// Pixel indices of the `l x l` window around `center` clipped to a
/// `h x w` grid, in raster order (center included).
pub fn window_indices(h: usize, w: usize, center: usize, l: usize) -> Vec<usize> {
    let r = l / 2;
    let (cy, cx) = (center / w, center % w);
    let (y0, y1) = (cy.saturating_sub(r), (cy + r).min(h - 1));
    let (x0, x1) = (cx.saturating_sub(r), (cx + r).min(w - 1));
    let mut out = Vec::with_capacity((y1 - y0 + 1) * (x1 - x0 + 1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            out.push(y * w + x);
        }
    }
    out
}

/// The clipped window around `p` without `p` itself.
pub fn neighbors(h: usize, w: usize, p: usize, l: usize) -> Vec<usize> {
    window_indices(h, w, p, l).into_iter().filter(|&q| q != p).collect()
}

/// Spot matching matrix between two 1/8 maps.
pub fn matching_matrix_parts<T: Scalar>(
    f_ref: &FeatureMap<T>,
    f_src: &FeatureMap<T>,
    tau: T,
    kind: SpotMatrix,
) -> Result<DualSoftmax<T>> {
    let s = similarity_matrix(f_ref, f_src, tau)?;
    match kind {
        SpotMatrix::Dual => DualSoftmax::new(&s),
        SpotMatrix::Row => DualSoftmax::row_only(&s),
    }
}

/// `P_s(i, j) = rowsoftmax(tau S)(i, j) * colsoftmax(tau S)(i, j)`.
pub fn matching_matrix<T: Scalar>(f_ref: &FeatureMap<T>, f_src: &FeatureMap<T>, tau: T) -> Result<Tensor<T>> {
    Ok(matching_matrix_parts(f_ref, f_src, tau, SpotMatrix::Dual)?.probs())
}

/// Softmax over `<F(p), F(q)>` for the neighbours `q` of `p`, returned with
/// the neighbour indices.
pub fn similarity_scores<T: Scalar>(f: &FeatureMap<T>, p: usize, l: usize) -> (Vec<usize>, Vec<T>) {
    scores_against(f, f, p, l)
}

/// Like [`similarity_scores`] but against another map's features at the
/// neighbour positions.
pub fn cross_similarity_scores<T: Scalar>(f_query: &FeatureMap<T>, f_other: &FeatureMap<T>, p: usize, l: usize) -> (Vec<usize>, Vec<T>) {
    scores_against(f_query, f_other, p, l)
}

fn scores_against<T: Scalar>(f: &FeatureMap<T>, g: &FeatureMap<T>, p: usize, l: usize) -> (Vec<usize>, Vec<T>) {
    let nb = neighbors(f.height, f.width, p, l);
    let fp = f.token(p);
    let mut s: Vec<T> = nb.iter().map(|&q| fp.iter().zip(g.token(q)).map(|(&a, &b)| a * b).sum()).collect();
    softmax_in_place(&mut s);
    (nb, s)
}

/// Row maxima and first-index argmaxes of a matching matrix.
pub fn confidence_and_loc<T: Scalar>(p_s: &Tensor<T>) -> (Vec<T>, Vec<usize>) {
    let cols = p_s.shape()[1];
    p_s.data()
        .chunks(cols.max(1))
        .map(|row| argmax(row.iter().copied()).map(|(i, v)| (v, i)).unwrap_or((T::zero(), 0)))
        .unzip()
}

/// Seeds of one query pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpotSelection {
    pub query: usize,
    /// `p` first, then the picked neighbours in ascending pixel order.
    pub topk: Vec<usize>,
    /// `Loc` of each entry of `topk`, aligned.
    pub seeds: Vec<usize>,
}

/// Picks the `k` neighbours with the largest `S_sim * S_conf` (stable: ties
/// keep the lower pixel index) and maps `{p} + picks` through `loc`.
///
/// `sim` is aligned with `neighbors`; `conf` and `loc` are indexed by pixel.
pub fn select_seeds<T: Scalar>(
    p: usize,
    neighbors: &[usize],
    sim: &[T],
    conf: &[T],
    loc: &[usize],
    k: usize,
) -> SpotSelection {
    let mut order: Vec<usize> = (0..neighbors.len()).collect();
    let score = |i: usize| sim[i] * conf[neighbors[i]];
    order.sort_by(|&a, &b| score(b).partial_cmp(&score(a)).unwrap_or(std::cmp::Ordering::Equal));
    let mut picks: Vec<usize> = order.into_iter().take(k).map(|i| neighbors[i]).collect();
    picks.sort_unstable();
    let mut topk = Vec::with_capacity(picks.len() + 1);
    topk.push(p);
    topk.extend(picks);
    let seeds = topk.iter().map(|&q| loc[q]).collect();
    SpotSelection { query: p, topk, seeds }
}

/// Key set of one selection: union of clipped windows around its seeds,
/// sorted.
pub fn spot_keys(sel: &SpotSelection, l: usize, src_dims: (usize, usize)) -> Vec<usize> {
    let mut keys: Vec<usize> =
        sel.seeds.iter().flat_map(|&s| window_indices(src_dims.0, src_dims.1, s, l)).collect();
    keys.sort_unstable();
    keys.dedup();
    keys
}

/// One plan group per selection (selections must be ordered by query).
pub fn build_spot_plan(selections: &[SpotSelection], l: usize, src_dims: (usize, usize)) -> Result<SparseAttentionPlan> {
    let groups = selections.iter().map(|s| spot_keys(s, l, src_dims)).collect();
    SparseAttentionPlan::from_groups(groups, src_dims.0 * src_dims.1)
}

/// Selections for every pixel of `f_query` given the query-to-key matching
/// matrix `p_s` (`[query tokens, key tokens]`).
pub fn select_all<T: Scalar>(
    f_query: &FeatureMap<T>,
    f_key: &FeatureMap<T>,
    p_s: &Tensor<T>,
    cfg: &SpotConfig,
) -> Result<Vec<SpotSelection>> {
    if p_s.shape() != [f_query.tokens(), f_key.tokens()] {
        return Err(Error::Shape(format!(
            "matching matrix {:?} does not fit {} x {} tokens",
            p_s.shape(),
            f_query.tokens(),
            f_key.tokens()
        )));
    }
    let cross = cfg.similarity == SeedSimilarity::CrossImage;
    if cross && (f_query.height, f_query.width) != (f_key.height, f_key.width) {
        return Err(Error::Shape("cross-image seed similarity needs equal grid sizes".into()));
    }
    let (conf, loc) = confidence_and_loc(p_s);
    Ok((0..f_query.tokens())
        .map(|p| {
            let (nb, sim) = if cross {
                cross_similarity_scores(f_query, f_key, p, cfg.window)
            } else {
                similarity_scores(f_query, p, cfg.window)
            };
            select_seeds(p, &nb, &sim, &conf, &loc, cfg.seeds)
        })
        .collect())
}

/// Plan for `f_query` attending to `f_key` under matching matrix `p_s`.
pub fn spot_plan<T: Scalar>(
    f_query: &FeatureMap<T>,
    f_key: &FeatureMap<T>,
    p_s: &Tensor<T>,
    cfg: &SpotConfig,
) -> Result<(SparseAttentionPlan, Vec<SpotSelection>)> {
    let sel = select_all(f_query, f_key, p_s, cfg)?;
    let plan = build_spot_plan(&sel, cfg.window, (f_key.height, f_key.width))?;
    Ok((plan, sel))
}

/// One spot-guided update of `f_ref` from `f_src`; returns the updated map
/// and the matching matrix used for selection.
pub fn spot_guided_cross_attention<T: Scalar>(
    f_ref: &FeatureMap<T>,
    f_src: &FeatureMap<T>,
    params: &AttentionLayerParams<T>,
    cfg: &SpotConfig,
) -> Result<(FeatureMap<T>, Tensor<T>)> {
    cfg.validate()?;
    let tau = cfg.tau::<T>(f_ref.channels);
    let p_s = matching_matrix_parts(f_ref, f_src, tau, cfg.matrix)?.probs();
    let (plan, _) = spot_plan(f_ref, f_src, &p_s, cfg)?;
    let out = cross_attention_layer(f_ref, f_src, params, AttentionKind::Sparse(&plan))?;
    Ok((out, p_s))
}

/// `p_y p_x : seed_y seed_x ...` per query.
pub fn dump_selections(selections: &[SpotSelection], query_width: usize, key_width: usize) -> String {
    let mut s = String::new();
    for sel in selections {
        let _ = write!(s, "{} {} :", sel.query / query_width, sel.query % query_width);
        for &seed in &sel.seeds {
            let _ = write!(s, " {} {}", seed / key_width, seed % key_width);
        }
        s.push('\n');
    }
    s
}
