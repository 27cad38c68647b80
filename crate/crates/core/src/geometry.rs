//! Two-view geometry for depth-adaptive fine grids: relative pose from
//! coarse matches, scale-ambiguous depths per match and the source-side
//! grid size.
//!
//! Conventions: a point `X_i` in the reference camera maps to
//! `X_j = R X_i + T` in the source camera, so with `p_i = R K_i^-1 x_i` and
//! `p_j = K_j^-1 x_j` every match satisfies `d_j p_j = d_i p_i + alpha T`.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Mat3 = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;

/// Pixel correspondence `(x_ref, y_ref, x_src, y_src)`.
pub type PointPair = [f64; 4];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Sampson distance threshold in pixels.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { iterations: 1000, threshold: 1.5, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoViewGeometry {
    pub k_ref: Mat3,
    pub k_src: Mat3,
    pub rotation: Mat3,
    /// Unit-length translation.
    pub translation: Vec3,
    /// One flag per input match; empty when built from a known pose.
    pub inliers: Vec<bool>,
    /// Translation is not observable from the matches (pure rotation).
    pub degenerate: bool,
}

impl TwoViewGeometry {
    /// Geometry from a known pose; `t` is normalized to unit length.
    pub fn from_pose(k_ref: Mat3, k_src: Mat3, rotation: Mat3, t: Vec3) -> Result<Self> {
        let n = t.norm();
        if !n.is_finite() || n <= 0.0 {
            return Err(Error::PoseUnavailable("zero translation".into()));
        }
        Ok(Self { k_ref, k_src, rotation, translation: t / n, inliers: Vec::new(), degenerate: false })
    }

    pub fn essential(&self) -> Mat3 {
        skew(&self.translation) * self.rotation
    }

    /// Fundamental matrix mapping reference pixels to source epipolar lines.
    pub fn fundamental(&self) -> Result<Mat3> {
        let ki = inverse(&self.k_ref)?;
        let kj = inverse(&self.k_src)?;
        Ok(kj.transpose() * self.essential() * ki)
    }

    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }

    /// Usable for depth recovery.
    pub fn is_valid(&self) -> bool {
        !self.degenerate
    }
}

pub fn skew(t: &Vec3) -> Mat3 {
    Mat3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

fn inverse(k: &Mat3) -> Result<Mat3> {
    k.try_inverse().ok_or_else(|| Error::Config("singular intrinsics matrix".into()))
}

/// Rotation angle of `a^T b` in radians.
pub fn rotation_angle(a: &Mat3, b: &Mat3) -> f64 {
    let r = a.transpose() * b;
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Nine whitespace-separated numbers, row-major.
pub fn parse_intrinsics(text: &str) -> Result<Mat3> {
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format { what: "intrinsics", detail: e.to_string() })?;
    if vals.len() != 9 {
        return Err(Error::Format { what: "intrinsics", detail: format!("expected 9 numbers, found {}", vals.len()) });
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format { what: "intrinsics", detail: "non-finite entry".into() });
    }
    let k = Mat3::from_row_slice(&vals);
    inverse(&k)?;
    Ok(k)
}

pub fn format_intrinsics(k: &Mat3) -> String {
    let mut s = String::new();
    for r in 0..3 {
        let row: Vec<String> = (0..3).map(|c| format!("{}", k[(r, c)])).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

/// Squared Sampson distance of a pixel pair under fundamental matrix `f`.
pub fn sampson_sq(f: &Mat3, p: &PointPair) -> f64 {
    let xi = Vec3::new(p[0], p[1], 1.0);
    let xj = Vec3::new(p[2], p[3], 1.0);
    let fx = f * xi;
    let ftx = f.transpose() * xj;
    let num = xj.dot(&fx);
    let den = fx.x * fx.x + fx.y * fx.y + ftx.x * ftx.x + ftx.y * ftx.y;
    if den <= 0.0 {
        return if num == 0.0 { 0.0 } else { f64::INFINITY };
    }
    num * num / den
}

/// Similarity transform moving points to zero mean and mean distance sqrt(2).
fn hartley(points: &[(f64, f64)]) -> Mat3 {
    let n = points.len() as f64;
    let (mx, my) = points.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (mx, my) = (mx / n, my / n);
    let md = points.iter().map(|p| ((p.0 - mx).powi(2) + (p.1 - my).powi(2)).sqrt()).sum::<f64>() / n;
    let s = if md > 0.0 { std::f64::consts::SQRT_2 / md } else { 1.0 };
    Mat3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0)
}

/// Normalized eight-point fit on normalized camera coordinates, projected
/// onto the essential manifold.
fn eight_point(ni: &[Vec3], nj: &[Vec3]) -> Option<Mat3> {
    let n = ni.len();
    if n < 8 {
        return None;
    }
    let pi: Vec<(f64, f64)> = ni.iter().map(|v| (v.x / v.z, v.y / v.z)).collect();
    let pj: Vec<(f64, f64)> = nj.iter().map(|v| (v.x / v.z, v.y / v.z)).collect();
    let ti = hartley(&pi);
    let tj = hartley(&pj);
    let rows = n.max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for k in 0..n {
        let xi = ti * Vec3::new(pi[k].0, pi[k].1, 1.0);
        let xj = tj * Vec3::new(pj[k].0, pj[k].1, 1.0);
        for r in 0..3 {
            for c in 0..3 {
                a[(k, r * 3 + c)] = xj[r] * xi[c];
            }
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&x, &y| sv[x].total_cmp(&sv[y]));
    let min = order[0];
    let e_n = Mat3::from_fn(|r, c| vt[(min, r * 3 + c)]);
    let e = tj.transpose() * e_n * ti;
    let s = e.svd(true, true);
    let (u, v_t) = (s.u?, s.v_t?);
    let mut d = s.singular_values;
    let m = (d[0] + d[1]) / 2.0;
    // singular values come sorted descending
    d = Vec3::new(m, m, 0.0);
    let e = u * Mat3::from_diagonal(&d) * v_t;
    let norm = e.norm();
    if norm.is_nan() || norm <= 0.0 {
        return None;
    }
    Some(e / norm)
}

/// The four `(R, t)` factorizations of an essential matrix.
fn decompose(e: &Mat3) -> Option<[(Mat3, Vec3); 4]> {
    let s = e.svd(true, true);
    let mut u = s.u?;
    let mut v_t = s.v_t?;
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v_t;
    let r2 = u * w.transpose() * v_t;
    let t: Vec3 = u.column(2).into();
    Some([(r1, t), (r1, -t), (r2, t), (r2, -t)])
}

/// Least-squares depths `(d_i, d_j)` with `d_j p_j = d_i p_i + t`.
fn triangulate(p_i: &Vec3, p_j: &Vec3, t: &Vec3) -> Option<(f64, f64)> {
    // [-p_i p_j] (d_i, d_j)^T = t
    let a11 = p_i.dot(p_i);
    let a12 = -p_i.dot(p_j);
    let a22 = p_j.dot(p_j);
    let b1 = -p_i.dot(t);
    let b2 = p_j.dot(t);
    let det = a11 * a22 - a12 * a12;
    if det.abs() <= 1e-14 * a11 * a22 {
        return None;
    }
    Some(((a22 * b1 - a12 * b2) / det, (a11 * b2 - a12 * b1) / det))
}

fn cheirality(r: &Mat3, t: &Vec3, ni: &[Vec3], nj: &[Vec3]) -> usize {
    ni.iter()
        .zip(nj)
        .filter(|(a, b)| matches!(triangulate(&(r * *a), b, t), Some((di, dj)) if di > 0.0 && dj > 0.0))
        .count()
}

/// Median angle between the rotated reference ray and the source ray.
fn median_parallax(r: &Mat3, ni: &[Vec3], nj: &[Vec3]) -> f64 {
    let mut a: Vec<f64> = ni
        .iter()
        .zip(nj)
        .map(|(x, y)| {
            let p = (r * x).normalize();
            let q = y.normalize();
            p.cross(&q).norm().atan2(p.dot(&q))
        })
        .collect();
    a.sort_by(f64::total_cmp);
    a[a.len() / 2]
}

const REFITS: usize = 5;

fn count_inliers(f: &Mat3, pts: &[PointPair], thr_sq: f64) -> Vec<bool> {
    pts.iter().map(|p| sampson_sq(f, p) <= thr_sq).collect()
}

/// Relative pose from pixel correspondences: seeded RANSAC over the
/// normalized eight-point solver with Sampson inliers, a least-squares refit
/// on the inliers and cheirality voting among the four factorizations.
pub fn estimate_relative_pose(pts: &[PointPair], k_ref: &Mat3, k_src: &Mat3, cfg: &RansacConfig) -> Result<TwoViewGeometry> {
    if pts.len() < 8 {
        return Err(Error::PoseUnavailable(format!("{} matches, need at least 8", pts.len())));
    }
    let ki = inverse(k_ref)?;
    let kj = inverse(k_src)?;
    let ni: Vec<Vec3> = pts.iter().map(|p| ki * Vec3::new(p[0], p[1], 1.0)).collect();
    let nj: Vec<Vec3> = pts.iter().map(|p| kj * Vec3::new(p[2], p[3], 1.0)).collect();
    let to_f = |e: &Mat3| kj.transpose() * e * ki;
    let thr_sq = cfg.threshold * cfg.threshold;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cost = |e: &Mat3| -> f64 {
        let f = to_f(e);
        pts.iter().map(|p| sampson_sq(&f, p).min(thr_sq)).sum()
    };
    let mut best: Option<(f64, Mat3)> = None;
    for _ in 0..cfg.iterations.max(1) {
        let idx = sample(&mut rng, pts.len(), 8).into_vec();
        let si: Vec<Vec3> = idx.iter().map(|&k| ni[k]).collect();
        let sj: Vec<Vec3> = idx.iter().map(|&k| nj[k]).collect();
        let Some(e) = eight_point(&si, &sj) else { continue };
        let c = cost(&e);
        if best.as_ref().is_none_or(|(b, _)| c < *b) {
            best = Some((c, e));
        }
    }
    let (mut best_cost, mut e) = best.ok_or_else(|| Error::PoseUnavailable("no non-degenerate sample".into()))?;
    let pick = |mask: &[bool], v: &[Vec3]| -> Vec<Vec3> { v.iter().zip(mask).filter(|(_, &m)| m).map(|(x, _)| *x).collect() };
    let mut inliers = count_inliers(&to_f(&e), pts, thr_sq);
    for _ in 0..REFITS {
        let Some(e2) = eight_point(&pick(&inliers, &ni), &pick(&inliers, &nj)) else { break };
        let c = cost(&e2);
        if c >= best_cost {
            break;
        }
        best_cost = c;
        e = e2;
        inliers = count_inliers(&to_f(&e), pts, thr_sq);
    }
    let n_in = inliers.iter().filter(|&&b| b).count();
    if n_in < 8 {
        return Err(Error::PoseUnavailable(format!("{n_in} inliers, need at least 8")));
    }
    let (ii, ij) = (pick(&inliers, &ni), pick(&inliers, &nj));
    let cands = decompose(&e).ok_or_else(|| Error::PoseUnavailable("essential factorization failed".into()))?;
    let mut best_c = 0;
    let mut best_votes = 0;
    for (c, (r, t)) in cands.iter().enumerate() {
        let v = cheirality(r, t, &ii, &ij);
        if v > best_votes {
            best_votes = v;
            best_c = c;
        }
    }
    let (rotation, translation) = cands[best_c];
    let focal = (k_ref[(0, 0)].abs() + k_ref[(1, 1)].abs() + k_src[(0, 0)].abs() + k_src[(1, 1)].abs()) / 4.0;
    let pixel_angle = cfg.threshold / focal.max(1e-12);
    let parallax = median_parallax(&cands[0].0, &ii, &ij).min(median_parallax(&cands[2].0, &ii, &ij));
    let degenerate = parallax < pixel_angle;
    Ok(TwoViewGeometry {
        k_ref: *k_ref,
        k_src: *k_src,
        rotation,
        translation: translation.normalize(),
        inliers,
        degenerate,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaledDepthPair {
    pub d_i_over_alpha: f64,
    pub d_j_over_alpha: f64,
    pub valid: bool,
    /// Cross-product components that passed the denominator test, per side.
    pub components: (usize, usize),
}

impl ScaledDepthPair {
    pub const INVALID: ScaledDepthPair =
        ScaledDepthPair { d_i_over_alpha: 0.0, d_j_over_alpha: 0.0, valid: false, components: (0, 0) };
}

/// Mean over components of `num / den` where `|den|` exceeds `1e-8` of the
/// largest `|den|`.
fn masked_ratio_mean(num: &Vec3, den: &Vec3) -> (f64, usize) {
    let max = den.amax();
    let eps = 1e-8 * max;
    let mut sum = 0.0;
    let mut n = 0;
    for k in 0..3 {
        if den[k].abs() > eps {
            sum += num[k] / den[k];
            n += 1;
        }
    }
    if n == 0 {
        (f64::NAN, 0)
    } else {
        (sum / n as f64, n)
    }
}

/// Depths up to the translation scale for one match, from the cross products
/// of `d_j p_j = d_i p_i + T`. Uses `geom.translation` as `T`.
pub fn scaled_depths(x_i: (f64, f64), x_j: (f64, f64), geom: &TwoViewGeometry) -> ScaledDepthPair {
    let Ok(ki) = inverse(&geom.k_ref) else { return ScaledDepthPair::INVALID };
    let Ok(kj) = inverse(&geom.k_src) else { return ScaledDepthPair::INVALID };
    let p_i = geom.rotation * ki * Vec3::new(x_i.0, x_i.1, 1.0);
    let p_j = kj * Vec3::new(x_j.0, x_j.1, 1.0);
    depths_from_rays(&p_i, &p_j, &geom.translation)
}

/// [`scaled_depths`] on rays `p_i = R K_i^-1 x_i`, `p_j = K_j^-1 x_j`.
pub fn depths_from_rays(p_i: &Vec3, p_j: &Vec3, t: &Vec3) -> ScaledDepthPair {
    let (dj, nj) = masked_ratio_mean(&t.cross(p_i), &p_j.cross(p_i));
    let (di, ni) = masked_ratio_mean(&(-t).cross(p_j), &p_i.cross(p_j));
    let valid = nj > 0 && ni > 0 && di > 0.0 && dj > 0.0 && di.is_finite() && dj.is_finite();
    if !valid {
        return ScaledDepthPair { components: (ni, nj), ..ScaledDepthPair::INVALID };
    }
    ScaledDepthPair { d_i_over_alpha: di, d_j_over_alpha: dj, valid: true, components: (ni, nj) }
}

pub const DEFAULT_GRID: usize = 5;
pub const MAX_GRID_RATIO: f64 = 3.0;

/// Source grid size: the depth ratio clamped into `[1, 3]` times `s_i`,
/// rounded to the nearest odd integer with ties going up. Invalid pairs
/// keep `s_i`.
pub fn grid_sizes(pair: &ScaledDepthPair, s_i: usize) -> usize {
    if !pair.valid {
        return s_i;
    }
    let r = (pair.d_i_over_alpha / pair.d_j_over_alpha).clamp(1.0, MAX_GRID_RATIO);
    odd_size(r * s_i as f64).max(s_i)
}

/// [`grid_sizes`] for a known depth ratio `d_i / d_j`.
pub fn grid_size_for_ratio(ratio: f64, s_i: usize) -> usize {
    let pair = ScaledDepthPair { d_i_over_alpha: ratio, d_j_over_alpha: 1.0, valid: ratio > 0.0 && ratio.is_finite(), components: (3, 3) };
    grid_sizes(&pair, s_i)
}

/// Nearest odd integer to `x`, ties up. Values within `1e-9` relative of an
/// even integer count as ties so that rescaling roundoff cannot flip them.
pub fn odd_size(x: f64) -> usize {
    let near = x.round();
    let x = if (x - near).abs() <= 1e-9 * x.abs() { near } else { x };
    (2.0 * (x / 2.0).floor() + 1.0).max(1.0) as usize
}

/// Reference and source crop centers (half-resolution pixels) and sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridPair {
    pub ref_center: (usize, usize),
    pub s_i: usize,
    pub src_center: (usize, usize),
    pub s_j: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn rot(axis: Vec3, angle: f64) -> Mat3 {
        *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).matrix()
    }

    fn k(f: f64) -> Mat3 {
        Mat3::new(f, 0.0, 64.0, 0.0, f, 48.0, 0.0, 0.0, 1.0)
    }

    /// Random scene points in front of both cameras, projected.
    fn scene(r: &Mat3, t: &Vec3, kk: &Mat3, n: usize, seed: u64) -> Vec<PointPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        while out.len() < n {
            let x = Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-1.5..1.5), rng.gen_range(4.0..9.0));
            let y = r * x + t;
            if y.z <= 0.1 {
                continue;
            }
            let a = kk * x;
            let b = kk * y;
            out.push([a.x / a.z, a.y / a.z, b.x / b.z, b.y / b.z]);
        }
        out
    }

    #[test]
    fn depth_on_optical_axis() {
        let g = TwoViewGeometry::from_pose(Mat3::identity(), Mat3::identity(), Mat3::identity(), Vec3::new(-1.0, 0.0, 0.0)).unwrap();
        let d = scaled_depths((0.0, 0.0), (-0.2, 0.0), &g);
        assert!(d.valid);
        assert!((d.d_i_over_alpha - 5.0).abs() < 1e-12);
        assert!((d.d_j_over_alpha - 5.0).abs() < 1e-12);
        assert_eq!(d.components, (1, 1));
    }

    #[test]
    fn forward_motion_on_axis_is_invalid() {
        let g = TwoViewGeometry::from_pose(Mat3::identity(), Mat3::identity(), Mat3::identity(), Vec3::new(0.0, 0.0, -1.0)).unwrap();
        let d = scaled_depths((0.0, 0.0), (0.0, 0.0), &g);
        assert!(!d.valid);
        assert_eq!(d.components, (0, 0));
    }

    #[test]
    fn exact_depths_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = rot(Vec3::new(0.1, 1.0, 0.2), 0.15);
        let t_true = Vec3::new(0.8, -0.1, 0.2);
        let alpha = t_true.norm();
        let g = TwoViewGeometry::from_pose(k(100.0), k(100.0), r, t_true).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let x = Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-1.5..1.5), rng.gen_range(4.0..9.0));
            let y = r * x + t_true;
            let a = k(100.0) * x;
            let b = k(100.0) * y;
            let d = scaled_depths((a.x / a.z, a.y / a.z), (b.x / b.z, b.y / b.z), &g);
            assert!(d.valid);
            worst = worst.max((d.d_i_over_alpha * alpha / x.z - 1.0).abs());
            worst = worst.max((d.d_j_over_alpha * alpha / y.z - 1.0).abs());
        }
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn grid_size_examples() {
        let p = |a, b| ScaledDepthPair { d_i_over_alpha: a, d_j_over_alpha: b, valid: true, components: (3, 3) };
        assert_eq!(grid_sizes(&p(6.0, 2.0), 5), 15);
        assert_eq!(grid_sizes(&p(2.0, 6.0), 5), 5);
        assert_eq!(grid_sizes(&p(4.0, 2.0), 5), 11);
        assert_eq!(grid_sizes(&ScaledDepthPair::INVALID, 5), 5);
        assert_eq!(odd_size(9.99), 9);
        assert_eq!(odd_size(12.0), 13);
        assert_eq!(odd_size(10.0 - 1e-12), 11);
    }

    #[test]
    fn pose_from_exact_matches() {
        let r = rot(Vec3::new(0.3, 1.0, -0.1), 0.2);
        let t = Vec3::new(1.0, 0.2, -0.3);
        let pts = scene(&r, &t, &k(120.0), 20, 1);
        let g = estimate_relative_pose(&pts, &k(120.0), &k(120.0), &RansacConfig::default()).unwrap();
        assert!(!g.degenerate);
        assert!(rotation_angle(&g.rotation, &r) < 1e-4);
        assert!((g.translation - t.normalize()).norm() < 1e-4);
        assert!((g.rotation.transpose() * g.rotation - Mat3::identity()).amax() < 1e-8);
        assert!((g.rotation.determinant() - 1.0).abs() < 1e-8);
        assert_eq!(g.inlier_count(), 20);
    }

    #[test]
    fn identity_motion_is_degenerate() {
        let pts: Vec<PointPair> = scene(&Mat3::identity(), &Vec3::zeros(), &k(100.0), 30, 2);
        let g = estimate_relative_pose(&pts, &k(100.0), &k(100.0), &RansacConfig::default()).unwrap();
        assert!(g.degenerate);
    }

    #[test]
    fn pure_rotation_is_degenerate() {
        let r = rot(Vec3::new(0.0, 1.0, 0.0), 0.1);
        let pts = scene(&r, &Vec3::zeros(), &k(100.0), 30, 4);
        let g = estimate_relative_pose(&pts, &k(100.0), &k(100.0), &RansacConfig::default()).unwrap();
        assert!(g.degenerate);
    }

    #[test]
    fn outliers_are_rejected() {
        let r = rot(Vec3::new(0.0, 1.0, 0.1), 0.1);
        let t = Vec3::new(-1.0, 0.1, 0.1);
        let mut pts = scene(&r, &t, &k(100.0), 140, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n_out = 42;
        for p in pts.iter_mut().take(n_out) {
            *p = [rng.gen_range(0.0..128.0), rng.gen_range(0.0..96.0), rng.gen_range(0.0..128.0), rng.gen_range(0.0..96.0)];
        }
        let g = estimate_relative_pose(&pts, &k(100.0), &k(100.0), &RansacConfig::default()).unwrap();
        let recall = g.inliers[n_out..].iter().filter(|&&b| b).count() as f64 / (pts.len() - n_out) as f64;
        assert!(recall >= 0.95, "{recall}");
        let ang = rotation_angle(&g.rotation, &r);
        assert!(ang < 1e-3, "{ang} {} {:?}", g.inlier_count(), g.translation);
    }

    #[test]
    fn too_few_matches() {
        let pts = vec![[0.0; 4]; 7];
        assert!(matches!(
            estimate_relative_pose(&pts, &k(1.0), &k(1.0), &RansacConfig::default()),
            Err(Error::PoseUnavailable(_))
        ));
    }

    #[test]
    fn intrinsics_round_trip() {
        let kk = k(321.5);
        assert_eq!(parse_intrinsics(&format_intrinsics(&kk)).unwrap(), kk);
        assert!(parse_intrinsics("1 2 3").is_err());
        assert!(parse_intrinsics("0 0 0 0 0 0 0 0 0").is_err());
    }

    proptest! {
        #[test]
        fn grid_size_bounds_and_scale_invariance(
            ratio in 0.1f64..10.0,
            depth in 0.5f64..20.0,
            c in 0.01f64..100.0,
        ) {
            // a point at depth d_i seen from a camera translated along x and z
            let d_i = depth;
            let d_j = depth / ratio;
            let p_i = Vec3::new(0.1, -0.05, 1.0);
            let x_j = Vec3::new(0.3, 0.2, 1.0);
            let t = x_j * d_j - p_i * d_i;
            let a = depths_from_rays(&p_i, &x_j, &t);
            let b = depths_from_rays(&p_i, &x_j, &(t * c));
            prop_assert!(a.valid && b.valid);
            let s = grid_sizes(&a, 5);
            prop_assert_eq!(s % 2, 1);
            prop_assert!((5..=16).contains(&s));
            prop_assert_eq!(s, grid_sizes(&b, 5));
            prop_assert!((a.d_i_over_alpha / a.d_j_over_alpha / ratio - 1.0).abs() < 1e-9);
        }
    }
}
