//! Synthetic image pairs with exact ground truth: textured homography warps
//! for training and ray-cast plane-plus-boxes scenes seen by two cameras.

use nalgebra::Matrix3;
use noise::{Fbm, MultiFractal, NoiseFn, Perlin};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Vec3};
use crate::image::Image;

/// Sub-pixel sample offsets used for 2x2 supersampling.
const SUBSAMPLES: [(f64, f64); 4] = [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)];

/// Ground-truth mapping from reference to source pixels.
pub trait PairTruth: Send + Sync {
    /// Reference and source images.
    fn images(&self) -> (&Image, &Image);
    /// Camera intrinsics, when the pair comes from a camera model.
    fn intrinsics(&self) -> Option<(Mat3, Mat3)> {
        None
    }
    /// `(width, height)` of the source image.
    fn src_size(&self) -> (usize, usize);
    /// Source position of reference pixel `(x, y)`, or `None` when it is
    /// outside the source view or occluded there.
    fn correspond(&self, x: f64, y: f64) -> Option<(f64, f64)>;
    /// Local magnification of the source relative to the reference at
    /// `(x, y)`; for rigid scenes this is the depth ratio `d_i / d_j`.
    fn scale_ratio(&self, x: f64, y: f64) -> Option<f64>;
}

fn in_bounds((x, y): (f64, f64), (w, h): (usize, usize)) -> bool {
    x >= -0.5 && y >= -0.5 && x < w as f64 - 0.5 && y < h as f64 - 0.5
}

/// Fractal Perlin texture parameters, in pixels of an unwarped view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatternParams {
    /// Period of the coarsest octave.
    pub period: f64,
    pub octaves: usize,
    pub persistence: f64,
    pub contrast: f64,
}

impl Default for PatternParams {
    fn default() -> Self {
        Self { period: 40.0, octaves: 5, persistence: 0.65, contrast: 0.8 }
    }
}

/// Procedural texture on the plane, values in `[0, 1]`.
pub struct Texture {
    fbm: Fbm<Perlin>,
    period: f64,
    contrast: f64,
}

impl Texture {
    pub fn new(params: &PatternParams, seed: u32) -> Self {
        let fbm = Fbm::<Perlin>::new(seed)
            .set_octaves(params.octaves)
            .set_frequency(1.0)
            .set_lacunarity(2.0)
            .set_persistence(params.persistence);
        Self { fbm, period: params.period, contrast: params.contrast }
    }

    pub fn sample(&self, u: f64, v: f64) -> f64 {
        let n = self.fbm.get([u / self.period, v / self.period]);
        (0.5 + self.contrast * n).clamp(0.0, 1.0)
    }
}

fn render(width: usize, height: usize, shade: impl Fn(f64, f64) -> f64 + Sync) -> Image {
    let mut data = vec![0.0; width * height];
    data.par_chunks_mut(width).enumerate().for_each(|(y, row)| {
        for (x, v) in row.iter_mut().enumerate() {
            let s: f64 = SUBSAMPLES.iter().map(|&(dx, dy)| shade(x as f64 + dx, y as f64 + dy)).sum();
            *v = s / SUBSAMPLES.len() as f64;
        }
    });
    Image { width, height, channels: 1, data }
}

fn photometric(img: &mut Image, gain: f64, bias: f64, noise: f64, rng: &mut ChaCha8Rng) {
    let normal = (noise > 0.0).then(|| Normal::new(0.0, noise).expect("positive sigma"));
    for v in &mut img.data {
        let n = normal.map_or(0.0, |d| d.sample(rng));
        *v = (gain * *v + bias + n).clamp(0.0, 1.0);
    }
}

/// Similarity warp about the image center with an optional perspective
/// component, followed by a photometric change of the source.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarpParams {
    pub size: usize,
    /// Source magnification; must lie in `[1/3, 3]`.
    pub scale: f64,
    /// Radians.
    pub rotation: f64,
    pub translation: (f64, f64),
    /// Projective row `(h20, h21)` around the center, per pixel.
    pub perspective: (f64, f64),
    pub gain: f64,
    pub bias: f64,
    /// Standard deviation of additive source noise.
    pub noise: f64,
}

impl WarpParams {
    pub fn identity(size: usize) -> Self {
        Self {
            size,
            scale: 1.0,
            rotation: 0.0,
            translation: (0.0, 0.0),
            perspective: (0.0, 0.0),
            gain: 1.0,
            bias: 0.0,
            noise: 0.0,
        }
    }

    /// Random training warp with scale drawn uniformly from `scales`.
    pub fn random(size: usize, scales: (f64, f64), rng: &mut impl Rng) -> Self {
        let jitter = size as f64 / 8.0;
        let p = 1e-4 * 128.0 / size as f64;
        Self {
            size,
            scale: if scales.1 > scales.0 { rng.gen_range(scales.0..scales.1) } else { scales.0 },
            rotation: rng.gen_range(-10f64..10.0).to_radians(),
            translation: (rng.gen_range(-jitter..jitter), rng.gen_range(-jitter..jitter)),
            perspective: (rng.gen_range(-p..p), rng.gen_range(-p..p)),
            gain: rng.gen_range(0.8..1.2),
            bias: rng.gen_range(-0.08..0.08),
            noise: 0.01,
        }
    }

    /// Reference-to-source homography.
    pub fn homography(&self) -> Mat3 {
        let c = (self.size as f64 - 1.0) / 2.0;
        let (s, r) = (self.scale, self.rotation);
        let (cos, sin) = (s * r.cos(), s * r.sin());
        let to_center = Matrix3::new(1.0, 0.0, -c, 0.0, 1.0, -c, 0.0, 0.0, 1.0);
        let back = Matrix3::new(1.0, 0.0, c + self.translation.0, 0.0, 1.0, c + self.translation.1, 0.0, 0.0, 1.0);
        let sim = Matrix3::new(cos, -sin, 0.0, sin, cos, 0.0, 0.0, 0.0, 1.0);
        let persp = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, self.perspective.0, self.perspective.1, 1.0);
        back * sim * persp * to_center
    }
}

/// A rendered warp pair and its exact correspondence.
#[derive(Clone, Debug)]
pub struct WarpPair {
    pub ref_img: Image,
    pub src_img: Image,
    /// Reference-to-source homography.
    pub homography: Mat3,
    inverse: Mat3,
}

fn apply(h: &Mat3, x: f64, y: f64) -> (f64, f64) {
    let w = h[(2, 0)] * x + h[(2, 1)] * y + h[(2, 2)];
    ((h[(0, 0)] * x + h[(0, 1)] * y + h[(0, 2)]) / w, (h[(1, 0)] * x + h[(1, 1)] * y + h[(1, 2)]) / w)
}

/// Texture and its warped counterpart. Deterministic per `seed`.
pub fn synth_warp_pair(pattern: &PatternParams, warp: &WarpParams, seed: u64) -> Result<WarpPair> {
    if !(1.0 / 3.0 - 1e-12..=3.0 + 1e-12).contains(&warp.scale) {
        return Err(Error::Config(format!("warp scale {} outside [1/3, 3]", warp.scale)));
    }
    if warp.size == 0 {
        return Err(Error::Config("warp size must be positive".into()));
    }
    let homography = warp.homography();
    let inverse = homography
        .try_inverse()
        .ok_or_else(|| Error::Config("singular warp".into()))?;
    let texture = Texture::new(pattern, (seed & 0xffff_ffff) as u32 ^ (seed >> 32) as u32);
    let n = warp.size;
    let ref_img = render(n, n, |x, y| texture.sample(x, y));
    let mut src_img = render(n, n, |x, y| {
        let (u, v) = apply(&inverse, x, y);
        texture.sample(u, v)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if warp.gain != 1.0 || warp.bias != 0.0 || warp.noise > 0.0 {
        photometric(&mut src_img, warp.gain, warp.bias, warp.noise, &mut rng);
    }
    Ok(WarpPair { ref_img, src_img, homography, inverse })
}

impl WarpPair {
    /// Source-to-reference mapping (no visibility test).
    pub fn inverse_map(&self, x: f64, y: f64) -> (f64, f64) {
        apply(&self.inverse, x, y)
    }
}

impl PairTruth for WarpPair {
    fn images(&self) -> (&Image, &Image) {
        (&self.ref_img, &self.src_img)
    }

    fn src_size(&self) -> (usize, usize) {
        (self.src_img.width, self.src_img.height)
    }

    fn correspond(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let p = apply(&self.homography, x, y);
        in_bounds(p, self.src_size()).then_some(p)
    }

    /// `sqrt |det J|` of the homography, `det J = det H / w^3`.
    fn scale_ratio(&self, x: f64, y: f64) -> Option<f64> {
        let h = &self.homography;
        let w = h[(2, 0)] * x + h[(2, 1)] * y + h[(2, 2)];
        let det = h.determinant() / (w * w * w);
        (det.is_finite() && det != 0.0).then(|| det.abs().sqrt())
    }
}

/// Axis-aligned box standing in front of the wall.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cuboid {
    pub min: Vec3,
    pub max: Vec3,
}

/// Relative motion `X_src = R X_ref + t` of the source camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Motion {
    pub rotation: Mat3,
    pub translation: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneParams {
    /// Square image extent; must lie in `64..=256`.
    pub size: usize,
    pub focal: f64,
    /// Depth of the textured back wall in the reference camera.
    pub wall_depth: f64,
    pub boxes: Vec<Cuboid>,
    pub motion: Motion,
    pub pattern: PatternParams,
}

fn rotation(axis: Vec3, angle: f64) -> Mat3 {
    if angle == 0.0 || axis.norm() == 0.0 {
        return Mat3::identity();
    }
    *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).matrix()
}

impl SceneParams {
    /// Empty wall seen twice from the same pose.
    pub fn static_wall(size: usize) -> Self {
        Self {
            size,
            focal: size as f64,
            wall_depth: 10.0,
            boxes: Vec::new(),
            motion: Motion { rotation: Mat3::identity(), translation: Vec3::zeros() },
            pattern: PatternParams::default(),
        }
    }

    /// Random boxes of height up to `max_height` in front of the wall.
    pub fn random_boxes(&mut self, count: usize, max_height: f64, rng: &mut impl Rng) {
        let z = self.wall_depth;
        let half = z * self.size as f64 / (2.0 * self.focal);
        self.boxes = (0..count)
            .map(|_| {
                let (w, h) = (rng.gen_range(0.2..0.5) * half, rng.gen_range(0.2..0.5) * half);
                let (cx, cy) = (rng.gen_range(-0.8..0.8) * half, rng.gen_range(-0.8..0.8) * half);
                let d = rng.gen_range(0.3..1.0) * max_height;
                Cuboid { min: Vec3::new(cx - w / 2.0, cy - h / 2.0, z - d), max: Vec3::new(cx + w / 2.0, cy + h / 2.0, z) }
            })
            .collect();
    }

    /// Mostly sideways motion with a small rotation (wide triangulation
    /// angles), plus boxes.
    pub fn random_general(size: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::static_wall(size);
        p.random_boxes(rng.gen_range(2..5), 0.3 * p.wall_depth, rng);
        let b = p.wall_depth * rng.gen_range(0.08..0.2);
        let dir = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
        let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let r = rotation(axis, rng.gen_range(-4f64..4.0).to_radians());
        p.motion = Motion { rotation: r, translation: -(b * dir.normalize()) };
        p
    }

    /// Forward motion that magnifies the wall by `scale`, with a lateral
    /// offset, a small rotation and shallow boxes.
    pub fn random_forward(size: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::static_wall(size);
        p.random_boxes(rng.gen_range(2..5), 0.12 * p.wall_depth, rng);
        let z = p.wall_depth;
        let advance = z * (1.0 - 1.0 / scale);
        let side = 0.25 * advance;
        let lateral = (rng.gen_range(-side..side), rng.gen_range(-side..side));
        let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.2..0.2));
        let r = rotation(axis, rng.gen_range(-2f64..2.0).to_radians());
        // the source camera center sits at (lateral, advance) in the
        // reference frame: t = -R c
        let center = Vec3::new(lateral.0, lateral.1, advance);
        p.motion = Motion { rotation: r, translation: -(r * center) };
        p
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Face {
    Wall,
    Box { index: usize, axis: usize },
}

#[derive(Clone, Copy, Debug)]
struct Hit {
    t: f64,
    face: Face,
}

/// Slab intersection of `o + t d` with a box, returning the entry distance
/// and the entry axis.
fn slab(o: &Vec3, d: &Vec3, b: &Cuboid) -> Option<(f64, usize)> {
    let (mut t0, mut t1, mut axis) = (f64::NEG_INFINITY, f64::INFINITY, 0);
    for k in 0..3 {
        if d[k] == 0.0 {
            if o[k] < b.min[k] || o[k] > b.max[k] {
                return None;
            }
            continue;
        }
        let (a, c) = ((b.min[k] - o[k]) / d[k], (b.max[k] - o[k]) / d[k]);
        let (near, far) = if a < c { (a, c) } else { (c, a) };
        if near > t0 {
            t0 = near;
            axis = k;
        }
        t1 = t1.min(far);
    }
    (t0 <= t1 && t0 > 0.0).then_some((t0, axis))
}

/// Plane-plus-boxes scene observed by a reference and a source camera,
/// with exact per-pixel ground truth.
pub struct TwoViewScene {
    pub params: SceneParams,
    pub k: Mat3,
    pub rotation: Mat3,
    /// Unit translation direction; `translation * alpha` is the true `t`.
    pub translation: Vec3,
    /// Baseline length, the scale lost by two-view reconstruction.
    pub alpha: f64,
    pub ref_img: Image,
    pub src_img: Image,
    /// Scene point seen at each reference pixel center, reference frame.
    pub points: Vec<Vec3>,
    /// Reference depth per pixel.
    pub depth_ref: Vec<f64>,
    /// Source position of each reference pixel center when visible.
    pub correspondence: Vec<Option<(f64, f64)>>,
    /// Source depth of each reference pixel's scene point when visible.
    pub depth_src: Vec<Option<f64>>,
    texture: Texture,
    k_inv: Mat3,
    src_center: Vec3,
}

impl TwoViewScene {
    fn cast(&self, o: &Vec3, d: &Vec3) -> Option<Hit> {
        let mut best = (d.z > 0.0).then(|| Hit { t: (self.params.wall_depth - o.z) / d.z, face: Face::Wall });
        for (index, b) in self.params.boxes.iter().enumerate() {
            if let Some((t, axis)) = slab(o, d, b) {
                if best.is_none_or(|h| t < h.t) {
                    best = Some(Hit { t, face: Face::Box { index, axis } });
                }
            }
        }
        best.filter(|h| h.t > 0.0)
    }

    /// Texture in reference-wall pixel units, faces shaded by orientation.
    fn shade(&self, p: &Vec3, face: Face) -> f64 {
        let s = self.params.focal / self.params.wall_depth;
        match face {
            Face::Wall => self.texture.sample(s * p.x, s * p.y),
            Face::Box { index, axis } => {
                let off = 1000.0 * (index + 1) as f64;
                let (u, v, gain) = match axis {
                    0 => (p.z, p.y, 0.75),
                    1 => (p.x, p.z, 0.85),
                    _ => (p.x, p.y, 1.0),
                };
                gain * self.texture.sample(s * u + off, s * v - off)
            }
        }
    }

    fn ref_ray(&self, x: f64, y: f64) -> Vec3 {
        self.k_inv * Vec3::new(x, y, 1.0)
    }

    fn src_ray(&self, x: f64, y: f64) -> Vec3 {
        self.rotation.transpose() * (self.k_inv * Vec3::new(x, y, 1.0))
    }

    /// Geometry oracle: `(d_i / alpha, d_j / alpha)` at a reference pixel
    /// center.
    pub fn scaled_depths_at(&self, x: usize, y: usize) -> Option<(f64, f64)> {
        let idx = y * self.params.size + x;
        self.depth_src[idx].map(|dj| (self.depth_ref[idx] / self.alpha, dj / self.alpha))
    }

    /// Angle between the two viewing rays of the point at a reference pixel,
    /// in radians.
    pub fn triangulation_angle(&self, x: usize, y: usize) -> f64 {
        let p = self.points[y * self.params.size + x];
        let a = p;
        let b = p - self.src_center;
        (a.dot(&b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos()
    }
}

/// Renders a two-view scene. Deterministic per `seed`. Rejects placements
/// where either camera sits inside a box or behind the wall, or where some
/// source ray misses the scene.
pub fn synth_two_view(params: &SceneParams, seed: u64) -> Result<TwoViewScene> {
    let n = params.size;
    if !(64..=256).contains(&n) {
        return Err(Error::Config(format!("scene size {n} outside 64..=256")));
    }
    if !(params.focal > 0.0 && params.wall_depth > 0.0) {
        return Err(Error::Config("focal length and wall depth must be positive".into()));
    }
    let r = params.motion.rotation;
    if ((r.transpose() * r) - Mat3::identity()).amax() > 1e-9 || r.determinant() < 0.0 {
        return Err(Error::Config("motion rotation is not a rotation".into()));
    }
    let c = (n as f64 - 1.0) / 2.0;
    let k = Matrix3::new(params.focal, 0.0, c, 0.0, params.focal, c, 0.0, 0.0, 1.0);
    let k_inv = k.try_inverse().expect("focal is positive");
    let t = params.motion.translation;
    let src_center = -(r.transpose() * t);
    let alpha = t.norm();
    let translation = if alpha > 0.0 { t / alpha } else { Vec3::zeros() };
    let margin = 1e-3 * params.wall_depth;
    for (name, cam) in [("reference", Vec3::zeros()), ("source", src_center)] {
        if cam.z > params.wall_depth - margin {
            return Err(Error::Config(format!("degenerate placement: {name} camera at or behind the wall")));
        }
        if params.boxes.iter().any(|b| (0..3).all(|k| cam[k] > b.min[k] - margin && cam[k] < b.max[k] + margin)) {
            return Err(Error::Config(format!("degenerate placement: {name} camera inside a box")));
        }
    }
    let mut scene = TwoViewScene {
        params: params.clone(),
        k,
        rotation: r,
        translation,
        alpha,
        ref_img: Image { width: 0, height: 0, channels: 1, data: Vec::new() },
        src_img: Image { width: 0, height: 0, channels: 1, data: Vec::new() },
        points: Vec::new(),
        depth_ref: Vec::new(),
        correspondence: Vec::new(),
        depth_src: Vec::new(),
        texture: Texture::new(&params.pattern, seed as u32),
        k_inv,
        src_center,
    };
    let lim = n as f64 - 0.5;
    for (x, y) in [(-0.5, -0.5), (lim, -0.5), (-0.5, lim), (lim, lim)] {
        if scene.cast(&Vec3::zeros(), &scene.ref_ray(x, y)).is_none()
            || scene.cast(&src_center, &scene.src_ray(x, y)).is_none()
        {
            return Err(Error::Config("degenerate placement: a view ray misses the scene".into()));
        }
    }

    let s = &scene;
    let miss = |_| Error::Config("degenerate placement: a view ray misses the scene".into());
    let ref_img = render(n, n, |x, y| {
        let d = s.ref_ray(x, y);
        s.cast(&Vec3::zeros(), &d).map_or(0.0, |h| s.shade(&(d * h.t), h.face))
    });
    let src_img = render(n, n, |x, y| {
        let d = s.src_ray(x, y);
        s.cast(&src_center, &d).map_or(0.0, |h| s.shade(&(src_center + d * h.t), h.face))
    });
    let fields: Vec<(Vec3, Option<((f64, f64), f64)>)> = (0..n * n)
        .into_par_iter()
        .map(|idx| {
            let (x, y) = ((idx % n) as f64, (idx / n) as f64);
            let d = s.ref_ray(x, y);
            let hit = s.cast(&Vec3::zeros(), &d).ok_or(()).map_err(miss)?;
            let p = d * hit.t;
            let pj = r * p + t;
            if pj.z <= 0.0 {
                return Ok((p, None));
            }
            let xj = k * pj / pj.z;
            let xy = (xj.x, xj.y);
            if !in_bounds(xy, (n, n)) {
                return Ok((p, None));
            }
            // visible when nothing lies between the source center and p
            let visible = s.cast(&src_center, &(p - src_center)).is_some_and(|h| h.t >= 1.0 - 1e-9);
            Ok((p, visible.then_some((xy, pj.z))))
        })
        .collect::<Result<_>>()?;

    scene.ref_img = ref_img;
    scene.src_img = src_img;
    scene.depth_ref = fields.iter().map(|(p, _)| p.z).collect();
    scene.correspondence = fields.iter().map(|(_, c)| c.map(|c| c.0)).collect();
    scene.depth_src = fields.iter().map(|(_, c)| c.map(|c| c.1)).collect();
    scene.points = fields.into_iter().map(|(p, _)| p).collect();
    Ok(scene)
}

impl PairTruth for TwoViewScene {
    fn images(&self) -> (&Image, &Image) {
        (&self.ref_img, &self.src_img)
    }

    fn intrinsics(&self) -> Option<(Mat3, Mat3)> {
        Some((self.k, self.k))
    }

    fn src_size(&self) -> (usize, usize) {
        (self.params.size, self.params.size)
    }

    fn correspond(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let d = self.ref_ray(x, y);
        let p = d * self.cast(&Vec3::zeros(), &d)?.t;
        let pj = self.rotation * p + self.translation * self.alpha;
        if pj.z <= 0.0 {
            return None;
        }
        let xj = self.k * pj / pj.z;
        let xy = (xj.x, xj.y);
        let visible = self.cast(&self.src_center, &(p - self.src_center)).is_some_and(|h| h.t >= 1.0 - 1e-9);
        (in_bounds(xy, self.src_size()) && visible).then_some(xy)
    }

    fn scale_ratio(&self, x: f64, y: f64) -> Option<f64> {
        let d = self.ref_ray(x, y);
        let p = d * self.cast(&Vec3::zeros(), &d)?.t;
        let pj = self.rotation * p + self.translation * self.alpha;
        (pj.z > 0.0).then(|| p.z / pj.z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn identity_warp_gives_identical_images() {
        let pair = synth_warp_pair(&PatternParams::default(), &WarpParams::identity(64), 3).unwrap();
        assert_eq!(pair.ref_img, pair.src_img);
        assert_eq!(pair.correspond(10.0, 20.0), Some((10.0, 20.0)));
        let spread = pair.ref_img.data.iter().fold((1.0f64, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        assert!(spread.1 - spread.0 > 0.5, "texture has contrast");
    }

    #[test]
    fn scale_two_gives_ratio_two_everywhere() {
        let warp = WarpParams { scale: 2.0, rotation: 0.3, ..WarpParams::identity(64) };
        let pair = synth_warp_pair(&PatternParams::default(), &warp, 1).unwrap();
        for c in 0..64 {
            let (x, y) = ((c % 8) as f64 * 8.0 + 4.5, (c / 8) as f64 * 8.0 + 4.5);
            assert!((pair.scale_ratio(x, y).unwrap() - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_scale_is_bounded() {
        let warp = WarpParams { scale: 3.5, ..WarpParams::identity(64) };
        assert!(synth_warp_pair(&PatternParams::default(), &warp, 1).is_err());
    }

    #[test]
    fn warped_texture_follows_homography() {
        // noise-free, the source intensity at H x approximates the reference
        // intensity at x
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let warp = WarpParams { gain: 1.0, bias: 0.0, noise: 0.0, ..WarpParams::random(96, (1.0, 2.0), &mut rng) };
        let pair = synth_warp_pair(&PatternParams::default(), &warp, 9).unwrap();
        let mut errs = Vec::new();
        for y in 10..86 {
            for x in 10..86 {
                if let Some((u, v)) = pair.correspond(x as f64, y as f64) {
                    let (u, v) = (u.round() as usize, v.round() as usize);
                    if u < 96 && v < 96 {
                        errs.push((pair.ref_img.at(x, y, 0) - pair.src_img.at(u, v, 0)).abs());
                    }
                }
            }
        }
        errs.sort_by(f64::total_cmp);
        assert!(errs[errs.len() / 2] < 0.05, "median {}", errs[errs.len() / 2]);
    }

    #[test]
    fn static_scene_is_identical() {
        let mut params = SceneParams::static_wall(64);
        params.random_boxes(3, 2.0, &mut ChaCha8Rng::seed_from_u64(2));
        let scene = synth_two_view(&params, 5).unwrap();
        assert_eq!(scene.ref_img, scene.src_img);
        for idx in (0..64 * 64).step_by(37) {
            let (x, y) = ((idx % 64) as f64, (idx / 64) as f64);
            let (u, v) = scene.correspondence[idx].unwrap();
            assert!((u - x).abs() < 1e-9 && (v - y).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_motion_doubling_distance() {
        let mut params = SceneParams::static_wall(64);
        params.motion.translation = Vec3::new(0.0, 0.0, -5.0);
        let scene = synth_two_view(&params, 1).unwrap();
        for y in 28..36 {
            for x in 28..36 {
                let (di, dj) = scene.scaled_depths_at(x, y).unwrap();
                assert!((di / dj - 2.0).abs() < 1e-12);
                assert!((scene.scale_ratio(x as f64, y as f64).unwrap() - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_placements_rejected() {
        let mut behind = SceneParams::static_wall(64);
        behind.motion.translation = Vec3::new(0.0, 0.0, -12.0);
        assert!(synth_two_view(&behind, 0).is_err());
        let mut sideways = SceneParams::static_wall(64);
        sideways.motion.rotation = rotation(Vec3::y(), 1.5);
        assert!(synth_two_view(&sideways, 0).is_err());
        let mut inside = SceneParams::static_wall(64);
        inside.boxes = vec![Cuboid { min: Vec3::new(-1.0, -1.0, -1.0), max: Vec3::new(1.0, 1.0, 10.0) }];
        assert!(synth_two_view(&inside, 0).is_err());
        assert!(synth_two_view(&SceneParams::static_wall(32), 0).is_err());
    }

    fn check_scene(scene: &TwoViewScene, rng: &mut ChaCha8Rng) -> usize {
        let n = scene.params.size;
        let r = scene.rotation;
        let k_inv = scene.k.try_inverse().unwrap();
        let mut checked = 0;
        for _ in 0..1000 {
            let (x, y) = (rng.gen_range(0..n), rng.gen_range(0..n));
            let idx = y * n + x;
            assert!(scene.depth_ref[idx] > 0.0);
            // projecting the scene point lands on the correspondence
            let p = scene.points[idx];
            let proj = scene.k * p / p.z;
            assert!((proj.x - x as f64).abs() < 1e-9 && (proj.y - y as f64).abs() < 1e-9);
            let Some((u, v)) = scene.correspondence[idx] else { continue };
            let pj = r * p + scene.translation * scene.alpha;
            let q = scene.k * pj / pj.z;
            assert!((q.x - u).abs() < 1e-6 && (q.y - v).abs() < 1e-6);
            // d_j p_j = d_i p_i + alpha T per component
            let di = scene.depth_ref[idx];
            let dj = scene.depth_src[idx].unwrap();
            assert!(dj > 0.0);
            let lhs = dj * (k_inv * Vec3::new(u, v, 1.0));
            let rhs = di * (r * k_inv * Vec3::new(x as f64, y as f64, 1.0)) + scene.alpha * scene.translation;
            assert!((lhs - rhs).amax() < 1e-9, "{}", (lhs - rhs).amax());
            let (cu, cv) = scene.correspond(x as f64, y as f64).unwrap();
            assert!((cu - u).abs() < 1e-9 && (cv - v).abs() < 1e-9);
            checked += 1;
        }
        checked
    }

    #[test]
    fn scenes_satisfy_projection_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..4 {
            let general = SceneParams::random_general(64, &mut rng);
            let scene = synth_two_view(&general, seed).unwrap();
            assert!(check_scene(&scene, &mut rng) > 300);
            let forward = SceneParams::random_forward(64, rng.gen_range(2.0..3.0), &mut rng);
            let scene = synth_two_view(&forward, seed).unwrap();
            assert!(check_scene(&scene, &mut rng) > 50);
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let (wa, wb) = (WarpParams::random(64, (1.0, 2.5), &mut a), WarpParams::random(64, (1.0, 2.5), &mut b));
        let (pa, pb) = (
            synth_warp_pair(&PatternParams::default(), &wa, 7).unwrap(),
            synth_warp_pair(&PatternParams::default(), &wb, 7).unwrap(),
        );
        assert_eq!(pa.src_img, pb.src_img);
        let (sa, sb) = (SceneParams::random_general(64, &mut a), SceneParams::random_general(64, &mut b));
        assert_eq!(sa, sb);
        assert_eq!(synth_two_view(&sa, 3).unwrap().src_img, synth_two_view(&sb, 3).unwrap().src_img);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn warp_correspondence_is_consistent(seed in 0u64..10_000, x in 0.0f64..95.0, y in 0.0f64..95.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let warp = WarpParams::random(96, (1.0 / 3.0, 3.0), &mut rng);
            let h = warp.homography();
            let pair = WarpPair {
                ref_img: Image { width: 96, height: 96, channels: 1, data: vec![0.0; 96 * 96] },
                src_img: Image { width: 96, height: 96, channels: 1, data: vec![0.0; 96 * 96] },
                homography: h,
                inverse: h.try_inverse().unwrap(),
            };
            let (u, v) = apply(&h, x, y);
            let (bx, by) = pair.inverse_map(u, v);
            prop_assert!((bx - x).abs() < 1e-9 && (by - y).abs() < 1e-9);
            if let Some(p) = pair.correspond(x, y) {
                prop_assert_eq!(p, (u, v));
            }
        }
    }
}
