//! Verification suites comparing the production kernels against the
//! reference implementations and synthetic ground truth. Shared by the
//! command-line `selftest`, `verify-geometry` and `bench-sparse` commands and
//! by the acceptance tests.

use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint;
use crate::coarse::{dual_softmax, extract_matches};
use crate::geometry::{depths_from_rays, grid_size_for_ratio, grid_sizes, scaled_depths, TwoViewGeometry, Vec3};
use crate::image::{parse_netpbm, render_overlay, Image};
use crate::model::{match_pair, GridPolicy, ModelConfig, ModelParams};
use crate::numerics::{normalized_positional_encoding, positional_encoding, PositionalEncodingConfig};
use crate::oracle;
use crate::sparse::{build_plan, sparse_backward, sparse_forward, SparseAttentionPlan};
use crate::spot::{confidence_and_loc, matching_matrix, select_seeds, similarity_scores};
use crate::synth::{synth_two_view, SceneParams};
use crate::tensor::{FeatureMap, Level, Tensor};

/// Outcome of one suite.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn plan_mask(plan: &SparseAttentionPlan) -> Vec<bool> {
    let mut mask = vec![false; plan.n_queries() * plan.n_keys()];
    for (&q, &k) in plan.query_indices().iter().zip(plan.key_indices()) {
        mask[q * plan.n_keys() + k] = true;
    }
    mask
}

/// Random plan of one of four kinds: dense, one entry in total, one key per
/// query, or Bernoulli with a random density (some queries may be empty).
fn random_plan(nq: usize, nk: usize, kind: usize, rng: &mut impl Rng) -> SparseAttentionPlan {
    let pairs: Vec<(usize, usize)> = match kind {
        0 => return SparseAttentionPlan::dense(nq, nk),
        1 => vec![(rng.gen_range(0..nq), rng.gen_range(0..nk))],
        2 => (0..nq).map(|q| (q, rng.gen_range(0..nk))).collect(),
        _ => {
            let density = rng.gen_range(0.05..0.9);
            (0..nq).flat_map(|q| (0..nk).map(move |k| (q, k))).filter(|_| rng.gen_bool(density)).collect()
        }
    };
    build_plan(&pairs, nq, nk).expect("indices in range")
}

/// Sparse attention against masked dense attention.
pub fn sparse_equivalence(instances: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for n in 0..instances {
        let (nq, nk) = (rng.gen_range(1..=64), rng.gen_range(1..=64));
        let (heads, dims) = (rng.gen_range(1..=4), rng.gen_range(1..=16));
        let plan = random_plan(nq, nk, n % 4, &mut rng);
        let q = random_tensor(&[nq, heads, dims], &mut rng);
        let k = random_tensor(&[nk, heads, dims], &mut rng);
        let v = random_tensor(&[nk, heads, dims], &mut rng);
        let scale = 1.0 / (dims as f64).sqrt();
        let out = sparse_forward(&q, &k, &v, &plan, scale).expect("consistent shapes");
        let mask = plan_mask(&plan);
        let dense = oracle::masked_attention_reference(q.data(), k.data(), v.data(), nq, nk, heads, dims, scale, Some(&mask));
        let err = out.output.data().iter().zip(&dense).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        worst = worst.max(err);
    }
    let elapsed = start.elapsed();
    Check {
        name: "sparse attention equals masked dense attention",
        passed: worst < 1e-8 && elapsed < Duration::from_secs(60),
        detail: format!("{instances} instances, max abs error {worst:.3e}, {:.2} s", elapsed.as_secs_f64()),
    }
}

/// Analytic sparse-attention gradients against central differences.
pub fn sparse_gradients(instances: usize, seed: u64) -> Check {
    const STEP: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for n in 0..instances {
        let (nq, nk) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let (heads, dims) = (rng.gen_range(1..=3), rng.gen_range(1..=4));
        let plan = random_plan(nq, nk, n % 4, &mut rng);
        let (qs, ks) = ([nq, heads, dims], [nk, heads, dims]);
        let q = random_tensor(&qs, &mut rng);
        let k = random_tensor(&ks, &mut rng);
        let v = random_tensor(&ks, &mut rng);
        let up = random_tensor(&qs, &mut rng);
        let scale = 0.7;
        let g = sparse_backward(&q, &k, &v, &plan, scale, &up).expect("consistent shapes");
        let loss = |q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>| -> f64 {
            let o = sparse_forward(q, k, v, &plan, scale).expect("consistent shapes");
            o.output.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        };
        let t = |shape: &[usize], x: &[f64]| Tensor::from_vec(shape, x.to_vec()).expect("same length");
        let all_q: Vec<usize> = (0..q.len()).collect();
        let all_k: Vec<usize> = (0..k.len()).collect();
        let dq = oracle::central_difference(|x| loss(&t(&qs, x), &k, &v), q.data(), &all_q, STEP);
        let dk = oracle::central_difference(|x| loss(&q, &t(&ks, x), &v), k.data(), &all_k, STEP);
        let dv = oracle::central_difference(|x| loss(&q, &k, &t(&ks, x)), v.data(), &all_k, STEP);
        for (a, b) in [(g.q.data(), &dq), (g.k.data(), &dk), (g.v.data(), &dv)] {
            worst = worst.max(oracle::relative_error(a, b, 1e-6));
        }
    }
    Check {
        name: "sparse attention gradients match finite differences",
        passed: worst < 1e-4,
        detail: format!("{instances} instances, max relative error {worst:.3e}"),
    }
}

/// One row of the sparse-operator scaling table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalingRow {
    pub entries: usize,
    /// Median seconds per forward call.
    pub seconds: f64,
    pub aux_elements: usize,
}

/// Median forward time and auxiliary storage for plans of each size over
/// fixed token counts.
pub fn sparse_scaling(tokens: usize, sizes: &[usize], runs: usize, seed: u64) -> Vec<ScalingRow> {
    let (heads, dims) = (4, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = random_tensor(&[tokens, heads, dims], &mut rng);
    let k = random_tensor(&[tokens, heads, dims], &mut rng);
    let v = random_tensor(&[tokens, heads, dims], &mut rng);
    let total = tokens * tokens;
    sizes
        .iter()
        .map(|&entries| {
            let picks = sample(&mut rng, total, entries.min(total));
            let pairs: Vec<(usize, usize)> = picks.iter().map(|p| (p / tokens, p % tokens)).collect();
            let plan = build_plan(&pairs, tokens, tokens).expect("indices in range");
            // repeat inside each run so one run lasts about a millisecond
            let once = Instant::now();
            let aux = sparse_forward(&q, &k, &v, &plan, 0.25).expect("consistent shapes").aux_elements();
            let reps = ((1e-3 / once.elapsed().as_secs_f64().max(1e-9)) as usize).clamp(1, 10_000);
            let mut times: Vec<f64> = (0..runs)
                .map(|_| {
                    let t = Instant::now();
                    for _ in 0..reps {
                        std::hint::black_box(sparse_forward(&q, &k, &v, &plan, 0.25).expect("consistent shapes"));
                    }
                    t.elapsed().as_secs_f64() / reps as f64
                })
                .collect();
            times.sort_by(f64::total_cmp);
            ScalingRow { entries, seconds: times[times.len() / 2], aux_elements: aux }
        })
        .collect()
}

/// Doubling the plan length: time ratio within `[1.5, 2.5]` and exactly
/// doubled auxiliary storage.
pub fn sparse_complexity(tokens: usize, entries: usize, runs: usize, seed: u64) -> Check {
    let rows = sparse_scaling(tokens, &[entries, 2 * entries], runs, seed);
    let ratio = rows[1].seconds / rows[0].seconds;
    let aux_doubles = rows[1].aux_elements == 2 * rows[0].aux_elements;
    Check {
        name: "doubling the plan doubles time and auxiliary storage",
        passed: (1.5..=2.5).contains(&ratio) && aux_doubles,
        detail: format!(
            "L_m {} -> {}: time ratio {ratio:.3} (median of {runs}), aux {} -> {}",
            rows[0].entries, rows[1].entries, rows[0].aux_elements, rows[1].aux_elements
        ),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeometryReport {
    pub scenes: usize,
    pub matches: usize,
    /// Matches whose recovered `d / alpha` (both views) is within `1e-6`
    /// relative of the truth.
    pub exact_fraction: f64,
    pub max_relative_error: f64,
    /// Median relative error of the depth ratio `d_i / d_j` under 0.5 px
    /// coordinate noise.
    pub noisy_median_ratio_error: f64,
}

/// Depth recovery on rendered two-view scenes: sampled visible pixels with
/// a triangulation angle above 2 degrees, true pose, exact and noisy
/// coordinates.
pub fn geometry_oracle(scenes: usize, per_scene: usize, seed: u64) -> (Check, GeometryReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.5).expect("positive sigma");
    let mut errors = Vec::new();
    let mut noisy = Vec::new();
    let mut made = 0;
    while made < scenes {
        let params = SceneParams::random_general(96, &mut rng);
        let Ok(scene) = synth_two_view(&params, rng.gen()) else { continue };
        made += 1;
        let geom = TwoViewGeometry::from_pose(scene.k, scene.k, scene.rotation, scene.translation).expect("nonzero baseline");
        let n = scene.params.size;
        let mut taken = 0;
        for _ in 0..per_scene * 20 {
            if taken == per_scene {
                break;
            }
            let (x, y) = (rng.gen_range(0..n), rng.gen_range(0..n));
            let Some(truth) = scene.scaled_depths_at(x, y) else { continue };
            if scene.triangulation_angle(x, y) <= 2f64.to_radians() {
                continue;
            }
            let (u, v) = scene.correspondence[y * n + x].expect("visible");
            taken += 1;
            let d = scaled_depths((x as f64, y as f64), (u, v), &geom);
            let err = if d.valid {
                ((d.d_i_over_alpha - truth.0).abs() / truth.0).max((d.d_j_over_alpha - truth.1).abs() / truth.1)
            } else {
                f64::INFINITY
            };
            errors.push(err);
            let jitter = |c: f64, rng: &mut ChaCha8Rng| c + noise.sample(rng);
            let (xn, yn) = (jitter(x as f64, &mut rng), jitter(y as f64, &mut rng));
            let (un, vn) = (jitter(u, &mut rng), jitter(v, &mut rng));
            let dn = scaled_depths((xn, yn), (un, vn), &geom);
            let ratio = truth.0 / truth.1;
            noisy.push(if dn.valid { ((dn.d_i_over_alpha / dn.d_j_over_alpha) - ratio).abs() / ratio } else { f64::INFINITY });
        }
    }
    noisy.sort_by(f64::total_cmp);
    let exact = errors.iter().filter(|&&e| e < 1e-6).count();
    let report = GeometryReport {
        scenes,
        matches: errors.len(),
        exact_fraction: exact as f64 / errors.len().max(1) as f64,
        max_relative_error: errors.iter().copied().fold(0.0, f64::max),
        noisy_median_ratio_error: noisy.get(noisy.len() / 2).copied().unwrap_or(f64::NAN),
    };
    let check = Check {
        name: "scaled depths recover ground truth",
        passed: !errors.is_empty() && report.exact_fraction >= 0.99 && report.noisy_median_ratio_error < 0.05,
        detail: format!(
            "{} scenes, {} matches: {:.2}% within 1e-6 (max {:.3e}); 0.5 px noise median ratio error {:.3}%",
            scenes,
            report.matches,
            100.0 * report.exact_fraction,
            report.max_relative_error,
            100.0 * report.noisy_median_ratio_error
        ),
    };
    (check, report)
}

/// Grid sizes over a dense sweep of depth ratios in `[0.1, 10]`: odd,
/// ratio to `s_i` in `[1, 3 + 1/s_i]`, and unchanged when the translation
/// is rescaled.
pub fn grid_sizing(samples: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scales = [1e-6, 1e-3, 0.37, 2.0, 1e3, 1e6];
    let mut failures = Vec::new();
    let mut checked = 0;
    for n in 0..samples {
        // log-uniform sweep with exact breakpoints mixed in
        let ratio = if n % 10 == 0 {
            [0.1, 0.5, 1.0, 1.2, 1.4, 1.5, 2.0, 2.2, 2.5, 3.0, 4.0, 10.0][(n / 10) % 12]
        } else {
            10f64.powf(-1.0 + 2.0 * n as f64 / samples as f64)
        };
        for s_i in [1, 3, 5, 7, 9] {
            // a point at depth d_i whose source depth is d_i / ratio
            let d_i = rng.gen_range(2.0..20.0);
            let x = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 1.0) * d_i;
            let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let r = *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), rng.gen_range(-0.2..0.2)).matrix();
            let rx = r * x;
            let t = Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), d_i / ratio - rx.z);
            let p_j = (rx + t) / (rx + t).z;
            let p_i = rx / x.z;
            let base = grid_sizes(&depths_from_rays(&p_i, &p_j, &(t / x.z)), s_i);
            checked += 1;
            let expected = grid_size_for_ratio(ratio, s_i);
            let q = base as f64 / s_i as f64;
            if base.is_multiple_of(2) || q < 1.0 || q > 3.0 + 1.0 / s_i as f64 {
                failures.push(format!("ratio {ratio}, s_i {s_i}: s_j {base}"));
            }
            // the recovered ratio may differ from `ratio` by roundoff only
            if base != expected && (grid_size_for_ratio(ratio * (1.0 + 1e-9), s_i) != base && grid_size_for_ratio(ratio * (1.0 - 1e-9), s_i) != base) {
                failures.push(format!("ratio {ratio}, s_i {s_i}: s_j {base}, expected {expected}"));
            }
            for c in scales {
                let scaled = grid_sizes(&depths_from_rays(&p_i, &p_j, &(c * t / x.z)), s_i);
                if scaled != base {
                    failures.push(format!("ratio {ratio}, s_i {s_i}: rescaling T by {c} changed s_j {base} -> {scaled}"));
                }
            }
        }
    }
    Check {
        name: "grid sizes are odd, clamped and scale invariant",
        passed: failures.is_empty(),
        detail: if failures.is_empty() {
            format!("{checked} ratio/window cases, {} rescalings each", scales.len())
        } else {
            format!("{} failures, first: {}", failures.len(), failures[0])
        },
    }
}

/// Dual-softmax and mutual-nearest-neighbour extraction against brute force
/// on random 32x32 matrices, and spot seed selection against exhaustive
/// top-k on random 7x7 fixtures.
pub fn matching_oracles(matrices: usize, fixtures: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut mnn_mismatch = 0;
    for _ in 0..matrices {
        let s = Tensor::from_fn(&[32, 32], |_| rng.gen_range(-4.0..4.0));
        let p = dual_softmax(&s).expect("2-D");
        let expect = oracle::dual_softmax_reference(s.data(), 32, 32);
        worst = worst.max(p.data().iter().zip(&expect).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())));
        for threshold in [0.0, 0.2] {
            let got = extract_matches(&p, threshold, (4, 8), (8, 4)).expect("fits");
            let want = oracle::mnn_reference(p.data(), 32, 32, threshold);
            let same = got.matches.len() == want.len()
                && got.matches.iter().zip(&want).all(|(m, w)| m.i == w.0 && m.j == w.1 && m.confidence == w.2);
            mnn_mismatch += usize::from(!same);
        }
    }
    let mut seed_mismatch = 0;
    for _ in 0..fixtures {
        let f = FeatureMap::from_fn(7, 7, 8, Level::EIGHTH, |_, _, _| rng.gen_range(-1.0..1.0f64));
        let g = FeatureMap::from_fn(7, 7, 8, Level::EIGHTH, |_, _, _| rng.gen_range(-1.0..1.0f64));
        let p_s = matching_matrix(&f, &g, 0.5).expect("same channels");
        let (conf, loc) = confidence_and_loc(&p_s);
        for p in 0..49 {
            let (nb, sim) = similarity_scores(&f, p, 5);
            let sel = select_seeds(p, &nb, &sim, &conf, &loc, 4);
            let products: Vec<f64> = nb.iter().zip(&sim).map(|(&q, &s)| s * conf[q]).collect();
            let mut expect: Vec<usize> = oracle::topk_by_enumeration(&products, 4).iter().map(|&i| nb[i]).collect();
            expect.insert(0, p);
            let seeds: Vec<usize> = expect.iter().map(|&q| loc[q]).collect();
            seed_mismatch += usize::from(sel.topk != expect || sel.seeds != seeds);
        }
    }
    Check {
        name: "dual-softmax, MNN and spot seeds match brute force",
        passed: worst <= 1e-12 && mnn_mismatch == 0 && seed_mismatch == 0,
        detail: format!(
            "{matrices} matrices: max dual-softmax error {worst:.3e}, {mnn_mismatch} MNN mismatches; {fixtures} fixtures x 49 pixels: {seed_mismatch} seed mismatches"
        ),
    }
}

/// The normalized encoding equals the base encoding bit for bit when the
/// train and test extents agree.
pub fn npe_contract() -> Check {
    let mut mismatches = Vec::new();
    for (d, w, h) in [(4, 1, 1), (8, 16, 16), (32, 12, 7), (64, 40, 30), (256, 4, 4)] {
        let base = positional_encoding::<f64>(d, h, w).expect("valid");
        let cfg = PositionalEncodingConfig { channels: d, train_size: (w, h), test_size: (w, h) };
        let npe = normalized_positional_encoding::<f64>(&cfg).expect("valid");
        if base.data().iter().zip(npe.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            mismatches.push(format!("{d}x{w}x{h}"));
        }
    }
    Check {
        name: "normalized encoding equals base encoding at training extents",
        passed: mismatches.is_empty(),
        detail: if mismatches.is_empty() { "5 shapes bit-identical".into() } else { format!("differs for {mismatches:?}") },
    }
}

/// `d_j p_j = d_i p_i + alpha T` on rendered scenes.
pub fn scene_oracle(scenes: usize, per_scene: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut made = 0;
    while made < scenes {
        let params = if made % 2 == 0 {
            SceneParams::random_general(64, &mut rng)
        } else {
            let s = rng.gen_range(1.5..3.0);
            SceneParams::random_forward(64, s, &mut rng)
        };
        let Ok(scene) = synth_two_view(&params, rng.gen()) else { continue };
        made += 1;
        let k_inv = scene.k.try_inverse().expect("invertible intrinsics");
        let n = scene.params.size;
        for _ in 0..per_scene {
            let (x, y) = (rng.gen_range(0..n), rng.gen_range(0..n));
            let idx = y * n + x;
            let (Some((u, v)), Some(dj)) = (scene.correspondence[idx], scene.depth_src[idx]) else { continue };
            let lhs = dj * (k_inv * Vec3::new(u, v, 1.0));
            let rhs = scene.depth_ref[idx] * (scene.rotation * k_inv * Vec3::new(x as f64, y as f64, 1.0))
                + scene.alpha * scene.translation;
            worst = worst.max((lhs - rhs).amax());
            checked += 1;
        }
    }
    Check {
        name: "synthetic correspondences satisfy the two-view depth relation",
        passed: checked > 0 && worst < 1e-9,
        detail: format!("{checked} pixels over {scenes} scenes, max component error {worst:.3e}"),
    }
}

fn tiny_model() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.pyramid.channels = [8, 8, 16, 16, 16];
    cfg.heads = 2;
    cfg.fine_heads = 2;
    cfg.aggregation.blocks = 1;
    cfg.train_size = (64, 64);
    cfg
}

/// Checkpoint bytes and forward outputs survive a save/load cycle, and the
/// overlay survives a netpbm round trip.
pub fn persistence(seed: u64) -> Check {
    let cfg = tiny_model();
    let params = ModelParams::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
    let bytes = checkpoint::encode(&params, &cfg);
    let loaded = checkpoint::decode(&bytes).and_then(|c| checkpoint::load_params::<f64>(&c, &cfg));
    let mut problems = Vec::new();
    match loaded {
        Ok(back) => {
            if checkpoint::encode(&back, &cfg) != bytes {
                problems.push("re-encoded bytes differ".to_string());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let img = Image { width: 64, height: 64, channels: 1, data: (0..64 * 64).map(|_| rng.gen()).collect() };
            let map = img.to_feature_map::<f64>();
            let a = match_pair(&map, &map, &params, &cfg, GridPolicy::Fixed).map(|o| o.correspondences());
            let b = match_pair(&map, &map, &back, &cfg, GridPolicy::Fixed).map(|o| o.correspondences());
            match (a, b) {
                (Ok(a), Ok(b)) if a == b => {
                    let overlay = render_overlay(&img, &img, &a);
                    match parse_netpbm(&overlay.to_netpbm()) {
                        Ok(o) if (o.width, o.height, o.channels) == (128, 64, 3) => {}
                        Ok(o) => problems.push(format!("overlay read back as {}x{}x{}", o.width, o.height, o.channels)),
                        Err(e) => problems.push(format!("overlay unreadable: {e}")),
                    }
                }
                (Ok(_), Ok(_)) => problems.push("match outputs differ after reload".into()),
                (Err(e), _) | (_, Err(e)) => problems.push(format!("matching failed: {e}")),
            }
        }
        Err(e) => problems.push(format!("reload failed: {e}")),
    }
    Check {
        name: "checkpoint and overlay round trips",
        passed: problems.is_empty(),
        detail: if problems.is_empty() { format!("{} bytes bit-identical, outputs identical", bytes.len()) } else { problems.join("; ") },
    }
}

/// Every oracle suite at its acceptance size except the timing protocol.
pub fn derived_suite(seed: u64) -> Vec<Check> {
    vec![
        sparse_equivalence(500, seed),
        sparse_gradients(100, seed + 1),
        matching_oracles(200, 100, seed + 2),
        geometry_oracle(100, 50, seed + 3).0,
        grid_sizing(2000, seed + 4),
        scene_oracle(20, 200, seed + 5),
        npe_contract(),
        persistence(seed + 6),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        for c in [
            sparse_equivalence(40, 1),
            sparse_gradients(8, 2),
            matching_oracles(4, 2, 3),
            geometry_oracle(3, 30, 4).0,
            grid_sizing(100, 5),
            scene_oracle(2, 100, 6),
            npe_contract(),
            persistence(7),
        ] {
            assert!(c.passed, "{}", c.line());
        }
    }

    #[test]
    fn scaling_rows_report_storage() {
        let rows = sparse_scaling(32, &[64, 128], 3, 0);
        assert_eq!(rows[0].aux_elements * 2, rows[1].aux_elements);
        assert!(rows.iter().all(|r| r.seconds > 0.0));
    }
}
