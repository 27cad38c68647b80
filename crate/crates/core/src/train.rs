//! Ground-truth construction, supervision sampling, the Adam optimizer with
//! warm-up and step decay, the training loop and held-out evaluation.

use log::{error, info};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::coarse::{cell_anchor, cell_of, COARSE_STRIDE};
use crate::error::{Error, Result};
use crate::geometry::grid_size_for_ratio;
use crate::model::{match_pair, pair_loss, CameraPair, FineTarget, GridPolicy, LossBreakdown, ModelConfig, ModelParams, Supervision};
use crate::params::Parameters;
use crate::scalar::Scalar;
use crate::synth::{synth_two_view, synth_warp_pair, PairTruth, PatternParams, SceneParams, WarpParams};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Linear warm-up length in optimizer steps.
    pub warmup_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of GT coarse pairs sampled per step.
    pub coarse_ratio: f64,
    /// Fraction of `fine_budget` used as fine targets per step.
    pub fine_ratio: f64,
    /// Maximum fine matches per pair.
    pub fine_budget: usize,
    /// Halve the rate every this many epochs; 0 disables decay.
    pub decay_every: usize,
    pub decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Evaluate on held-out pairs every this many epochs; 0 disables.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            warmup_steps: 200,
            epochs: 12,
            batch_size: 1,
            coarse_ratio: 0.5,
            fine_ratio: 0.2,
            fine_budget: 100,
            decay_every: 3,
            decay_factor: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            eval_every: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and nonnegative");
        }
        for (name, r) in [("coarse ratio", self.coarse_ratio), ("fine ratio", self.fine_ratio)] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config(format!("{name} {r} outside (0, 1]")));
            }
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return bad("adam moments need beta in [0, 1) and epsilon > 0");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad("decay factor outside (0, 1]");
        }
        Ok(())
    }

    /// Warm-up then step decay, for the zero-based `step` in `epoch`.
    pub fn learning_rate_at(&self, step: usize, epoch: usize) -> f64 {
        let warm = if self.warmup_steps == 0 { 1.0 } else { ((step + 1) as f64 / self.warmup_steps as f64).min(1.0) };
        let decays = epoch.checked_div(self.decay_every).unwrap_or(0);
        self.learning_rate * warm * self.decay_factor.powi(decays as i32)
    }
}

/// One GT coarse pair with its fine target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtMatch {
    pub i: usize,
    pub j: usize,
    /// Source position of the reference cell anchor.
    pub target: (f64, f64),
    /// Source magnification at the anchor.
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// `(height, width)` of the coarse grids.
    pub ref_grid: (usize, usize),
    pub src_grid: (usize, usize),
    pub matches: Vec<GtMatch>,
    /// Per reference cell: whether it has a GT match.
    pub valid: Vec<bool>,
}

impl GroundTruth {
    /// Warps every reference cell anchor and bins it into the source grid.
    /// Source cells hit by more than one reference cell are dropped.
    pub fn from_truth(truth: &dyn PairTruth) -> Self {
        let (img_ref, img_src) = truth.images();
        let ref_grid = (img_ref.height / COARSE_STRIDE, img_ref.width / COARSE_STRIDE);
        let src_grid = (img_src.height / COARSE_STRIDE, img_src.width / COARSE_STRIDE);
        let mut candidates = Vec::new();
        let mut hits = vec![0usize; src_grid.0 * src_grid.1];
        for i in 0..ref_grid.0 * ref_grid.1 {
            let (x, y) = (cell_anchor(i % ref_grid.1), cell_anchor(i / ref_grid.1));
            let Some(target) = truth.correspond(x, y) else { continue };
            let (Some(cx), Some(cy)) = (cell_of(target.0, src_grid.1), cell_of(target.1, src_grid.0)) else { continue };
            let j = cy * src_grid.1 + cx;
            hits[j] += 1;
            candidates.push(GtMatch { i, j, target, ratio: truth.scale_ratio(x, y) });
        }
        let matches: Vec<GtMatch> = candidates.into_iter().filter(|m| hits[m.j] == 1).collect();
        let mut valid = vec![false; ref_grid.0 * ref_grid.1];
        for m in &matches {
            valid[m.i] = true;
        }
        Self { ref_grid, src_grid, matches, valid }
    }

    pub fn for_cell(&self, i: usize) -> Option<&GtMatch> {
        // matches are sorted by i
        self.matches.binary_search_by_key(&i, |m| m.i).ok().map(|k| &self.matches[k])
    }
}

/// Uniform sample of `ceil(coarse_ratio |M|)` GT pairs; the first
/// `ceil(fine_ratio * fine_budget)` of them (in sample order) also get fine
/// targets with teacher-forced window sizes.
pub fn sample_supervision(gt: &GroundTruth, cfg: &TrainConfig, s_i: usize, rng: &mut impl Rng) -> Supervision {
    let n = gt.matches.len();
    if n == 0 {
        return Supervision::default();
    }
    let k = ((cfg.coarse_ratio * n as f64).ceil() as usize).clamp(1, n);
    let picked = sample(rng, n, k).into_vec();
    let f = ((cfg.fine_ratio * cfg.fine_budget as f64).ceil() as usize).min(k);
    let fine = picked[..f]
        .iter()
        .map(|&p| {
            let m = &gt.matches[p];
            FineTarget {
                i: m.i,
                j: m.j,
                target: m.target,
                s_j: m.ratio.map_or(s_i, |r| grid_size_for_ratio(r, s_i)),
                weight_variance: None,
            }
        })
        .collect();
    let mut coarse: Vec<(usize, usize)> = picked.iter().map(|&p| (gt.matches[p].i, gt.matches[p].j)).collect();
    coarse.sort_unstable();
    Supervision { coarse, fine }
}

/// A synthetic pair with its ground truth.
pub struct Sample {
    pub pair: Box<dyn PairTruth>,
    pub gt: GroundTruth,
}

impl Sample {
    pub fn new(pair: Box<dyn PairTruth>) -> Self {
        let gt = GroundTruth::from_truth(pair.as_ref());
        Self { pair, gt }
    }
}

/// Per-pair seed derived from a base seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    ChaCha8Rng::seed_from_u64(base ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15)).gen()
}

/// `count` rendered forward-motion scenes of `size` pixels whose central
/// magnification lies in `scales`; rejected placements are redrawn.
pub fn scene_dataset(count: usize, size: usize, scales: (f64, f64), pattern: &PatternParams, seed: u64) -> Result<Vec<Sample>> {
    (0..count)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, k as u64));
            for _ in 0..100 {
                let mut params = SceneParams::random_forward(size, rng.gen_range(scales.0..=scales.1), &mut rng);
                params.pattern = *pattern;
                if let Ok(scene) = synth_two_view(&params, rng.gen()) {
                    return Ok(Sample::new(Box::new(scene)));
                }
            }
            Err(Error::Config(format!("no valid scene for pair {k} after 100 draws")))
        })
        .collect()
}

/// `count` random warp pairs of `size` pixels with scales in `scales`.
pub fn warp_dataset(count: usize, size: usize, scales: (f64, f64), pattern: &PatternParams, seed: u64) -> Result<Vec<Sample>> {
    (0..count)
        .into_par_iter()
        .map(|k| {
            let s = derive_seed(seed, k as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let warp = WarpParams::random(size, scales, &mut rng);
            Ok(Sample::new(Box::new(synth_warp_pair(pattern, &warp, s)?)))
        })
        .collect()
}

/// First/second moment optimizer over flattened parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step<T: Scalar>(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let (c1, c2) = (1.0 - b1.powi(self.t), 1.0 - b2.powi(self.t));
        let mut values = params.flat_values();
        let g = grads.flat_values();
        for (k, p) in values.iter_mut().enumerate() {
            let gk = g[k].as_f64();
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * gk;
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * gk * gk;
            let update = lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + cfg.epsilon);
            *p = T::lit(p.as_f64() - update);
        }
        params.set_flat_values(&values);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

impl StepLog {
    /// `step loss l_s l_c l_f lr`.
    pub fn line(&self) -> String {
        let l = &self.loss;
        format!("{} {:.6e} {:.6e} {:.6e} {:.6e} {:.6e}", self.step, l.total, l.spot, l.coarse, l.fine, self.lr)
    }
}

/// Held-out matching quality.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalMetrics {
    /// GT reference cells whose extracted match lies within one source cell
    /// (Chebyshev) of the GT cell, over all GT pairs.
    pub recall: f64,
    /// Median distance of refined matches to their GT targets, pixels.
    pub epe_median: f64,
    pub gt_pairs: usize,
    pub matches: usize,
    pub scored_matches: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub eval: Option<EvalMetrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainEvent {
    Step(StepLog),
    Epoch(EpochSummary),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochSummary>,
}

/// How evaluation sizes source windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalPolicy {
    Fixed,
    /// Ground-truth magnification of each pair.
    KnownScale,
    /// Pose estimated from coarse matches with the pair's intrinsics.
    Estimated,
}

fn chebyshev(a: usize, b: usize, width: usize) -> usize {
    let (ay, ax) = (a / width, a % width);
    let (by, bx) = (b / width, b % width);
    ay.abs_diff(by).max(ax.abs_diff(bx))
}

/// Recall and fine end-point error over `samples`.
pub fn evaluate<T: Scalar>(samples: &[Sample], params: &ModelParams<T>, cfg: &ModelConfig, policy: EvalPolicy) -> Result<EvalMetrics> {
    let per_pair: Vec<(usize, usize, usize, Vec<f64>)> = samples
        .par_iter()
        .map(|s| {
            let (a, b) = s.pair.images();
            let cams = s.pair.intrinsics().map(|(k_ref, k_src)| CameraPair { k_ref, k_src });
            let policy = match (policy, &cams) {
                (EvalPolicy::KnownScale, _) => GridPolicy::KnownScale(s.pair.as_ref()),
                (EvalPolicy::Estimated, Some(c)) => GridPolicy::Estimated(c),
                _ => GridPolicy::Fixed,
            };
            let out = match_pair(&a.to_feature_map::<T>(), &b.to_feature_map::<T>(), params, cfg, policy)?;
            let predicted: Vec<Option<usize>> = {
                let mut p = vec![None; s.gt.valid.len()];
                for m in &out.coarse.matches {
                    p[m.i] = Some(m.j);
                }
                p
            };
            let hits = s
                .gt
                .matches
                .iter()
                .filter(|g| predicted[g.i].is_some_and(|j| chebyshev(j, g.j, s.gt.src_grid.1) <= 1))
                .count();
            let errors = out
                .coarse
                .matches
                .iter()
                .zip(out.correspondences())
                .filter_map(|(m, c)| {
                    s.gt.for_cell(m.i).map(|g| ((c.x_src - g.target.0).powi(2) + (c.y_src - g.target.1).powi(2)).sqrt())
                })
                .collect();
            Ok((hits, s.gt.matches.len(), out.coarse.len(), errors))
        })
        .collect::<Result<_>>()?;
    let hits: usize = per_pair.iter().map(|p| p.0).sum();
    let gt_pairs: usize = per_pair.iter().map(|p| p.1).sum();
    let matches: usize = per_pair.iter().map(|p| p.2).sum();
    let mut errors: Vec<f64> = per_pair.into_iter().flat_map(|p| p.3).collect();
    errors.sort_by(f64::total_cmp);
    Ok(EvalMetrics {
        recall: if gt_pairs == 0 { 0.0 } else { hits as f64 / gt_pairs as f64 },
        epe_median: median_sorted(&errors),
        gt_pairs,
        matches,
        scored_matches: errors.len(),
    })
}

/// Median of sorted values; NaN when empty.
pub fn median_sorted(v: &[f64]) -> f64 {
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

fn diagnostic(step: usize, pairs: &[usize], loss: Option<&LossBreakdown>, detail: &str) -> Error {
    let detail = format!("{detail}; pairs {pairs:?}; loss {loss:?}");
    error!("training diverged at step {step}: {detail}");
    Error::Diverged { step, detail }
}

/// Trains `params` in place. Each step averages the gradients of a batch of
/// pairs (computed in parallel, summed in a fixed order), so runs are
/// reproducible for a given seed regardless of thread count.
pub fn train_loop<T: Scalar>(
    data: &[Sample],
    heldout: &[Sample],
    params: &mut ModelParams<T>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&TrainEvent, &ModelParams<T>),
) -> Result<TrainReport> {
    cfg.validate()?;
    model.validate()?;
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut adam = Adam::new(params.parameter_count());
    let mut report = TrainReport::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut shuffle);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(LossBreakdown, ModelParams<T>)> = batch
                .par_iter()
                .map(|&p| {
                    let s = &data[p];
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ 0x5eed, (step * data.len() + p) as u64));
                    let sup = sample_supervision(&s.gt, cfg, model.fine_window, &mut rng);
                    let (a, b) = s.pair.images();
                    let mut g = params.zeros_like();
                    let loss = pair_loss(&a.to_feature_map::<T>(), &b.to_feature_map::<T>(), &sup, params, model, Some(&mut g))
                        .map_err(|e| diagnostic(step, batch, None, &e.to_string()))?;
                    Ok((loss, g))
                })
                .collect::<Result<_>>()?;
            let inv = 1.0 / batch.len() as f64;
            let mut grads = params.zeros_like();
            let mut loss = LossBreakdown::default();
            for (l, g) in &results {
                grads.accumulate(g);
                loss.total += l.total * inv;
                loss.spot += l.spot * inv;
                loss.coarse += l.coarse * inv;
                loss.fine += l.fine * inv;
            }
            grads.scale_all(T::lit(inv));
            if !grads.all_finite() {
                return Err(diagnostic(step, batch, Some(&loss), "non-finite gradient"));
            }
            let lr = cfg.learning_rate_at(step, epoch);
            adam.step(params, &grads, lr, cfg);
            if !params.all_finite() {
                return Err(diagnostic(step, batch, Some(&loss), "non-finite parameters after update"));
            }
            let log = StepLog { step, loss, lr };
            observer(&TrainEvent::Step(log), params);
            report.steps.push(log);
            epoch_loss += loss.total * batch.len() as f64;
            step += 1;
        }
        let eval = if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 && !heldout.is_empty() {
            Some(evaluate(heldout, params, model, EvalPolicy::KnownScale)?)
        } else {
            None
        };
        let summary = EpochSummary { epoch, mean_loss: epoch_loss / data.len() as f64, eval };
        match &eval {
            Some(e) => info!(
                "epoch {epoch}: loss {:.4} recall {:.3} epe {:.3} ({} matches)",
                summary.mean_loss, e.recall, e.epe_median, e.matches
            ),
            None => info!("epoch {epoch}: loss {:.4}", summary.mean_loss),
        }
        observer(&TrainEvent::Epoch(summary), params);
        report.epochs.push(summary);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::WarpPair;

    fn gt_with(n: usize) -> GroundTruth {
        GroundTruth {
            ref_grid: (4, 4),
            src_grid: (4, 4),
            matches: (0..n).map(|k| GtMatch { i: k, j: 15 - k, target: (1.0, 2.0), ratio: Some(2.0) }).collect(),
            valid: (0..16).map(|k| k < n).collect(),
        }
    }

    #[test]
    fn sampling_sizes() {
        let cfg = TrainConfig { coarse_ratio: 1.0, ..TrainConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gt = gt_with(10);
        let full = sample_supervision(&gt, &cfg, 5, &mut rng);
        assert_eq!(full.coarse, gt.matches.iter().map(|m| (m.i, m.j)).collect::<Vec<_>>());
        let half = sample_supervision(&gt, &TrainConfig::default(), 5, &mut rng);
        assert_eq!(half.coarse.len(), 5);
        assert_eq!(half.fine.len(), 5);
        assert!(half.fine.iter().all(|f| f.s_j == 11 && half.coarse.contains(&(f.i, f.j))));
        let gt = gt_with(16);
        let capped = TrainConfig { coarse_ratio: 1.0, fine_ratio: 0.2, fine_budget: 40, ..TrainConfig::default() };
        assert_eq!(sample_supervision(&gt, &capped, 5, &mut rng).fine.len(), 8);
        assert_eq!(sample_supervision(&gt_with(0), &cfg, 5, &mut rng), Supervision::default());
    }

    #[test]
    fn sampling_is_seeded() {
        let gt = gt_with(12);
        let cfg = TrainConfig::default();
        let a = sample_supervision(&gt, &cfg, 5, &mut ChaCha8Rng::seed_from_u64(3));
        let b = sample_supervision(&gt, &cfg, 5, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn schedule_warms_up_and_decays() {
        let cfg = TrainConfig { warmup_steps: 10, decay_every: 3, ..TrainConfig::default() };
        assert!((cfg.learning_rate_at(0, 0) - 1e-4).abs() < 1e-18);
        assert_eq!(cfg.learning_rate_at(9, 0), 1e-3);
        assert_eq!(cfg.learning_rate_at(500, 2), 1e-3);
        assert_eq!(cfg.learning_rate_at(500, 3), 5e-4);
        assert_eq!(cfg.learning_rate_at(500, 7), 2.5e-4);
    }

    #[test]
    fn identity_warp_ground_truth() {
        let pair = crate::synth::synth_warp_pair(&PatternParams::default(), &WarpParams::identity(64), 0).unwrap();
        let gt = GroundTruth::from_truth(&pair);
        assert_eq!(gt.matches.len(), 64);
        assert!(gt.matches.iter().all(|m| m.i == m.j && m.ratio == Some(1.0)));
        assert_eq!(gt.for_cell(9).unwrap().target, (cell_anchor(1), cell_anchor(1)));
    }

    #[test]
    fn collisions_are_dropped() {
        // halving the source maps pairs of reference cells onto one cell
        let warp = WarpParams { scale: 0.5, ..WarpParams::identity(64) };
        let pair: WarpPair = crate::synth::synth_warp_pair(&PatternParams::default(), &warp, 0).unwrap();
        let gt = GroundTruth::from_truth(&pair);
        let mut js: Vec<usize> = gt.matches.iter().map(|m| m.j).collect();
        js.sort_unstable();
        js.dedup();
        assert_eq!(js.len(), gt.matches.len());
        for m in &gt.matches {
            assert_eq!(cell_of(m.target.0, 8), Some(m.j % 8));
            assert_eq!(cell_of(m.target.1, 8), Some(m.j / 8));
        }
    }

    #[test]
    fn median_values() {
        assert!(median_sorted(&[]).is_nan());
        assert_eq!(median_sorted(&[1.0, 2.0, 10.0]), 2.0);
        assert_eq!(median_sorted(&[1.0, 2.0, 3.0, 10.0]), 2.5);
    }
}
