//! Training objectives: spot-matrix and coarse-matrix negative
//! log-likelihoods and the variance-weighted fine L2 loss.
//!
//! Every loss returns its value together with the gradient with respect to
//! its direct inputs (score matrices or refined coordinates).

use log::warn;

use crate::aggregation::SpotMatrices;
use crate::coarse::DualSoftmax;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor applied to the fine-loss variance before inversion.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// `-mean log P(i, j)` over `pairs`, with the gradient w.r.t. the scores.
pub fn nll<T: Scalar>(p: &DualSoftmax<T>, pairs: &[(usize, usize)]) -> (T, Tensor<T>) {
    if pairs.is_empty() {
        return (T::zero(), Tensor::zeros(&[p.rows, p.cols]));
    }
    let n = T::lit(pairs.len() as f64);
    let value = -pairs.iter().map(|&(i, j)| p.log_prob(i, j)).sum::<T>() / n;
    (value, p.nll_grad(pairs, T::one() / n))
}

/// Spot loss, averaged over blocks and both directions. Returns one
/// `(d_ref_to_src, d_src_to_ref)` score gradient per block.
pub fn spot_loss<T: Scalar>(blocks: &[SpotMatrices<T>], gt: &[(usize, usize)]) -> (T, Vec<(Tensor<T>, Tensor<T>)>) {
    if gt.is_empty() {
        warn!("spot loss: no ground-truth matches, loss is zero");
    }
    if blocks.is_empty() {
        return (T::zero(), Vec::new());
    }
    let swapped: Vec<(usize, usize)> = gt.iter().map(|&(i, j)| (j, i)).collect();
    let w = T::one() / T::lit(2.0 * blocks.len() as f64);
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(blocks.len());
    for b in blocks {
        let (a, mut ga) = nll(&b.ref_to_src, gt);
        let (c, mut gc) = nll(&b.src_to_ref, &swapped);
        total += (a + c) * w;
        ga.scale(w);
        gc.scale(w);
        grads.push((ga, gc));
    }
    (total, grads)
}

/// Coarse loss over the dual-softmax coarse matrix.
pub fn coarse_loss<T: Scalar>(p_c: &DualSoftmax<T>, gt: &[(usize, usize)]) -> (T, Tensor<T>) {
    if gt.is_empty() {
        warn!("coarse loss: no ground-truth matches, loss is zero");
    }
    nll(p_c, gt)
}

/// One refined match against its target, all in image pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FineSample {
    pub predicted: (f64, f64),
    pub variance: f64,
    pub target: (f64, f64),
}

/// `mean w |x - x_gt|^2` with detached weights `w = (1 / sigma) / mean(1 / sigma)`,
/// `sigma` the heatmap standard deviation (floored). Returns the gradient
/// w.r.t. each predicted coordinate.
pub fn fine_loss(samples: &[FineSample]) -> (f64, Vec<(f64, f64)>) {
    if samples.is_empty() {
        return (0.0, Vec::new());
    }
    let n = samples.len() as f64;
    let inv: Vec<f64> = samples.iter().map(|s| 1.0 / s.variance.max(VARIANCE_FLOOR).sqrt()).collect();
    let mean = inv.iter().sum::<f64>() / n;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(samples.len());
    for (s, &i) in samples.iter().zip(&inv) {
        let w = i / mean;
        let (dx, dy) = (s.predicted.0 - s.target.0, s.predicted.1 - s.target.1);
        total += w * (dx * dx + dy * dy);
        grads.push((2.0 * w * dx / n, 2.0 * w * dy / n));
    }
    (total / n, grads)
}

pub fn total_loss<T: Scalar>(l_s: T, l_c: T, l_f: T) -> T {
    l_s + l_c + l_f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coarse::similarity_matrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_scores(n: usize, m: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, m], |_| rng.gen_range(-3.0..3.0))
    }

    #[test]
    fn certain_probabilities_give_zero() {
        // a 1x1 matrix has probability one everywhere
        let p = DualSoftmax::new(&Tensor::<f64>::zeros(&[1, 1])).unwrap();
        assert_eq!(coarse_loss(&p, &[(0, 0)]).0, 0.0);
        let blocks = vec![SpotMatrices { ref_to_src: p.clone(), src_to_ref: p.transposed() }];
        assert_eq!(spot_loss(&blocks, &[(0, 0)]).0, 0.0);
    }

    #[test]
    fn probability_inverse_e_gives_one() {
        // row softmax over [0, ln(e - 1)] puts 1/e on column 0
        let s = Tensor::from_vec(&[1, 2], vec![0.0, (std::f64::consts::E - 1.0).ln()]).unwrap();
        let p = DualSoftmax::row_only(&s).unwrap();
        assert!((coarse_loss(&p, &[(0, 0)]).0 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_dual_softmax_gives_two_log_n() {
        let n = 6;
        let p = DualSoftmax::new(&Tensor::<f64>::zeros(&[n, n])).unwrap();
        let (l, _) = coarse_loss(&p, &[(0, 3), (2, 2), (5, 1)]);
        assert!((l - 2.0 * (n as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_ground_truth_is_zero() {
        let p = DualSoftmax::new(&random_scores(3, 4, 1)).unwrap();
        let (l, g) = coarse_loss(&p, &[]);
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
        assert_eq!(fine_loss(&[]).0, 0.0);
    }

    #[test]
    fn fine_examples() {
        let exact = FineSample { predicted: (3.0, 4.0), variance: 2.0, target: (3.0, 4.0) };
        assert_eq!(fine_loss(&[exact]).0, 0.0);
        let one = FineSample { predicted: (4.0, 4.0), variance: 1.0, target: (3.0, 4.0) };
        assert_eq!(fine_loss(&[one]).0, 1.0);
        let zero_var = FineSample { predicted: (4.0, 4.0), variance: 0.0, target: (3.0, 4.0) };
        assert_eq!(fine_loss(&[zero_var]).0, 1.0);
        // the sharper heatmap gets twice the weight
        let sharp = FineSample { predicted: (5.0, 4.0), variance: 1.0, target: (3.0, 4.0) };
        let flat = FineSample { predicted: (3.0, 4.0), variance: 4.0, target: (3.0, 4.0) };
        assert!((fine_loss(&[sharp, flat]).0 - 4.0 * 4.0 / 3.0 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_loss(0.0, 0.0, 0.0), 0.0);
        assert_eq!(total_loss(1.0, 2.0, 3.0), 6.0);
    }

    #[test]
    fn score_gradient_matches_finite_differences() {
        let s = random_scores(4, 5, 2);
        let gt = [(0, 1), (2, 4), (3, 0)];
        let (_, g) = coarse_loss(&DualSoftmax::new(&s).unwrap(), &gt);
        let h = 1e-6;
        for idx in 0..s.len() {
            let mut a = s.clone();
            a.data_mut()[idx] += h;
            let mut b = s.clone();
            b.data_mut()[idx] -= h;
            let fd = (coarse_loss(&DualSoftmax::new(&a).unwrap(), &gt).0 - coarse_loss(&DualSoftmax::new(&b).unwrap(), &gt).0) / (2.0 * h);
            assert!((fd - g.data()[idx]).abs() < 1e-7, "{idx}: {fd} vs {}", g.data()[idx]);
        }
    }

    #[test]
    fn spot_loss_direction_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = crate::tensor::FeatureMap::from_fn(2, 2, 3, crate::tensor::Level::EIGHTH, |_, _, _| rng.gen_range(-1.0..1.0));
        let g = crate::tensor::FeatureMap::from_fn(2, 3, 3, crate::tensor::Level::EIGHTH, |_, _, _| rng.gen_range(-1.0..1.0));
        let gt = [(0, 2), (3, 5)];
        let loss = |s: &Tensor<f64>| {
            let p = DualSoftmax::row_only(s).unwrap();
            let q = DualSoftmax::row_only(&s.transpose2()).unwrap();
            spot_loss(&[SpotMatrices { ref_to_src: p, src_to_ref: q }], &gt)
        };
        let s = similarity_matrix(&f, &g, 0.7).unwrap();
        let (_, grads) = loss(&s);
        let total = {
            let mut t = grads[0].0.clone();
            t.add_assign(&grads[0].1.transpose2());
            t
        };
        let h = 1e-6;
        for idx in 0..s.len() {
            let mut a = s.clone();
            a.data_mut()[idx] += h;
            let mut b = s.clone();
            b.data_mut()[idx] -= h;
            let fd = (loss(&a).0 - loss(&b).0) / (2.0 * h);
            assert!((fd - total.data()[idx]).abs() < 1e-7);
        }
    }

    proptest! {
        #[test]
        fn losses_match_direct_sums(seed in 0u64..500, n in 1usize..8, m in 1usize..8) {
            let s = random_scores(n, m, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let gt: Vec<(usize, usize)> = (0..rng.gen_range(1..6)).map(|_| (rng.gen_range(0..n), rng.gen_range(0..m))).collect();
            // direct dual softmax
            let row = |i: usize, j: usize| s.at2(i, j).exp() / (0..m).map(|k| s.at2(i, k).exp()).sum::<f64>();
            let col = |i: usize, j: usize| s.at2(i, j).exp() / (0..n).map(|k| s.at2(k, j).exp()).sum::<f64>();
            let direct = -gt.iter().map(|&(i, j)| (row(i, j) * col(i, j)).ln()).sum::<f64>() / gt.len() as f64;
            let (l, _) = coarse_loss(&DualSoftmax::new(&s).unwrap(), &gt);
            prop_assert!((l - direct).abs() < 1e-12 * direct.abs().max(1.0));

            let p = DualSoftmax::new(&s).unwrap();
            let blocks = vec![SpotMatrices { ref_to_src: p.clone(), src_to_ref: p.transposed() }; 3];
            let (ls, _) = spot_loss(&blocks, &gt);
            prop_assert!((ls - direct).abs() < 1e-12 * direct.abs().max(1.0));

            let samples: Vec<FineSample> = (0..rng.gen_range(1..10))
                .map(|_| FineSample {
                    predicted: (rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0)),
                    variance: rng.gen_range(0.1..5.0),
                    target: (rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0)),
                })
                .collect();
            let mean_inv = samples.iter().map(|s| 1.0 / s.variance.sqrt()).sum::<f64>() / samples.len() as f64;
            let direct_f = samples.iter()
                .map(|s| ((s.predicted.0 - s.target.0).powi(2) + (s.predicted.1 - s.target.1).powi(2)) / s.variance.sqrt() / mean_inv)
                .sum::<f64>() / samples.len() as f64;
            prop_assert!((fine_loss(&samples).0 - direct_f).abs() < 1e-12 * direct_f.max(1.0));

            let (a, b, c): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
            prop_assert!((total_loss(a, b, c) - (a + b + c)).abs() < 1e-15);
        }
    }
}
