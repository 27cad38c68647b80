//! Hand-written adjoints against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spotmatch::attention::{cross_attention_backward, cross_attention_forward, AttentionKind, AttentionLayerParams, TokenMasks};
use spotmatch::numerics::{conv2d, conv2d_backward, resample, resample_backward, Resample};
use spotmatch::oracle::{central_difference, relative_error};
use spotmatch::params::Parameters;
use spotmatch::sparse::{build_plan, sparse_backward, sparse_forward, SparseAttentionPlan};
use spotmatch::{FeatureMap, Level, Tensor};

const STEP: f64 = 1e-4;

fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Up to `count` coordinates spread over `0..n`.
fn probe_coords(n: usize, count: usize) -> Vec<usize> {
    let step = (n / count).max(1);
    (0..n).step_by(step).take(count).collect()
}

fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64, what: &str) {
    let err = relative_error(analytic, numeric, 1e-6);
    assert!(err < tol, "{what}: relative error {err:.3e}\n analytic {analytic:?}\n numeric {numeric:?}");
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
        let map = FeatureMap::from_vec(6, 6, 2, Level::HALF, rand_vec(72, &mut rng)).unwrap();
        let kernel = Tensor::from_vec(&[3, k, k, 2], rand_vec(3 * k * k * 2, &mut rng)).unwrap();
        let bias = rand_vec(3, &mut rng);
        let out = conv2d(&map, &kernel, Some(&bias), stride, pad).unwrap();
        let w = rand_vec(out.data.len(), &mut rng);
        let up = FeatureMap::from_vec(out.height, out.width, 3, out.level, w.clone()).unwrap();
        let g = conv2d_backward(&map, &kernel, stride, pad, &up).unwrap();

        let coords = probe_coords(map.data.len(), 20);
        let num = central_difference(
            |x| {
                let m = FeatureMap::from_vec(6, 6, 2, Level::HALF, x.to_vec()).unwrap();
                dot(&conv2d(&m, &kernel, Some(&bias), stride, pad).unwrap().data, &w)
            },
            &map.data,
            &coords,
            STEP,
        );
        let ana: Vec<f64> = coords.iter().map(|&i| g.input.data[i]).collect();
        assert_close(&ana, &num, 1e-4, "conv input");

        let coords = probe_coords(kernel.len(), 20);
        let num = central_difference(
            |x| {
                let kk = Tensor::from_vec(kernel.shape(), x.to_vec()).unwrap();
                dot(&conv2d(&map, &kk, Some(&bias), stride, pad).unwrap().data, &w)
            },
            kernel.data(),
            &coords,
            STEP,
        );
        let ana: Vec<f64> = coords.iter().map(|&i| g.kernel.data()[i]).collect();
        assert_close(&ana, &num, 1e-4, "conv kernel");

        let num = central_difference(
            |b| dot(&conv2d(&map, &kernel, Some(b), stride, pad).unwrap().data, &w),
            &bias,
            &[0, 1, 2],
            STEP,
        );
        assert_close(&g.bias, &num, 1e-4, "conv bias");
    }
}

#[test]
fn resample_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for mode in [Resample::DOWN2, Resample::DOWN4, Resample::UP2, Resample::UP4] {
        let map = FeatureMap::from_vec(8, 4, 2, Level::EIGHTH, rand_vec(64, &mut rng)).unwrap();
        let out = resample(&map, mode).unwrap();
        let w = rand_vec(out.data.len(), &mut rng);
        let up = FeatureMap::from_vec(out.height, out.width, 2, out.level, w.clone()).unwrap();
        let g = resample_backward(&up, mode, (8, 4), Level::EIGHTH).unwrap();
        let coords = probe_coords(64, 30);
        let num = central_difference(
            |x| dot(&resample(&FeatureMap::from_vec(8, 4, 2, Level::EIGHTH, x.to_vec()).unwrap(), mode).unwrap().data, &w),
            &map.data,
            &coords,
            STEP,
        );
        let ana: Vec<f64> = coords.iter().map(|&i| g.data[i]).collect();
        assert_close(&ana, &num, 1e-4, &format!("{mode:?}"));
    }
}

#[test]
fn sparse_operator_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let (nq, nk, heads, dims) = (8, 8, 2, 4);
        let pairs: Vec<(usize, usize)> =
            (0..nq).flat_map(|q| (0..nk).map(move |k| (q, k))).filter(|_| rng.gen_bool(0.4)).collect();
        let plan = build_plan(&pairs, nq, nk).unwrap();
        let shape = [nq, heads, dims];
        let mk = |rng: &mut ChaCha8Rng| Tensor::from_vec(&shape, rand_vec(nq * heads * dims, rng)).unwrap();
        let (q, k, v, up) = (mk(&mut rng), mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let scale = 0.5;
        let g = sparse_backward(&q, &k, &v, &plan, scale, &up).unwrap();
        let loss = |q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>| {
            dot(sparse_forward(q, k, v, &plan, scale).unwrap().output.data(), up.data())
        };
        let coords: Vec<usize> = (0..q.len()).collect();
        let nq_ = central_difference(|x| loss(&Tensor::from_vec(&shape, x.to_vec()).unwrap(), &k, &v), q.data(), &coords, STEP);
        let nk_ = central_difference(|x| loss(&q, &Tensor::from_vec(&shape, x.to_vec()).unwrap(), &v), k.data(), &coords, STEP);
        let nv_ = central_difference(|x| loss(&q, &k, &Tensor::from_vec(&shape, x.to_vec()).unwrap()), v.data(), &coords, STEP);
        assert_close(g.q.data(), &nq_, 1e-4, "sparse dq");
        assert_close(g.k.data(), &nk_, 1e-4, "sparse dk");
        assert_close(g.v.data(), &nv_, 1e-4, "sparse dv");
    }
}

fn check_layer(kind_name: &str, masks: TokenMasks<'_>, layer_norm: bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let c = 8;
    let x = FeatureMap::from_vec(6, 6, c, Level::EIGHTH, rand_vec(36 * c, &mut rng)).unwrap();
    let y = FeatureMap::from_vec(6, 6, c, Level::EIGHTH, rand_vec(36 * c, &mut rng)).unwrap();
    let mut params = AttentionLayerParams::<f64>::init(c, 2, &mut rng);
    params.layer_norm = layer_norm;
    let pairs: Vec<(usize, usize)> = (0..36).flat_map(|q| (0..36).map(move |k| (q, k))).filter(|_| rng.gen_bool(0.3)).collect();
    let plan = build_plan(&pairs, 36, 36).unwrap();
    let dense = SparseAttentionPlan::dense(36, 36);
    let kind = match kind_name {
        "vanilla" => AttentionKind::Vanilla,
        "linear" => AttentionKind::Linear,
        "sparse" => AttentionKind::Sparse(&plan),
        _ => AttentionKind::Sparse(&dense),
    };
    let w = rand_vec(36 * c, &mut rng);
    let (_, cache) = cross_attention_forward(&x, &y, &params, kind, masks).unwrap();
    let up = FeatureMap::from_vec(6, 6, c, Level::EIGHTH, w.clone()).unwrap();
    let mut grads = params.zeros_like();
    let (dx, dy) = cross_attention_backward(&cache, &params, &up, &mut grads).unwrap();

    let loss = |x: &FeatureMap<f64>, y: &FeatureMap<f64>, p: &AttentionLayerParams<f64>| {
        dot(&cross_attention_forward(x, y, p, kind, masks).unwrap().0.data, &w)
    };
    let coords = probe_coords(x.data.len(), 24);
    let num = central_difference(
        |v| loss(&FeatureMap::from_vec(6, 6, c, Level::EIGHTH, v.to_vec()).unwrap(), &y, &params),
        &x.data,
        &coords,
        STEP,
    );
    let ana: Vec<f64> = coords.iter().map(|&i| dx.data[i]).collect();
    assert_close(&ana, &num, 1e-4, &format!("{kind_name} dx"));
    let num = central_difference(
        |v| loss(&x, &FeatureMap::from_vec(6, 6, c, Level::EIGHTH, v.to_vec()).unwrap(), &params),
        &y.data,
        &coords,
        STEP,
    );
    let ana: Vec<f64> = coords.iter().map(|&i| dy.data[i]).collect();
    assert_close(&ana, &num, 1e-4, &format!("{kind_name} dy"));

    let flat = params.flat_values();
    let gflat = grads.flat_values();
    let coords = probe_coords(flat.len(), 40);
    let num = central_difference(
        |v| {
            let mut p = params.clone();
            p.set_flat_values(v);
            loss(&x, &y, &p)
        },
        &flat,
        &coords,
        STEP,
    );
    let ana: Vec<f64> = coords.iter().map(|&i| gflat[i]).collect();
    assert_close(&ana, &num, 1e-4, &format!("{kind_name} params"));
}

#[test]
fn attention_layer_gradients() {
    for kind in ["vanilla", "linear", "sparse", "dense"] {
        check_layer(kind, TokenMasks::default(), false);
    }
    check_layer("linear", TokenMasks::default(), true);
}

#[test]
fn masked_attention_layer_gradients() {
    let qmask: Vec<bool> = (0..36).map(|i| i % 5 != 0).collect();
    let kmask: Vec<bool> = (0..36).map(|i| i % 4 != 1).collect();
    let masks = TokenMasks { query: Some(&qmask), key: Some(&kmask) };
    check_layer("vanilla", masks, false);
    check_layer("linear", masks, false);
}

#[test]
fn pyramid_gradients() {
    use spotmatch::pyramid::{pyramid_backward, pyramid_forward, Pyramid, PyramidConfig, PyramidParams};
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let cfg = PyramidConfig { channels: [4, 6, 8, 8, 8], color: false };
    let params = PyramidParams::<f64>::init(&cfg, &mut rng);
    let img = FeatureMap::from_vec(32, 32, 1, Level::FULL, rand_vec(1024, &mut rng)).unwrap();
    let (pyr, cache) = pyramid_forward(&img, &params).unwrap();
    let weights = |m: &FeatureMap<f64>, rng: &mut ChaCha8Rng| {
        FeatureMap::from_vec(m.height, m.width, m.channels, m.level, rand_vec(m.data.len(), rng)).unwrap()
    };
    let up = Pyramid {
        half: weights(&pyr.half, &mut rng),
        eighth: weights(&pyr.eighth, &mut rng),
        thirty_second: weights(&pyr.thirty_second, &mut rng),
    };
    let mut grads = params.zeros_like();
    let dimg = pyramid_backward(&cache, &params, &up, &mut grads).unwrap();
    let loss = |p: &PyramidParams<f64>, im: &FeatureMap<f64>| {
        let (o, _) = pyramid_forward(im, p).unwrap();
        dot(&o.half.data, &up.half.data) + dot(&o.eighth.data, &up.eighth.data) + dot(&o.thirty_second.data, &up.thirty_second.data)
    };
    for (name, t) in grads.named_tensors() {
        let base = params.named_tensors().into_iter().find(|(n, _)| *n == name).unwrap().1.clone();
        let coords = probe_coords(base.len(), 6);
        let num = central_difference(
            |v| {
                let mut p = params.clone();
                p.visit_mut("", &mut |n, tt| {
                    if n == name {
                        tt.data_mut().copy_from_slice(v);
                    }
                });
                loss(&p, &img)
            },
            base.data(),
            &coords,
            STEP,
        );
        let ana: Vec<f64> = coords.iter().map(|&i| t.data()[i]).collect();
        assert_close(&ana, &num, 1e-4, &name);
    }
    let coords = probe_coords(1024, 16);
    let num = central_difference(
        |v| loss(&params, &FeatureMap::from_vec(32, 32, 1, Level::FULL, v.to_vec()).unwrap()),
        &img.data,
        &coords,
        STEP,
    );
    let ana: Vec<f64> = coords.iter().map(|&i| dimg.data[i]).collect();
    assert_close(&ana, &num, 1e-4, "image");
}

fn check_named<P: Parameters<f64> + Clone>(params: &P, grads: &P, loss: impl Fn(&P) -> f64, per_tensor: usize, tol: f64) {
    for (name, t) in grads.named_tensors() {
        let base = params.named_tensors().into_iter().find(|(n, _)| *n == name).unwrap().1.clone();
        let coords = probe_coords(base.len(), per_tensor);
        let num = central_difference(
            |v| {
                let mut p = params.clone();
                p.visit_mut("", &mut |n, tt| {
                    if n == name {
                        tt.data_mut().copy_from_slice(v);
                    }
                });
                loss(&p)
            },
            base.data(),
            &coords,
            STEP,
        );
        let ana: Vec<f64> = coords.iter().map(|&i| t.data()[i]).collect();
        assert_close(&ana, &num, tol, &name);
    }
}

#[test]
fn aggregation_gradients() {
    use spotmatch::aggregation::{aggregation_backward, aggregation_forward, AggregationConfig, AggregationParams, LevelPair};
    use spotmatch::loss::spot_loss;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let c = 8;
    let map = |h: usize, w: usize, l: Level, rng: &mut ChaCha8Rng| FeatureMap::from_vec(h, w, c, l, rand_vec(h * w * c, rng)).unwrap();
    // a 32x32 image gives 4x4 and 1x1 coarse maps
    let input = LevelPair {
        ref32: map(1, 1, Level::THIRTY_SECOND, &mut rng),
        src32: map(1, 1, Level::THIRTY_SECOND, &mut rng),
        ref8: map(4, 4, Level::EIGHTH, &mut rng),
        src8: map(4, 4, Level::EIGHTH, &mut rng),
    };
    let gt = [(0, 1), (5, 5), (10, 11), (15, 14)];
    for sequential in [false, true] {
        let cfg = AggregationConfig { blocks: 2, sequential, ..AggregationConfig::default() };
        let params = AggregationParams::<f64>::init(c, 2, 2, &mut rng);
        let w_r = rand_vec(16 * c, &mut rng);
        let w_s = rand_vec(16 * c, &mut rng);
        let loss = |p: &AggregationParams<f64>, x: &LevelPair<f64>| {
            let (o, _) = aggregation_forward(x, p, &cfg).unwrap();
            dot(&o.ref8.data, &w_r) + dot(&o.src8.data, &w_s) + spot_loss(&o.spot, &gt).0
        };
        let (out, cache) = aggregation_forward(&input, &params, &cfg).unwrap();
        let (_, d_spot) = spot_loss(&out.spot, &gt);
        let d_spot: Vec<_> = d_spot.into_iter().map(|(a, b)| (Some(a), Some(b))).collect();
        let up_r = FeatureMap::from_vec(4, 4, c, Level::EIGHTH, w_r.clone()).unwrap();
        let up_s = FeatureMap::from_vec(4, 4, c, Level::EIGHTH, w_s.clone()).unwrap();
        let mut grads = params.zeros_like();
        let d_in = aggregation_backward(&cache, &params, &up_r, &up_s, &d_spot, &mut grads).unwrap();
        check_named(&params, &grads, |p| loss(p, &input), 4, 1e-3);
        for (which, g) in [("ref8", &d_in.ref8), ("src8", &d_in.src8), ("ref32", &d_in.ref32), ("src32", &d_in.src32)] {
            let base = match which {
                "ref8" => &input.ref8,
                "src8" => &input.src8,
                "ref32" => &input.ref32,
                _ => &input.src32,
            };
            let coords = probe_coords(base.data.len(), 8);
            let num = central_difference(
                |v| {
                    let mut x = input.clone();
                    let m = match which {
                        "ref8" => &mut x.ref8,
                        "src8" => &mut x.src8,
                        "ref32" => &mut x.ref32,
                        _ => &mut x.src32,
                    };
                    m.data.copy_from_slice(v);
                    loss(&params, &x)
                },
                &base.data,
                &coords,
                STEP,
            );
            let ana: Vec<f64> = coords.iter().map(|&i| g.data[i]).collect();
            assert_close(&ana, &num, 1e-3, which);
        }
    }
}

#[test]
fn total_loss_gradients() {
    use spotmatch::aggregation::AggregationConfig;
    use spotmatch::model::{pair_loss, FineTarget, ModelConfig, ModelParams, Supervision};
    use spotmatch::pyramid::PyramidConfig;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let cfg = ModelConfig {
        pyramid: PyramidConfig { channels: [4, 6, 8, 8, 8], color: false },
        heads: 2,
        fine_heads: 2,
        aggregation: AggregationConfig { blocks: 2, ..AggregationConfig::default() },
        train_size: (32, 32),
        ..ModelConfig::default()
    };
    let params = ModelParams::<f64>::init(&cfg, &mut rng);
    let img_a = FeatureMap::from_vec(32, 32, 1, Level::FULL, rand_vec(1024, &mut rng)).unwrap();
    let img_b = FeatureMap::from_vec(32, 32, 1, Level::FULL, rand_vec(1024, &mut rng)).unwrap();
    let sup = Supervision {
        coarse: vec![(0, 0), (5, 6), (10, 10)],
        fine: vec![
            FineTarget { i: 0, j: 0, target: (5.0, 3.2), s_j: 5, weight_variance: Some(2.5) },
            FineTarget { i: 5, j: 6, target: (21.3, 12.9), s_j: 7, weight_variance: Some(2.5) },
            FineTarget { i: 10, j: 10, target: (19.0, 22.0), s_j: 9, weight_variance: Some(2.5) },
        ],
    };
    // the heatmap variance is detached from the gradient, so the check pins it
    let mut grads = params.zeros_like();
    let l = pair_loss(&img_a, &img_b, &sup, &params, &cfg, Some(&mut grads)).unwrap();
    assert!(l.spot > 0.0 && l.coarse > 0.0 && l.fine > 0.0);
    assert!((l.total - (l.spot + l.coarse + l.fine)).abs() < 1e-15 * l.total.max(1.0) * 4.0);
    check_named(&params, &grads, |p| pair_loss(&img_a, &img_b, &sup, p, &cfg, None).unwrap().total, 3, 1e-3);
}
