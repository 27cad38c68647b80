//! Independent reference implementations.
//!
//! Everything here is deliberately naive: explicit loops, no shared code with
//! the optimized kernels. Tests, the acceptance suite and `selftest` compare
//! the production paths against these.

/// Neumaier-compensated sum.
pub fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Softmax of a row evaluated as `1 / sum_j exp(x_j - x_i)` with compensated
/// summation; a different route from the max-subtracted kernel.
pub fn softmax_reference(row: &[f64]) -> Vec<f64> {
    row.iter()
        .map(|&xi| 1.0 / compensated_sum(row.iter().map(|&xj| (xj - xi).exp())))
        .collect()
}

/// Central finite differences of `f` at `x` for the listed coordinates.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], coords: &[usize], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            probe[i] = x[i] + step;
            let plus = f(&probe);
            probe[i] = x[i] - step;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Normwise relative error `max|a - b| / max(max|b|, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let scale = numeric.iter().fold(0.0f64, |m, b| m.max(b.abs())).max(floor);
    diff / scale
}

/// Naive quadruple-loop cross-correlation over HWC data with a
/// `[out, k, k, in]` kernel and zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_reference(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kernel: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut acc = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += input[((iy as usize) * w + ix as usize) * cin + ci]
                                * kernel[((co * k + ky) * k + kx) * cin + ci];
                        }
                    }
                }
                out[(oy * ow + ox) * cout + co] = acc;
            }
        }
    }
    (out, oh, ow)
}

/// Dense multi-head attention with an optional boolean mask (`false` entries
/// are excluded as if their logit were minus infinity). Layout
/// `[tokens, heads, dims]`. Fully masked rows produce zeros.
#[allow(clippy::too_many_arguments)]
pub fn masked_attention_reference(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    nq: usize,
    nk: usize,
    heads: usize,
    dims: usize,
    scale: f64,
    mask: Option<&[bool]>,
) -> Vec<f64> {
    let c = heads * dims;
    let mut out = vec![0.0; nq * c];
    for h in 0..heads {
        for i in 0..nq {
            let logits: Vec<Option<f64>> = (0..nk)
                .map(|j| {
                    if mask.is_some_and(|m| !m[i * nk + j]) {
                        return None;
                    }
                    let mut dot = 0.0;
                    for d in 0..dims {
                        dot += q[i * c + h * dims + d] * k[j * c + h * dims + d];
                    }
                    Some(scale * dot)
                })
                .collect();
            let kept: Vec<f64> = logits.iter().flatten().copied().collect();
            if kept.is_empty() {
                continue;
            }
            let probs = softmax_reference(&kept);
            let mut pi = probs.iter();
            for (j, l) in logits.iter().enumerate() {
                if l.is_some() {
                    let p = *pi.next().unwrap();
                    for d in 0..dims {
                        out[i * c + h * dims + d] += p * v[j * c + h * dims + d];
                    }
                }
            }
        }
    }
    out
}

/// Normalized kernel attention evaluated as an explicit quadratic form:
/// `out_i = sum_j <phi(q_i), phi(k_j)> v_j / sum_j <phi(q_i), phi(k_j)>`.
pub fn linear_attention_reference(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    nq: usize,
    nk: usize,
    heads: usize,
    dims: usize,
) -> Vec<f64> {
    let phi = |x: f64| if x > 0.0 { x + 1.0 } else { x.exp() };
    let c = heads * dims;
    let mut out = vec![0.0; nq * c];
    for h in 0..heads {
        for i in 0..nq {
            let mut den = 0.0;
            let mut num = vec![0.0; dims];
            for j in 0..nk {
                let mut s = 0.0;
                for d in 0..dims {
                    s += phi(q[i * c + h * dims + d]) * phi(k[j * c + h * dims + d]);
                }
                den += s;
                for d in 0..dims {
                    num[d] += s * v[j * c + h * dims + d];
                }
            }
            for d in 0..dims {
                out[i * c + h * dims + d] = num[d] / den;
            }
        }
    }
    out
}

/// Dual-softmax by explicit exponentials: `P(i,j) = e^{S_ij} / sum_k e^{S_ik} * e^{S_ij} / sum_k e^{S_kj}`.
pub fn dual_softmax_reference(s: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut p = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let row: f64 = compensated_sum((0..cols).map(|k| (s[i * cols + k] - s[i * cols + j]).exp()));
            let col: f64 = compensated_sum((0..rows).map(|k| (s[k * cols + j] - s[i * cols + j]).exp()));
            p[i * cols + j] = 1.0 / row / col;
        }
    }
    p
}

/// Quadratic mutual-nearest-neighbour scan. Returns `(i, j, p)` with
/// `p >= threshold`, ties broken toward the lowest index.
pub fn mnn_reference(p: &[f64], rows: usize, cols: usize, threshold: f64) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            let v = p[i * cols + j];
            if v < threshold {
                continue;
            }
            let row_best = (0..cols).all(|k| p[i * cols + k] < v || (p[i * cols + k] == v && k >= j));
            let col_best = (0..rows).all(|k| p[k * cols + j] < v || (p[k * cols + j] == v && k >= i));
            if row_best && col_best {
                out.push((i, j, v));
            }
        }
    }
    out
}

/// Exhaustive top-`k` by enumerating every subset of size `min(k, n)` and
/// keeping the one with the largest score sum; ties prefer the
/// lexicographically smallest index set. Returns sorted indices.
pub fn topk_by_enumeration(scores: &[f64], k: usize) -> Vec<usize> {
    let n = scores.len();
    let k = k.min(n);
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut subset: Vec<usize> = (0..k).collect();
    loop {
        let total: f64 = subset.iter().map(|&i| scores[i]).sum();
        let better = match &best {
            None => true,
            Some((b, _)) => total > *b + 1e-15,
        };
        if better {
            best = Some((total, subset.clone()));
        }
        // next combination in lexicographic order
        let Some(i) = (0..k).rev().find(|&i| subset[i] < n - k + i) else {
            return best.map(|(_, s)| s).unwrap_or_default();
        };
        subset[i] += 1;
        for j in i + 1..k {
            subset[j] = subset[j - 1] + 1;
        }
    }
}
