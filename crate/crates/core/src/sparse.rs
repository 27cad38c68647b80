//! General sparse attention over an explicit list of query/key pairs.
//!
//! Only the `L_m` dot products named by the plan are evaluated. Entries are
//! grouped by query, soft-maxed per group and head, and the weighted values
//! are scatter-summed back onto their query. Auxiliary storage is one weight
//! per plan entry and head, `L_m * heads` elements, independent of
//! `N_q * N_k`.

use std::fmt::Write as _;

use crate::error::{shape_err, Error, Result};
use crate::numerics::softmax_in_place;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Sorted, deduplicated `(query, key)` index pairs with per-query group
/// boundaries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparseAttentionPlan {
    n_queries: usize,
    n_keys: usize,
    query_index: Vec<usize>,
    key_index: Vec<usize>,
    offsets: Vec<usize>,
}

/// Builds a plan from arbitrary pairs; duplicates are dropped and the order
/// of the input does not matter.
pub fn build_plan(pairs: &[(usize, usize)], n_queries: usize, n_keys: usize) -> Result<SparseAttentionPlan> {
    for &(q, k) in pairs {
        if q >= n_queries {
            return Err(Error::IndexOutOfRange { index: q, extent: n_queries });
        }
        if k >= n_keys {
            return Err(Error::IndexOutOfRange { index: k, extent: n_keys });
        }
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut offsets = vec![0usize; n_queries + 1];
    for &(q, _) in &sorted {
        offsets[q + 1] += 1;
    }
    for i in 0..n_queries {
        offsets[i + 1] += offsets[i];
    }
    Ok(SparseAttentionPlan {
        n_queries,
        n_keys,
        query_index: sorted.iter().map(|p| p.0).collect(),
        key_index: sorted.iter().map(|p| p.1).collect(),
        offsets,
    })
}

impl SparseAttentionPlan {
    /// Plan from one key list per query. Each list is sorted and deduplicated.
    pub fn from_groups(mut groups: Vec<Vec<usize>>, n_keys: usize) -> Result<Self> {
        let n_queries = groups.len();
        let mut offsets = Vec::with_capacity(n_queries + 1);
        offsets.push(0);
        let mut query_index = Vec::new();
        let mut key_index = Vec::new();
        for (q, keys) in groups.iter_mut().enumerate() {
            keys.sort_unstable();
            keys.dedup();
            if let Some(&k) = keys.last() {
                if k >= n_keys {
                    return Err(Error::IndexOutOfRange { index: k, extent: n_keys });
                }
            }
            query_index.extend(std::iter::repeat_n(q, keys.len()));
            key_index.extend_from_slice(keys);
            offsets.push(key_index.len());
        }
        Ok(Self { n_queries, n_keys, query_index, key_index, offsets })
    }

    /// Every query attends to every key.
    pub fn dense(n_queries: usize, n_keys: usize) -> Self {
        Self::from_groups(vec![(0..n_keys).collect(); n_queries], n_keys).expect("dense plan is valid")
    }

    pub fn len(&self) -> usize {
        self.key_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.key_index.is_empty()
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn n_keys(&self) -> usize {
        self.n_keys
    }

    pub fn query_indices(&self) -> &[usize] {
        &self.query_index
    }

    pub fn key_indices(&self) -> &[usize] {
        &self.key_index
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.offsets
    }

    pub fn group(&self, q: usize) -> &[usize] {
        &self.key_index[self.offsets[q]..self.offsets[q + 1]]
    }

    /// Text dump: a `N_q N_k L_m` header, then one `q k` line per entry.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {} {}\n", self.n_queries, self.n_keys, self.len());
        for (q, k) in self.query_index.iter().zip(&self.key_index) {
            let _ = writeln!(s, "{q} {k}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |detail: String| Error::Format { what: "plan dump", detail };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("missing header".into()))?;
        let nums: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|e| bad(format!("header: {e}"))))
            .collect::<Result<_>>()?;
        if nums.len() != 3 {
            return Err(bad(format!("header needs 3 fields, got {}", nums.len())));
        }
        let mut pairs = Vec::with_capacity(nums[2]);
        for line in lines {
            let mut it = line.split_whitespace().map(|t| t.parse::<usize>());
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(q)), Some(Ok(k)), None) => pairs.push((q, k)),
                _ => return Err(bad(format!("bad entry line `{line}`"))),
            }
        }
        if pairs.len() != nums[2] {
            return Err(bad(format!("header promises {} entries, found {}", nums[2], pairs.len())));
        }
        build_plan(&pairs, nums[0], nums[1])
    }
}

/// Softmax applied independently to each `[boundaries[g], boundaries[g+1])`
/// slice of `values`.
pub fn grouped_softmax<T: Scalar>(values: &[T], boundaries: &[usize]) -> Vec<T> {
    let mut out = values.to_vec();
    for w in boundaries.windows(2) {
        softmax_in_place(&mut out[w[0]..w[1]]);
    }
    out
}

/// Output of [`sparse_forward`].
#[derive(Clone, Debug)]
pub struct SparseForward<T> {
    /// `[N_q, heads, dims]`.
    pub output: Tensor<T>,
    /// Normalized attention weights, entry-major: `weights[i * heads + h]`.
    pub weights: Vec<T>,
    /// Queries that had no plan entries; their output rows are zero.
    pub empty_queries: Vec<usize>,
}

impl<T> SparseForward<T> {
    /// Auxiliary elements allocated beyond inputs and output.
    pub fn aux_elements(&self) -> usize {
        self.weights.len()
    }
}

#[derive(Clone, Debug)]
pub struct SparseGrads<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
}

fn layout<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, plan: &SparseAttentionPlan) -> Result<(usize, usize)> {
    if q.rank() != 3 || k.rank() != 3 || v.rank() != 3 {
        return shape_err("sparse attention expects [tokens, heads, dims] tensors");
    }
    let (heads, dims) = (q.shape()[1], q.shape()[2]);
    if k.shape()[1..] != [heads, dims] || v.shape()[1..] != [heads, dims] {
        return shape_err(format!(
            "head layout mismatch: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    if q.shape()[0] != plan.n_queries || k.shape()[0] != plan.n_keys || v.shape()[0] != plan.n_keys {
        return shape_err(format!(
            "plan is {}x{} but q has {} tokens and k/v {}/{}",
            plan.n_queries,
            plan.n_keys,
            q.shape()[0],
            k.shape()[0],
            v.shape()[0]
        ));
    }
    Ok((heads, dims))
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn attention_weights<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    plan: &SparseAttentionPlan,
    scale: T,
    heads: usize,
    dims: usize,
) -> Vec<T> {
    let c = heads * dims;
    let (qd, kd) = (q.data(), k.data());
    let mut weights = vec![T::zero(); plan.len() * heads];
    let mut scratch = Vec::new();
    for query in 0..plan.n_queries {
        let (lo, hi) = (plan.offsets[query], plan.offsets[query + 1]);
        if lo == hi {
            continue;
        }
        let qrow = &qd[query * c..(query + 1) * c];
        for i in lo..hi {
            let krow = &kd[plan.key_index[i] * c..(plan.key_index[i] + 1) * c];
            for h in 0..heads {
                weights[i * heads + h] = scale * dot(&qrow[h * dims..(h + 1) * dims], &krow[h * dims..(h + 1) * dims]);
            }
        }
        for h in 0..heads {
            scratch.clear();
            scratch.extend((lo..hi).map(|i| weights[i * heads + h]));
            softmax_in_place(&mut scratch);
            for (i, &p) in (lo..hi).zip(&scratch) {
                weights[i * heads + h] = p;
            }
        }
    }
    weights
}

/// Sparse multi-head attention: `O[q] = sum_{i: M_q[i] = q} softmax_group(scale <Q[q], K[M_k[i]]>) V[M_k[i]]`.
pub fn sparse_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    plan: &SparseAttentionPlan,
    scale: T,
) -> Result<SparseForward<T>> {
    let (heads, dims) = layout(q, k, v, plan)?;
    let c = heads * dims;
    let weights = attention_weights(q, k, plan, scale, heads, dims);
    let mut out = vec![T::zero(); plan.n_queries * c];
    let mut empty_queries = Vec::new();
    let vd = v.data();
    for query in 0..plan.n_queries {
        let (lo, hi) = (plan.offsets[query], plan.offsets[query + 1]);
        if lo == hi {
            empty_queries.push(query);
            continue;
        }
        let orow = &mut out[query * c..(query + 1) * c];
        for i in lo..hi {
            let vrow = &vd[plan.key_index[i] * c..(plan.key_index[i] + 1) * c];
            for h in 0..heads {
                let w = weights[i * heads + h];
                for (o, &x) in orow[h * dims..(h + 1) * dims].iter_mut().zip(&vrow[h * dims..(h + 1) * dims]) {
                    *o += w * x;
                }
            }
        }
    }
    Ok(SparseForward { output: Tensor::from_vec(&[plan.n_queries, heads, dims], out)?, weights, empty_queries })
}

/// Exact adjoint of [`sparse_forward`]. Accumulation follows ascending plan
/// order, so results are bit-reproducible.
pub fn sparse_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    plan: &SparseAttentionPlan,
    scale: T,
    grad_out: &Tensor<T>,
) -> Result<SparseGrads<T>> {
    let (heads, dims) = layout(q, k, v, plan)?;
    let weights = attention_weights(q, k, plan, scale, heads, dims);
    sparse_backward_with_weights(q, k, v, plan, scale, &weights, grad_out)
}

/// [`sparse_backward`] reusing the weights retained by a forward pass.
pub fn sparse_backward_with_weights<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    plan: &SparseAttentionPlan,
    scale: T,
    weights: &[T],
    grad_out: &Tensor<T>,
) -> Result<SparseGrads<T>> {
    let (heads, dims) = layout(q, k, v, plan)?;
    if grad_out.shape() != [plan.n_queries, heads, dims] {
        return shape_err("sparse attention upstream gradient has the wrong shape");
    }
    if weights.len() != plan.len() * heads {
        return shape_err("sparse attention weights do not match the plan");
    }
    let c = heads * dims;
    let (qd, kd, vd, gd) = (q.data(), k.data(), v.data(), grad_out.data());
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut ds = Vec::new();
    for query in 0..plan.n_queries {
        let (lo, hi) = (plan.offsets[query], plan.offsets[query + 1]);
        if lo == hi {
            continue;
        }
        let grow = &gd[query * c..(query + 1) * c];
        ds.clear();
        ds.resize((hi - lo) * heads, T::zero());
        for i in lo..hi {
            let key = plan.key_index[i];
            let vrow = &vd[key * c..(key + 1) * c];
            let dvrow = &mut dv[key * c..(key + 1) * c];
            for h in 0..heads {
                let g = &grow[h * dims..(h + 1) * dims];
                let w = weights[i * heads + h];
                ds[(i - lo) * heads + h] = dot(g, &vrow[h * dims..(h + 1) * dims]);
                for (d, &x) in dvrow[h * dims..(h + 1) * dims].iter_mut().zip(g) {
                    *d += w * x;
                }
            }
        }
        for h in 0..heads {
            let mut inner = T::zero();
            for i in lo..hi {
                inner += weights[i * heads + h] * ds[(i - lo) * heads + h];
            }
            for i in lo..hi {
                let slot = &mut ds[(i - lo) * heads + h];
                *slot = scale * weights[i * heads + h] * (*slot - inner);
            }
        }
        let qrow = &qd[query * c..(query + 1) * c];
        for i in lo..hi {
            let key = plan.key_index[i];
            let krow = &kd[key * c..(key + 1) * c];
            for h in 0..heads {
                let s = ds[(i - lo) * heads + h];
                let r = h * dims..(h + 1) * dims;
                for (d, &x) in dq[query * c..(query + 1) * c][r.clone()].iter_mut().zip(&krow[r.clone()]) {
                    *d += s * x;
                }
                for (d, &x) in dk[key * c..(key + 1) * c][r.clone()].iter_mut().zip(&qrow[r]) {
                    *d += s * x;
                }
            }
        }
    }
    Ok(SparseGrads {
        q: Tensor::from_vec(q.shape(), dq)?,
        k: Tensor::from_vec(k.shape(), dk)?,
        v: Tensor::from_vec(v.shape(), dv)?,
    })
}

/// `1 / sqrt(dims)`.
pub fn default_scale<T: Scalar>(dims: usize) -> T {
    T::one() / T::lit(dims as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn single_pair_plan() {
        let plan = build_plan(&[(0, 0)], 1, 1).unwrap();
        assert_eq!(plan.len(), 1);
        assert_eq!(plan.boundaries(), &[0, 1]);
        let q = rand_tensor(&[1, 2, 3], 1);
        let k = rand_tensor(&[1, 2, 3], 2);
        let v = rand_tensor(&[1, 2, 3], 3);
        let out = sparse_forward(&q, &k, &v, &plan, 0.5).unwrap();
        assert_eq!(out.output.data(), v.data());
    }

    #[test]
    fn dense_plan_groups() {
        let plan = SparseAttentionPlan::dense(3, 4);
        assert_eq!(plan.len(), 12);
        assert_eq!(plan.boundaries(), &[0, 4, 8, 12]);
        let pairs: Vec<(usize, usize)> = (0..3).flat_map(|q| (0..4).map(move |k| (q, k))).collect();
        assert_eq!(build_plan(&pairs, 3, 4).unwrap(), plan);
    }

    #[test]
    fn shuffled_duplicates_give_same_plan() {
        let pairs = vec![(2, 1), (0, 3), (2, 1), (1, 0), (0, 0), (0, 3)];
        let mut expected = pairs.clone();
        expected.sort();
        expected.dedup();
        let a = build_plan(&pairs, 3, 4).unwrap();
        let b = build_plan(&expected, 3, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.query_indices(), &[0, 0, 1, 2]);
        assert_eq!(a.key_indices(), &[0, 3, 0, 1]);
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(build_plan(&[(0, 4)], 1, 4).is_err());
        assert!(build_plan(&[(1, 0)], 1, 4).is_err());
    }

    #[test]
    fn empty_group_reported_and_zero() {
        let plan = build_plan(&[(0, 0), (2, 1)], 3, 2).unwrap();
        let q = rand_tensor(&[3, 1, 2], 4);
        let k = rand_tensor(&[2, 1, 2], 5);
        let v = rand_tensor(&[2, 1, 2], 6);
        let out = sparse_forward(&q, &k, &v, &plan, 1.0).unwrap();
        assert_eq!(out.empty_queries, vec![1]);
        assert_eq!(&out.output.data()[2..4], &[0.0, 0.0]);
    }

    #[test]
    fn grouped_softmax_examples() {
        assert_eq!(grouped_softmax(&[3.7f64], &[0, 1]), vec![1.0]);
        assert_eq!(grouped_softmax(&[0.0f64; 4], &[0, 4]), vec![0.25; 4]);
        assert!(grouped_softmax::<f64>(&[], &[0, 0]).is_empty());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let plan = SparseAttentionPlan::dense(3, 3);
        let q = rand_tensor(&[3, 2, 2], 7);
        let k = rand_tensor(&[3, 2, 2], 8);
        let v = rand_tensor(&[3, 2, 2], 9);
        let g = sparse_backward(&q, &k, &v, &plan, 0.7, &Tensor::zeros(&[3, 2, 2])).unwrap();
        assert!(g.q.data().iter().chain(g.k.data()).chain(g.v.data()).all(|&x| x == 0.0));
    }

    #[test]
    fn singleton_plan_gradients() {
        let plan = build_plan(&[(0, 0)], 1, 1).unwrap();
        let q = rand_tensor(&[1, 1, 4], 10);
        let k = rand_tensor(&[1, 1, 4], 11);
        let v = rand_tensor(&[1, 1, 4], 12);
        let up = rand_tensor(&[1, 1, 4], 13);
        let g = sparse_backward(&q, &k, &v, &plan, 0.5, &up).unwrap();
        assert_eq!(g.v.data(), up.data());
        assert!(g.q.data().iter().chain(g.k.data()).all(|&x| x == 0.0));
    }

    #[test]
    fn layout_mismatch_rejected() {
        let plan = SparseAttentionPlan::dense(2, 2);
        let q = rand_tensor(&[2, 2, 3], 1);
        let k = rand_tensor(&[2, 1, 6], 2);
        assert!(sparse_forward(&q, &k, &k, &plan, 1.0).is_err());
    }

    #[test]
    fn text_dump_roundtrip() {
        let plan = build_plan(&[(1, 2), (0, 1), (1, 0)], 2, 3).unwrap();
        let text = plan.to_text();
        assert!(text.starts_with("2 3 3\n0 1\n1 0\n1 2\n"));
        assert_eq!(SparseAttentionPlan::from_text(&text).unwrap(), plan);
        assert!(SparseAttentionPlan::from_text("2 3 4\n0 1\n").is_err());
    }
}
