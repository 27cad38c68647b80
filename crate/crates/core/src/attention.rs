//! Dense attention kernels and the residual cross-attention layer.
//!
//! Token tensors are `[tokens, heads * dims]` row-major slices, which is the
//! same memory as `[tokens, heads, dims]`.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::numerics::{conv2d, conv2d_backward, elu, elu_grad, layer_norm, layer_norm_backward, phi, project, project_backward};
use crate::params::{conv_kernel, glorot, impl_parameters};
use crate::scalar::Scalar;
use crate::sparse::{sparse_backward_with_weights, sparse_forward, SparseAttentionPlan};
use crate::tensor::{FeatureMap, Tensor};

/// Head split of a channel dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Heads {
    pub heads: usize,
    pub dims: usize,
}

impl Heads {
    pub fn new(channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return shape_err(format!("{channels} channels cannot be split into {heads} heads"));
        }
        Ok(Self { heads, dims: channels / heads })
    }

    pub fn channels(&self) -> usize {
        self.heads * self.dims
    }

    /// `1 / sqrt(dims)`.
    pub fn scale<T: Scalar>(&self) -> T {
        T::one() / T::lit(self.dims as f64).sqrt()
    }
}

fn check_tokens<T>(x: &[T], n: usize, c: usize, what: &str) -> Result<()> {
    if x.len() != n * c {
        return shape_err(format!("{what}: expected {n}x{c} values, got {}", x.len()));
    }
    Ok(())
}

fn check_mask(mask: Option<&[bool]>, n: usize) -> Result<()> {
    match mask {
        Some(m) if m.len() != n => shape_err(format!("mask has {} entries for {n} tokens", m.len())),
        _ => Ok(()),
    }
}

/// Softmax probabilities kept by [`vanilla_forward`], `[heads, n_q, n_k]`.
#[derive(Clone, Debug)]
pub struct VanillaCache<T> {
    probs: Vec<T>,
}

/// `softmax(scale Q K^T) V` per head. Keys with a `false` mask entry are
/// excluded; a query with no admissible key gets a zero output.
#[allow(clippy::too_many_arguments)]
pub fn vanilla_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    nq: usize,
    nk: usize,
    h: Heads,
    scale: T,
    key_mask: Option<&[bool]>,
) -> Result<(Vec<T>, VanillaCache<T>)> {
    let c = h.channels();
    check_tokens(q, nq, c, "query")?;
    check_tokens(k, nk, c, "key")?;
    check_tokens(v, nk, c, "value")?;
    check_mask(key_mask, nk)?;
    let d = h.dims;
    let mut out = vec![T::zero(); nq * c];
    let mut probs = vec![T::zero(); h.heads * nq * nk];
    if nq == 0 || nk == 0 {
        return Ok((out, VanillaCache { probs }));
    }
    let any_key = key_mask.is_none_or(|m| m.iter().any(|&b| b));
    for head in 0..h.heads {
        let o = head * d;
        let p = &mut probs[head * nq * nk..(head + 1) * nq * nk];
        T::gemm(nq, d, nk, scale, &q[o..], (c, 1), &k[o..], (1, c), T::zero(), p, (nk, 1));
        for row in p.chunks_mut(nk) {
            if !any_key {
                row.fill(T::zero());
                continue;
            }
            if let Some(m) = key_mask {
                let max = row.iter().zip(m).filter(|(_, &b)| b).fold(T::neg_infinity(), |a, (&x, _)| a.max(x));
                let mut sum = T::zero();
                for (x, &b) in row.iter_mut().zip(m) {
                    *x = if b { (*x - max).exp() } else { T::zero() };
                    sum += *x;
                }
                let inv = T::one() / sum;
                row.iter_mut().for_each(|x| *x *= inv);
            } else {
                crate::numerics::softmax_in_place(row);
            }
        }
        T::gemm(nq, nk, d, T::one(), p, (nk, 1), &v[o..], (c, 1), T::zero(), &mut out[o..], (c, 1));
    }
    Ok((out, VanillaCache { probs }))
}

/// Adjoint of [`vanilla_forward`]; returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn vanilla_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    nq: usize,
    nk: usize,
    h: Heads,
    scale: T,
    cache: &VanillaCache<T>,
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = h.channels();
    let d = h.dims;
    let mut dq = vec![T::zero(); nq * c];
    let mut dk = vec![T::zero(); nk * c];
    let mut dv = vec![T::zero(); nk * c];
    if nq == 0 || nk == 0 {
        return (dq, dk, dv);
    }
    let mut ds = vec![T::zero(); nq * nk];
    for head in 0..h.heads {
        let o = head * d;
        let p = &cache.probs[head * nq * nk..(head + 1) * nq * nk];
        T::gemm(nq, d, nk, T::one(), &dout[o..], (c, 1), &v[o..], (1, c), T::zero(), &mut ds, (nk, 1));
        T::gemm(nk, nq, d, T::one(), p, (1, nk), &dout[o..], (c, 1), T::zero(), &mut dv[o..], (c, 1));
        for (prow, drow) in p.chunks(nk).zip(ds.chunks_mut(nk)) {
            crate::numerics::softmax_backward_in_place(prow, drow);
        }
        T::gemm(nq, nk, d, scale, &ds, (nk, 1), &k[o..], (c, 1), T::zero(), &mut dq[o..], (c, 1));
        T::gemm(nk, nq, d, scale, &ds, (1, nk), &q[o..], (c, 1), T::zero(), &mut dk[o..], (c, 1));
    }
    (dq, dk, dv)
}

/// Dense vanilla attention on `[tokens, heads, dims]` tensors with scale
/// `1/sqrt(dims)`.
pub fn vanilla_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (nq, nk, h) = head_layout(q, k, v)?;
    let (out, _) = vanilla_forward(q.data(), k.data(), v.data(), nq, nk, h, h.scale(), None)?;
    Tensor::from_vec(q.shape(), out)
}

/// Values kept by [`linear_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct LinearCache<T> {
    phi_q: Vec<T>,
    phi_k: Vec<T>,
    kv: Vec<T>,
    ksum: Vec<T>,
    den: Vec<T>,
    out: Vec<T>,
}

/// Normalized kernel attention with `phi = elu + 1`:
/// `out_i = phi(q_i) (phi(K)^T V) / phi(q_i) (phi(K)^T 1)`, per head.
/// Masked keys contribute nothing.
pub fn linear_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    nq: usize,
    nk: usize,
    h: Heads,
    key_mask: Option<&[bool]>,
) -> Result<(Vec<T>, LinearCache<T>)> {
    let c = h.channels();
    check_tokens(q, nq, c, "query")?;
    check_tokens(k, nk, c, "key")?;
    check_tokens(v, nk, c, "value")?;
    check_mask(key_mask, nk)?;
    let d = h.dims;
    let phi_q: Vec<T> = q.iter().map(|&x| phi(x)).collect();
    let mut phi_k: Vec<T> = k.iter().map(|&x| phi(x)).collect();
    if let Some(m) = key_mask {
        for (row, &keep) in phi_k.chunks_mut(c).zip(m) {
            if !keep {
                row.fill(T::zero());
            }
        }
    }
    let mut kv = vec![T::zero(); h.heads * d * d];
    let mut ksum = vec![T::zero(); h.heads * d];
    let mut num = vec![T::zero(); nq * c];
    let mut den = vec![T::zero(); nq * h.heads];
    if nk > 0 {
        for head in 0..h.heads {
            let o = head * d;
            let kvh = &mut kv[head * d * d..(head + 1) * d * d];
            T::gemm(d, nk, d, T::one(), &phi_k[o..], (1, c), &v[o..], (c, 1), T::zero(), kvh, (d, 1));
            if nq > 0 {
                T::gemm(nq, d, d, T::one(), &phi_q[o..], (c, 1), kvh, (d, 1), T::zero(), &mut num[o..], (c, 1));
            }
        }
        for row in phi_k.chunks(c) {
            for (s, &x) in ksum.iter_mut().zip(row) {
                *s += x;
            }
        }
    }
    let mut out = num;
    for i in 0..nq {
        for head in 0..h.heads {
            let r = i * c + head * d..i * c + (head + 1) * d;
            let dn: T = phi_q[r.clone()].iter().zip(&ksum[head * d..(head + 1) * d]).map(|(&a, &b)| a * b).sum();
            den[i * h.heads + head] = dn;
            if dn > T::zero() {
                let inv = T::one() / dn;
                out[r].iter_mut().for_each(|x| *x *= inv);
            } else {
                out[r].fill(T::zero());
            }
        }
    }
    let cache = LinearCache { phi_q, phi_k, kv, ksum, den, out: out.clone() };
    Ok((out, cache))
}

/// Adjoint of [`linear_forward`]; returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    nq: usize,
    nk: usize,
    h: Heads,
    key_mask: Option<&[bool]>,
    cache: &LinearCache<T>,
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = h.channels();
    let d = h.dims;
    let mut dnum = vec![T::zero(); nq * c];
    let mut dden = vec![T::zero(); nq * h.heads];
    for i in 0..nq {
        for head in 0..h.heads {
            let dn = cache.den[i * h.heads + head];
            if dn <= T::zero() {
                continue;
            }
            let r = i * c + head * d..i * c + (head + 1) * d;
            let inv = T::one() / dn;
            let mut acc = T::zero();
            for ((g, &o), dnm) in dout[r.clone()].iter().zip(&cache.out[r.clone()]).zip(&mut dnum[r]) {
                *dnm = *g * inv;
                acc += *g * o;
            }
            dden[i * h.heads + head] = -acc * inv;
        }
    }
    let mut dphi_q = vec![T::zero(); nq * c];
    let mut dphi_k = vec![T::zero(); nk * c];
    let mut dv = vec![T::zero(); nk * c];
    let mut dkv = vec![T::zero(); d * d];
    for head in 0..h.heads {
        let o = head * d;
        let kvh = &cache.kv[head * d * d..(head + 1) * d * d];
        let ks = &cache.ksum[o..o + d];
        if nq > 0 {
            T::gemm(nq, d, d, T::one(), &dnum[o..], (c, 1), kvh, (1, d), T::zero(), &mut dphi_q[o..], (c, 1));
        }
        let mut dks = vec![T::zero(); d];
        for i in 0..nq {
            let g = dden[i * h.heads + head];
            let row = &mut dphi_q[i * c + o..i * c + o + d];
            for ((r, &s), (dk, &pq)) in row.iter_mut().zip(ks).zip(dks.iter_mut().zip(&cache.phi_q[i * c + o..i * c + o + d])) {
                *r += g * s;
                *dk += g * pq;
            }
        }
        if nk == 0 {
            continue;
        }
        if nq > 0 {
            T::gemm(d, nq, d, T::one(), &cache.phi_q[o..], (1, c), &dnum[o..], (c, 1), T::zero(), &mut dkv, (d, 1));
        } else {
            dkv.fill(T::zero());
        }
        T::gemm(nk, d, d, T::one(), &v[o..], (c, 1), &dkv, (1, d), T::zero(), &mut dphi_k[o..], (c, 1));
        for j in 0..nk {
            for (r, &g) in dphi_k[j * c + o..j * c + o + d].iter_mut().zip(&dks) {
                *r += g;
            }
        }
        T::gemm(nk, d, d, T::one(), &cache.phi_k[o..], (c, 1), &dkv, (d, 1), T::zero(), &mut dv[o..], (c, 1));
    }
    let phi_grad = |x: T| if x > T::zero() { T::one() } else { x.exp() };
    let dq: Vec<T> = dphi_q.iter().zip(q).map(|(&g, &x)| g * phi_grad(x)).collect();
    let mut dk: Vec<T> = dphi_k.iter().zip(k).map(|(&g, &x)| g * phi_grad(x)).collect();
    if let Some(m) = key_mask {
        for (row, &keep) in dk.chunks_mut(c).zip(m) {
            if !keep {
                row.fill(T::zero());
            }
        }
    }
    (dq, dk, dv)
}

/// Linear attention on `[tokens, heads, dims]` tensors.
pub fn linear_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (nq, nk, h) = head_layout(q, k, v)?;
    let (out, _) = linear_forward(q.data(), k.data(), v.data(), nq, nk, h, None)?;
    Tensor::from_vec(q.shape(), out)
}

fn head_layout<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(usize, usize, Heads)> {
    if q.rank() != 3 || k.rank() != 3 || v.rank() != 3 {
        return shape_err("attention expects [tokens, heads, dims] tensors");
    }
    if q.shape()[1..] != k.shape()[1..] || k.shape() != v.shape() {
        return shape_err(format!("attention layout mismatch: {:?} {:?} {:?}", q.shape(), k.shape(), v.shape()));
    }
    Ok((q.shape()[0], k.shape()[0], Heads { heads: q.shape()[1], dims: q.shape()[2] }))
}

/// `map + elu(conv3x3(map))`, the convolutional token mixer.
pub fn conv_mix_block<T: Scalar>(map: &FeatureMap<T>, kernel: &Tensor<T>) -> Result<FeatureMap<T>> {
    Ok(conv_mix_forward(map, kernel)?.0)
}

/// [`conv_mix_block`] also returning the pre-activation.
pub fn conv_mix_forward<T: Scalar>(map: &FeatureMap<T>, kernel: &Tensor<T>) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
    let z = conv2d(map, kernel, None, 1, 1)?;
    let mut out = map.clone();
    for (o, &zv) in out.data.iter_mut().zip(&z.data) {
        *o += elu(zv);
    }
    Ok((out, z))
}

/// Adjoint of [`conv_mix_block`]: returns the input gradient and accumulates
/// into `dkernel`.
pub fn conv_mix_backward<T: Scalar>(
    map: &FeatureMap<T>,
    kernel: &Tensor<T>,
    z: &FeatureMap<T>,
    dout: &FeatureMap<T>,
    dkernel: &mut Tensor<T>,
) -> Result<FeatureMap<T>> {
    let mut dz = dout.clone();
    for (g, &zv) in dz.data.iter_mut().zip(&z.data) {
        *g *= elu_grad(zv);
    }
    let grads = conv2d_backward(map, kernel, 1, 1, &dz)?;
    dkernel.add_assign(&grads.kernel);
    let mut din = dout.clone();
    din.add_assign(&grads.input);
    Ok(din)
}

/// Weights of one residual attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayerParams<T> {
    pub heads: usize,
    /// Normalize the attention message per token before mixing.
    pub layer_norm: bool,
    /// `[C, C]` projections, `y = x W^T`.
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    /// `[C, 3, 3, C]` token-mixing kernel.
    pub mix: Tensor<T>,
}

impl_parameters!(AttentionLayerParams { wq, wk, wv, wo, mix });

impl<T: Scalar> AttentionLayerParams<T> {
    pub fn init(channels: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let sq = [channels, channels];
        Self {
            heads,
            layer_norm: false,
            wq: glorot(&sq, channels, channels, 1.0, rng),
            wk: glorot(&sq, channels, channels, 1.0, rng),
            wv: glorot(&sq, channels, channels, 1.0, rng),
            wo: glorot(&sq, channels, channels, 0.5, rng),
            mix: conv_kernel(channels, 3, channels, 0.5, rng),
        }
    }

    pub fn zeros(channels: usize, heads: usize) -> Self {
        let sq = [channels, channels];
        Self {
            heads,
            layer_norm: false,
            wq: Tensor::zeros(&sq),
            wk: Tensor::zeros(&sq),
            wv: Tensor::zeros(&sq),
            wo: Tensor::zeros(&sq),
            mix: Tensor::zeros(&[channels, 3, 3, channels]),
        }
    }

    /// Zero-filled buffer of the same layout, for gradients.
    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(self.channels(), self.heads);
        z.layer_norm = self.layer_norm;
        z
    }

    pub fn channels(&self) -> usize {
        self.wq.shape()[0]
    }
}

#[derive(Clone, Copy, Debug)]
pub enum AttentionKind<'a> {
    Vanilla,
    Linear,
    Sparse(&'a SparseAttentionPlan),
}

/// Per-token validity of the query (`x`) and key (`y`) maps. Invalid query
/// tokens receive no update; invalid keys are never attended to.
#[derive(Clone, Copy, Debug, Default)]
pub struct TokenMasks<'a> {
    pub query: Option<&'a [bool]>,
    pub key: Option<&'a [bool]>,
}

#[derive(Clone, Debug)]
enum KernelCache<T> {
    Vanilla(VanillaCache<T>),
    Linear(LinearCache<T>),
    Sparse(Vec<T>),
}

/// Intermediate values of one [`cross_attention_forward`] call.
#[derive(Clone, Debug)]
pub struct LayerCache<T> {
    x: FeatureMap<T>,
    y: FeatureMap<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    attn: Vec<T>,
    kernel: KernelCache<T>,
    plan: Option<SparseAttentionPlan>,
    norm: Option<(Vec<T>, Vec<T>)>,
    message: FeatureMap<T>,
    mix_pre: FeatureMap<T>,
    query_mask: Option<Vec<bool>>,
    key_mask: Option<Vec<bool>>,
}

fn zero_masked<T: Scalar>(data: &mut [T], c: usize, mask: Option<&[bool]>) {
    if let Some(m) = mask {
        for (row, &keep) in data.chunks_mut(c).zip(m) {
            if !keep {
                row.fill(T::zero());
            }
        }
    }
}

/// `x' = x + mix(W_o attention(W_q x, W_k y, W_v y))` where
/// `mix(m) = m + elu(conv3x3(m))`.
pub fn cross_attention_layer<T: Scalar>(
    x: &FeatureMap<T>,
    y: &FeatureMap<T>,
    params: &AttentionLayerParams<T>,
    kind: AttentionKind<'_>,
) -> Result<FeatureMap<T>> {
    Ok(cross_attention_forward(x, y, params, kind, TokenMasks::default())?.0)
}

pub fn cross_attention_forward<T: Scalar>(
    x: &FeatureMap<T>,
    y: &FeatureMap<T>,
    params: &AttentionLayerParams<T>,
    kind: AttentionKind<'_>,
    masks: TokenMasks<'_>,
) -> Result<(FeatureMap<T>, LayerCache<T>)> {
    let c = params.channels();
    if x.channels != c || y.channels != c {
        return shape_err(format!("layer has {c} channels, maps have {} and {}", x.channels, y.channels));
    }
    let h = Heads::new(c, params.heads)?;
    let (nq, nk) = (x.tokens(), y.tokens());
    check_mask(masks.query, nq)?;
    check_mask(masks.key, nk)?;
    let q = project(&x.data, nq, &params.wq);
    let k = project(&y.data, nk, &params.wk);
    let v = project(&y.data, nk, &params.wv);
    let scale = h.scale::<T>();
    let (attn, kernel) = match kind {
        AttentionKind::Vanilla => {
            let (o, cache) = vanilla_forward(&q, &k, &v, nq, nk, h, scale, masks.key)?;
            (o, KernelCache::Vanilla(cache))
        }
        AttentionKind::Linear => {
            let (o, cache) = linear_forward(&q, &k, &v, nq, nk, h, masks.key)?;
            (o, KernelCache::Linear(cache))
        }
        AttentionKind::Sparse(plan) => {
            if masks.key.is_some() {
                return shape_err("sparse attention takes key restrictions from its plan, not a mask");
            }
            let shape = [nq, h.heads, h.dims];
            let kshape = [nk, h.heads, h.dims];
            let fw = sparse_forward(
                &Tensor::from_vec(&shape, q.clone())?,
                &Tensor::from_vec(&kshape, k.clone())?,
                &Tensor::from_vec(&kshape, v.clone())?,
                plan,
                scale,
            )?;
            (fw.output.into_data(), KernelCache::Sparse(fw.weights))
        }
    };
    let mut m = project(&attn, nq, &params.wo);
    let norm = if params.layer_norm {
        let (y_n, inv) = layer_norm(&m, c);
        m = y_n.clone();
        Some((y_n, inv))
    } else {
        None
    };
    zero_masked(&mut m, c, masks.query);
    let message = FeatureMap::from_vec(x.height, x.width, c, x.level, m)?;
    let (mut update, mix_pre) = conv_mix_forward(&message, &params.mix)?;
    zero_masked(&mut update.data, c, masks.query);
    let mut out = x.clone();
    out.add_assign(&update);
    let plan = match kind {
        AttentionKind::Sparse(p) => Some(p.clone()),
        _ => None,
    };
    let cache = LayerCache {
        x: x.clone(),
        y: y.clone(),
        q,
        k,
        v,
        attn,
        kernel,
        plan,
        norm,
        message,
        mix_pre,
        query_mask: masks.query.map(<[bool]>::to_vec),
        key_mask: masks.key.map(<[bool]>::to_vec),
    };
    Ok((out, cache))
}

/// Adjoint of [`cross_attention_forward`]. Parameter gradients accumulate
/// into `grads`; returns `(dx, dy)`. For self-attention (`x` and `y` the
/// same map) the caller adds both.
pub fn cross_attention_backward<T: Scalar>(
    cache: &LayerCache<T>,
    params: &AttentionLayerParams<T>,
    dout: &FeatureMap<T>,
    grads: &mut AttentionLayerParams<T>,
) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
    let c = params.channels();
    let h = Heads::new(c, params.heads)?;
    let (nq, nk) = (cache.x.tokens(), cache.y.tokens());
    if !dout.same_dims(&cache.x) {
        return shape_err("layer upstream gradient has the wrong shape");
    }
    let qmask = cache.query_mask.as_deref();
    let mut dupdate = dout.clone();
    zero_masked(&mut dupdate.data, c, qmask);
    let mut dm = conv_mix_backward(&cache.message, &params.mix, &cache.mix_pre, &dupdate, &mut grads.mix)?.data;
    zero_masked(&mut dm, c, qmask);
    if let Some((y_n, inv)) = &cache.norm {
        dm = layer_norm_backward(y_n, inv, &dm, c);
    }
    let dattn = project_backward(&cache.attn, nq, &params.wo, &dm, &mut grads.wo);
    let scale = h.scale::<T>();
    let (dq, dk, dv) = match &cache.kernel {
        KernelCache::Vanilla(kc) => vanilla_backward(&cache.q, &cache.k, &cache.v, nq, nk, h, scale, kc, &dattn),
        KernelCache::Linear(lc) => {
            linear_backward(&cache.q, &cache.k, &cache.v, nq, nk, h, cache.key_mask.as_deref(), lc, &dattn)
        }
        KernelCache::Sparse(weights) => {
            let plan = cache.plan.as_ref().expect("sparse cache keeps its plan");
            let shape = [nq, h.heads, h.dims];
            let kshape = [nk, h.heads, h.dims];
            let g = sparse_backward_with_weights(
                &Tensor::from_vec(&shape, cache.q.clone())?,
                &Tensor::from_vec(&kshape, cache.k.clone())?,
                &Tensor::from_vec(&kshape, cache.v.clone())?,
                plan,
                scale,
                weights,
                &Tensor::from_vec(&shape, dattn)?,
            )?;
            (g.q.into_data(), g.k.into_data(), g.v.into_data())
        }
    };
    let mut dx = dout.clone();
    let dxq = project_backward(&cache.x.data, nq, &params.wq, &dq, &mut grads.wq);
    for (a, b) in dx.data.iter_mut().zip(dxq) {
        *a += b;
    }
    let mut dy = cache.y.zeros_like();
    let dyk = project_backward(&cache.y.data, nk, &params.wk, &dk, &mut grads.wk);
    let dyv = project_backward(&cache.y.data, nk, &params.wv, &dv, &mut grads.wv);
    for ((a, b), c2) in dy.data.iter_mut().zip(dyk).zip(dyv) {
        *a = b + c2;
    }
    Ok((dx, dy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::sparse::build_plan;
    use crate::tensor::Level;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn vanilla_single_key_returns_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = Heads::new(4, 2).unwrap();
        let q = rand_vec(12, &mut rng);
        let k = rand_vec(4, &mut rng);
        let v = rand_vec(4, &mut rng);
        let (out, _) = vanilla_forward(&q, &k, &v, 3, 1, h, 0.5, None).unwrap();
        for row in out.chunks(4) {
            for (a, b) in row.iter().zip(&v) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn vanilla_zero_logits_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = Heads::new(2, 1).unwrap();
        let q = vec![0.0; 2];
        let k = rand_vec(8, &mut rng);
        let v = rand_vec(8, &mut rng);
        let (out, _) = vanilla_forward(&q, &k, &v, 1, 4, h, 1.0, None).unwrap();
        let mean0 = (v[0] + v[2] + v[4] + v[6]) / 4.0;
        assert!((out[0] - mean0).abs() < 1e-14);
    }

    #[test]
    fn vanilla_matches_masked_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (nq, nk, heads, dims) = (5, 7, 2, 3);
        let h = Heads { heads, dims };
        let q = rand_vec(nq * 6, &mut rng);
        let k = rand_vec(nk * 6, &mut rng);
        let v = rand_vec(nk * 6, &mut rng);
        let km: Vec<bool> = (0..nk).map(|j| j % 3 != 1).collect();
        let full_mask: Vec<bool> = (0..nq * nk).map(|i| km[i % nk]).collect();
        let (out, _) = vanilla_forward(&q, &k, &v, nq, nk, h, 0.4, Some(&km)).unwrap();
        let expect = oracle::masked_attention_reference(&q, &k, &v, nq, nk, heads, dims, 0.4, Some(&full_mask));
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_matches_quadratic_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (nq, nk) = (6, 9);
        let h = Heads { heads: 2, dims: 4 };
        let q = rand_vec(nq * 8, &mut rng);
        let k = rand_vec(nk * 8, &mut rng);
        let v = rand_vec(nk * 8, &mut rng);
        let (out, _) = linear_forward(&q, &k, &v, nq, nk, h, None).unwrap();
        let expect = oracle::linear_attention_reference(&q, &k, &v, nq, nk, 2, 4);
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_single_key_and_identical_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = Heads { heads: 1, dims: 3 };
        let q = rand_vec(6, &mut rng);
        let v = rand_vec(3, &mut rng);
        let k = rand_vec(3, &mut rng);
        let (out, _) = linear_forward(&q, &k, &v, 2, 1, h, None).unwrap();
        for row in out.chunks(3) {
            for (a, b) in row.iter().zip(&v) {
                assert!((a - b).abs() < 1e-14);
            }
        }
        let k4: Vec<f64> = k.iter().cycle().take(12).copied().collect();
        let v4 = rand_vec(12, &mut rng);
        let (out, _) = linear_forward(&q, &k4, &v4, 2, 4, h, None).unwrap();
        let mean0 = (v4[0] + v4[3] + v4[6] + v4[9]) / 4.0;
        assert!((out[0] - mean0).abs() < 1e-14);
    }

    #[test]
    fn linear_key_mask_equals_dropping_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = Heads { heads: 2, dims: 2 };
        let q = rand_vec(12, &mut rng);
        let k = rand_vec(16, &mut rng);
        let v = rand_vec(16, &mut rng);
        let mask = [true, false, true, false];
        let (masked, _) = linear_forward(&q, &k, &v, 3, 4, h, Some(&mask)).unwrap();
        let kk: Vec<f64> = [&k[0..4], &k[8..12]].concat();
        let vv: Vec<f64> = [&v[0..4], &v[8..12]].concat();
        let (dropped, _) = linear_forward(&q, &kk, &vv, 3, 2, h, None).unwrap();
        for (a, b) in masked.iter().zip(&dropped) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_mix_kernel_is_identity() {
        let map = FeatureMap::from_fn(4, 4, 3, Level::EIGHTH, |y, x, c| (y + 2 * x + c) as f64 * 0.1);
        let out = conv_mix_block(&map, &Tensor::zeros(&[3, 3, 3, 3])).unwrap();
        assert_eq!(out, map);
    }

    #[test]
    fn conv_mix_constant_interior_shift() {
        let map = FeatureMap::from_fn(5, 5, 1, Level::EIGHTH, |_, _, _| 0.3f64);
        let kernel = Tensor::filled(&[1, 3, 3, 1], 0.1);
        let out = conv_mix_block(&map, &kernel).unwrap();
        let expected = 0.3 + elu(0.3 * 0.9);
        assert!((out.at(2, 2, 0) - expected).abs() < 1e-15);
    }

    #[test]
    fn conv_mix_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let map = FeatureMap::from_vec(5, 4, 2, Level::EIGHTH, rand_vec(40, &mut rng)).unwrap();
        let kernel = Tensor::from_vec(&[2, 3, 3, 2], rand_vec(36, &mut rng)).unwrap();
        let out = conv_mix_block(&map, &kernel).unwrap();
        let (conv, _, _) = oracle::conv2d_reference(&map.data, 5, 4, 2, kernel.data(), 2, 3, 1, 1);
        for ((o, &x), &z) in out.data.iter().zip(&map.data).zip(&conv) {
            let e = if z > 0.0 { z } else { z.exp() - 1.0 };
            assert!((o - (x + e)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_projections_leave_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = FeatureMap::from_vec(3, 3, 4, Level::EIGHTH, rand_vec(36, &mut rng)).unwrap();
        let y = FeatureMap::from_vec(2, 2, 4, Level::EIGHTH, rand_vec(16, &mut rng)).unwrap();
        let mut p = AttentionLayerParams::<f64>::init(4, 2, &mut rng);
        p.wq.fill(0.0);
        p.wk.fill(0.0);
        p.wv.fill(0.0);
        p.wo.fill(0.0);
        for kind in [AttentionKind::Vanilla, AttentionKind::Linear] {
            assert_eq!(cross_attention_layer(&x, &y, &p, kind).unwrap(), x);
        }
    }

    #[test]
    fn vanilla_layer_equals_dense_sparse_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = FeatureMap::from_vec(3, 2, 8, Level::EIGHTH, rand_vec(48, &mut rng)).unwrap();
        let y = FeatureMap::from_vec(2, 3, 8, Level::EIGHTH, rand_vec(48, &mut rng)).unwrap();
        let p = AttentionLayerParams::<f64>::init(8, 2, &mut rng);
        let plan = SparseAttentionPlan::dense(6, 6);
        let a = cross_attention_layer(&x, &y, &p, AttentionKind::Vanilla).unwrap();
        let b = cross_attention_layer(&x, &y, &p, AttentionKind::Sparse(&plan)).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-10);
    }

    #[test]
    fn singleton_maps_attend_to_projected_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = FeatureMap::from_vec(1, 1, 4, Level::THIRTY_SECOND, rand_vec(4, &mut rng)).unwrap();
        let y = FeatureMap::from_vec(1, 1, 4, Level::THIRTY_SECOND, rand_vec(4, &mut rng)).unwrap();
        let p = AttentionLayerParams::<f64>::init(4, 2, &mut rng);
        let (_, cache) = cross_attention_forward(&x, &y, &p, AttentionKind::Vanilla, TokenMasks::default()).unwrap();
        let v = project(&y.data, 1, &p.wv);
        let expect = project(&v, 1, &p.wo);
        for (a, b) in cache.message.data.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn sparse_kind_rejects_key_mask() {
        let x = FeatureMap::<f64>::zeros(1, 2, 2, Level::EIGHTH);
        let p = AttentionLayerParams::<f64>::zeros(2, 1);
        let plan = build_plan(&[(0, 0), (1, 1)], 2, 2).unwrap();
        let masks = TokenMasks { query: None, key: Some(&[true, true]) };
        assert!(cross_attention_forward(&x, &x, &p, AttentionKind::Sparse(&plan), masks).is_err());
    }
}
