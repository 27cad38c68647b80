use crate::scalar::{matmul_acc, Scalar};
use crate::tensor::Tensor;

/// Token projection `y = x W^T` with `x: [n, in]`, `W: [out, in]`.
pub fn project<T: Scalar>(x: &[T], n: usize, weight: &Tensor<T>) -> Vec<T> {
    let (out_c, in_c) = (weight.shape()[0], weight.shape()[1]);
    debug_assert_eq!(x.len(), n * in_c);
    let mut y = vec![T::zero(); n * out_c];
    matmul_acc(n, in_c, out_c, x, false, weight.data(), true, &mut y);
    y
}

/// Adjoint of [`project`]: accumulates `dW += dy^T x` and returns `dx = dy W`.
pub fn project_backward<T: Scalar>(x: &[T], n: usize, weight: &Tensor<T>, dy: &[T], dweight: &mut Tensor<T>) -> Vec<T> {
    let (out_c, in_c) = (weight.shape()[0], weight.shape()[1]);
    matmul_acc(out_c, n, in_c, dy, true, x, false, dweight.data_mut());
    let mut dx = vec![T::zero(); n * in_c];
    matmul_acc(n, out_c, in_c, dy, false, weight.data(), false, &mut dx);
    dx
}

const LN_EPS: f64 = 1e-5;

/// Per-token normalization to zero mean and unit variance (no affine terms).
/// Returns the output and the per-token inverse standard deviations.
pub fn layer_norm<T: Scalar>(x: &[T], channels: usize) -> (Vec<T>, Vec<T>) {
    let mut out = x.to_vec();
    let mut inv_std = Vec::with_capacity(x.len() / channels.max(1));
    let cn = T::lit(channels as f64);
    for row in out.chunks_mut(channels) {
        let mean = row.iter().copied().sum::<T>() / cn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
        let is = T::one() / (var + T::lit(LN_EPS)).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * is;
        }
        inv_std.push(is);
    }
    (out, inv_std)
}

/// Adjoint of [`layer_norm`] given its normalized output.
pub fn layer_norm_backward<T: Scalar>(y: &[T], inv_std: &[T], dy: &[T], channels: usize) -> Vec<T> {
    let cn = T::lit(channels as f64);
    let mut dx = vec![T::zero(); dy.len()];
    for (((yr, gr), dr), &is) in y.chunks(channels).zip(dy.chunks(channels)).zip(dx.chunks_mut(channels)).zip(inv_std) {
        let mean_g = gr.iter().copied().sum::<T>() / cn;
        let mean_gy = gr.iter().zip(yr).map(|(&g, &v)| g * v).sum::<T>() / cn;
        for ((d, &g), &v) in dr.iter_mut().zip(gr).zip(yr) {
            *d = is * (g - mean_g - v * mean_gy);
        }
    }
    dx
}
