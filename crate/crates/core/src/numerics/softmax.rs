use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// In-place max-subtracted softmax of one row. An empty row is left empty.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Log-softmax of one row, written into `out`.
pub fn log_softmax_into<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Row-wise softmax of a matrix.
pub fn softmax_rows<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    if m.rank() != 2 {
        return shape_err(format!("softmax_rows needs a matrix, got {:?}", m.shape()));
    }
    if m.data().iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("softmax_rows input"));
    }
    let cols = m.shape()[1];
    let mut out = m.clone();
    if cols > 0 {
        for row in out.data_mut().chunks_mut(cols) {
            softmax_in_place(row);
        }
    }
    Ok(out)
}

/// Adjoint of a softmax row: `dx = p * (dp - <p, dp>)`.
pub fn softmax_backward_in_place<T: Scalar>(p: &[T], dp: &mut [T]) {
    let dot: T = p.iter().zip(dp.iter()).map(|(&a, &b)| a * b).sum();
    for (g, &pv) in dp.iter_mut().zip(p) {
        *g = pv * (*g - dot);
    }
}

/// Adjoint of [`softmax_rows`] given its output `p` and upstream gradient.
pub fn softmax_rows_backward<T: Scalar>(p: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let cols = p.shape()[1];
    let mut out = grad.clone();
    if cols > 0 {
        for (prow, grow) in p.data().chunks(cols).zip(out.data_mut().chunks_mut(cols)) {
            softmax_backward_in_place(prow, grow);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_pair_is_half() {
        let m = Tensor::from_vec(&[1, 2], vec![0.0f64, 0.0]).unwrap();
        assert_eq!(softmax_rows(&m).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn singleton_row_is_one() {
        for x in [-1e4, -3.0, 0.0, 7.5, 1e4f64] {
            let m = Tensor::from_vec(&[1, 1], vec![x]).unwrap();
            assert_eq!(softmax_rows(&m).unwrap().data(), &[1.0]);
        }
    }

    #[test]
    fn nan_is_rejected() {
        let m = Tensor::from_vec(&[1, 2], vec![0.0f64, f64::NAN]).unwrap();
        assert!(softmax_rows(&m).is_err());
    }

    #[test]
    fn large_magnitudes_stay_normalized() {
        let m = Tensor::from_fn(&[4, 9], |i| ((i as f64) * 1.7).sin() * 1e4);
        let p = softmax_rows(&m).unwrap();
        for row in p.data().chunks(9) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}
