use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[inline]
pub fn elu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x.exp_m1()
    }
}

/// Derivative of [`elu`]; continuous at zero.
#[inline]
pub fn elu_grad<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        x.exp()
    }
}

/// Linear-attention kernel map `elu(x) + 1`, evaluated without cancellation
/// so the result stays strictly positive for very negative inputs.
#[inline]
pub fn phi<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + T::one()
    } else {
        x.exp()
    }
}

pub fn elu_feature_map<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(phi)
}
