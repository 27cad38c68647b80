//! Named parameter traversal shared by the optimizer, gradient buffers and
//! checkpoints.

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A struct of named parameter tensors visited in a fixed order.
///
/// Gradient buffers are values of the same type, so "parameter" and
/// "gradient" visits line up one-to-one.
pub trait Parameters<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));

    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t)));
        out
    }

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    fn zero_grads(&mut self) {
        self.visit_mut("", &mut |_, t| t.fill(T::zero()));
    }

    /// `self += other` tensor by tensor.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let src: Vec<&Tensor<T>> = other.named_tensors().into_iter().map(|(_, t)| t).collect();
        let mut i = 0;
        self.visit_mut("", &mut |_, t| {
            t.add_assign(src[i]);
            i += 1;
        });
    }

    fn scale_all(&mut self, s: T) {
        self.visit_mut("", &mut |_, t| t.scale(s));
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, t| ok &= t.all_finite());
        ok
    }

    /// All values concatenated in visit order.
    fn flat_values(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.parameter_count());
        self.visit("", &mut |_, t| out.extend_from_slice(t.data()));
        out
    }

    /// Inverse of [`Parameters::flat_values`].
    fn set_flat_values(&mut self, values: &[T]) {
        let mut o = 0;
        self.visit_mut("", &mut |_, t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[o..o + n]);
            o += n;
        });
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform Glorot initialization; `fan_in`/`fan_out` include the kernel area.
pub(crate) fn glorot<T: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, gain: f64, rng: &mut impl Rng) -> Tensor<T> {
    let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
}

/// Conv kernel `[out, k, k, in]` with Glorot scaling.
pub(crate) fn conv_kernel<T: Scalar>(out: usize, k: usize, inp: usize, gain: f64, rng: &mut impl Rng) -> Tensor<T> {
    glorot(&[out, k, k, inp], inp * k * k, out * k * k, gain, rng)
}

/// Implements [`Parameters`] for a struct whose listed fields are tensors
/// or nested parameter structs.
macro_rules! impl_parameters {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::scalar::Scalar> $crate::params::Parameters<T> for $ty<T> {
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a $crate::tensor::Tensor<T>)) {
                $( $crate::params::Parameters::visit(&self.$field, &$crate::params::join(prefix, stringify!($field)), f); )*
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut $crate::tensor::Tensor<T>)) {
                $( $crate::params::Parameters::visit_mut(&mut self.$field, &$crate::params::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use impl_parameters;

impl<T: Scalar> Parameters<T> for Tensor<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(prefix.to_string(), self)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(prefix.to_string(), self)
    }
}

impl<T: Scalar, P: Parameters<T>> Parameters<T> for Vec<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}
