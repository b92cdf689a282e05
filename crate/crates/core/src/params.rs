use crate::real::Real;
use crate::tensor::Tensor;

/// A fixed set of named trainable tensors.
pub trait Params<T: Real> {
    fn named(&self) -> Vec<(&'static str, &Tensor<T>)>;
    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)>;

    fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

macro_rules! impl_params {
    ($ty:ident { $($field:ident : $name:literal),+ $(,)? }) => {
        impl<T: $crate::real::Real> $crate::params::Params<T> for $ty<T> {
            fn named(&self) -> Vec<(&'static str, &$crate::tensor::Tensor<T>)> {
                vec![$(($name, &self.$field)),+]
            }

            fn named_mut(&mut self) -> Vec<(&'static str, &mut $crate::tensor::Tensor<T>)> {
                vec![$(($name, &mut self.$field)),+]
            }
        }
    };
}
pub(crate) use impl_params;

/// He-normal initializer: zero-mean Gaussian with std `sqrt(2 / fan_in)`.
pub(crate) fn he_normal<T: Real>(shape: &[usize], fan_in: usize, rng: &mut crate::rng::Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.normal() * std))
}
