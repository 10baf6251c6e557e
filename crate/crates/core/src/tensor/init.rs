use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Scalar, Tensor};

/// Zero-mean Gaussian fill.
pub fn gaussian<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("standard deviation must be finite and non-negative");
    Tensor::from_fn(shape.to_vec(), |_| T::of(normal.sample(rng)))
}

/// He fan-in scaling for a conv weight `[Cout, Cin, kh, kw]` feeding a ReLU.
pub fn he_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product();
    gaussian(shape, (2.0 / fan_in as f64).sqrt(), rng)
}
