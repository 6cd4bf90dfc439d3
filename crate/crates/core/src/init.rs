//! Parameter initialisation.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

/// Bound of the default truncated normal, which is also its standard deviation.
pub const INIT_RANGE: f64 = 0.02;

/// Normal(0, std) samples restricted to `[-bound, bound]` by rejection.
pub fn truncated_normal(rng: &mut impl Rng, shape: &[usize], std: f64, bound: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= bound {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

/// The adapter's default: truncated normal in `[-0.02, 0.02]`.
pub fn small_init(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    truncated_normal(rng, shape, INIT_RANGE, INIT_RANGE)
}

/// Fan-in scaled truncated normal (std `1/sqrt(fan_in)`, cut at two sigma).
pub fn fan_in_init(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = 1.0 / (fan_in as f64).sqrt();
    truncated_normal(rng, shape, std, 2.0 * std)
}
