//! Seeded weight initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;

pub fn normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
}

/// Glorot/Xavier uniform: U(−a, a) with a = √(6 / (fan_in + fan_out)).
pub fn xavier_uniform<R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-a..a)).collect()).unwrap()
}
