#![allow(dead_code)]

use cliquenet_core::{Graph, Result, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| StandardNormal.sample(&mut r))
}

/// Fixed, non-uniform readout weights so every output coordinate matters.
pub fn readout<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |i| T::lit(((i * 7 + 3) % 11) as f64 / 11.0 - 0.45))
}

/// `sum(r * y)` with [`readout`] weights.
pub fn weighted_sum<T: Scalar>(g: &mut Graph<T>, y: Var) -> Result<Var> {
    let r = g.input(readout(g.shape(y)));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}
