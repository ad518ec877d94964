#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segagg_core::numerics::{self as nx, Tensor};

pub mod gradcases;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn param(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::parameter(uniform(rng, n, scale), shape).unwrap()
}

pub fn constant(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(uniform(rng, n, scale), shape).unwrap()
}

/// Projects a tensor to a scalar with fixed random weights so that every
/// output element carries a distinct gradient.
pub fn project(out: &Tensor, weights: &Tensor) -> Tensor {
    nx::sum(&nx::mul(out, weights).unwrap())
}

/// Central finite differences of `loss` with respect to every element of
/// every tensor in `params`.
pub fn numeric_gradients(params: &[Tensor], loss: &dyn Fn() -> f64, step: f64) -> Vec<Vec<f64>> {
    params
        .iter()
        .map(|p| {
            (0..p.numel())
                .map(|i| {
                    let orig = p.data()[i];
                    p.data_mut()[i] = orig + step;
                    let up = loss();
                    p.data_mut()[i] = orig - step;
                    let down = loss();
                    p.data_mut()[i] = orig;
                    (up - down) / (2.0 * step)
                })
                .collect()
        })
        .collect()
}

/// Largest norm-wise relative error between autodiff and finite differences
/// over all `params`.
pub fn gradient_error(params: &[Tensor], build: &dyn Fn() -> Tensor) -> f64 {
    for p in params {
        p.zero_grad();
    }
    build().backward().unwrap();
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    let numeric = numeric_gradients(params, &|| build().item().unwrap(), FD_STEP);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}
