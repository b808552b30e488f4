#![allow(dead_code)]

use a2d_core::policy::{PolicyParams, PolicyShape};
use a2d_core::vocab::{Token, VOCAB_SIZE};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// A shape small enough for finite differences to stay cheap.
pub fn small_shape() -> PolicyShape {
    PolicyShape {
        window: 6,
        embed_dim: 5,
        hidden: 7,
        vocab: VOCAB_SIZE,
    }
}

/// Parameters drawn far from the tiny-init regime so the tanh layer is
/// genuinely nonlinear.
pub fn random_params(shape: PolicyShape, scale: f64, rng: &mut StdRng) -> PolicyParams {
    let values = (0..shape.param_count()).map(|_| rng.random_range(-scale..scale)).collect();
    PolicyParams::from_values(shape, values).unwrap()
}

pub fn random_tokens(len: usize, rng: &mut StdRng) -> Vec<Token> {
    (0..len).map(|_| Token(rng.random_range(0..VOCAB_SIZE as u16))).collect()
}

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

/// Central difference of `f` along coordinate `i`.
pub fn central_difference(params: &PolicyParams, i: usize, h: f64, f: impl Fn(&PolicyParams) -> f64) -> f64 {
    let mut plus = params.clone();
    plus.values_mut()[i] += h;
    let mut minus = params.clone();
    minus.values_mut()[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Relative error with a floor on the denominator, so coordinates whose true
/// gradient is zero are judged on absolute error.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Half of the coordinates are drawn where the analytic gradient is nonzero,
/// the rest uniformly.
pub fn probe_coordinates(grad: &[f64], n: usize, rng: &mut StdRng) -> Vec<usize> {
    let nonzero: Vec<usize> = (0..grad.len()).filter(|&i| grad[i] != 0.0).collect();
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        if j % 2 == 0 && !nonzero.is_empty() {
            out.push(nonzero[rng.random_range(0..nonzero.len())]);
        } else {
            out.push(rng.random_range(0..grad.len()));
        }
    }
    out
}

/// Worst relative error between `grad` and central differences of `f` over
/// `n` probed coordinates.
pub fn max_fd_error(params: &PolicyParams, grad: &[f64], n: usize, rng: &mut StdRng, f: impl Fn(&PolicyParams) -> f64) -> f64 {
    probe_coordinates(grad, n, rng)
        .into_iter()
        .map(|i| rel_err(grad[i], central_difference(params, i, 1e-5, &f)))
        .fold(0.0, f64::max)
}
