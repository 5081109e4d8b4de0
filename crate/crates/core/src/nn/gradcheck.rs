//! Central finite-difference checks for hand-written gradients.

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::Tensor;
use crate::rng;

/// Step used by every check.
pub const FD_STEP: f64 = 1e-6;

/// Gradients smaller than this fraction of the largest probed gradient are
/// compared on an absolute scale, so vanishing entries don't dominate.
const RELATIVE_FLOOR: f64 = 1e-3;

pub fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor {
    let mut r = rng::seeded(seed, 0xfd);
    let n = shape.iter().product();
    Tensor {
        shape,
        data: (0..n).map(|_| StandardNormal.sample(&mut r)).collect(),
    }
}

pub fn random_vec(len: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::seeded(seed, 0xfe);
    (0..len).map(|_| r.random::<f64>() * 2.0 - 1.0).collect()
}

/// Up to `max` distinct coordinates of `0..len`, sorted.
pub fn probe_coords(len: usize, max: usize, seed: u64) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let mut r = rng::seeded(seed, 0xff);
    let mut idx = sample(&mut r, len, max).into_vec();
    idx.sort_unstable();
    idx
}

/// Central differences of `f` at `point` along each coordinate in `coords`.
pub fn finite_difference(f: impl Fn(&[f64]) -> f64, point: &[f64], coords: &[usize]) -> Vec<f64> {
    let mut x = point.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = x[i];
            x[i] = orig + FD_STEP;
            let up = f(&x);
            x[i] = orig - FD_STEP;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Largest elementwise relative error between two gradient samples.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (scale * RELATIVE_FLOOR).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Compares the input gradient returned by `back` with finite differences of
/// `loss` and panics above `tol`.
pub fn check_input_grad(
    p: &[f64],
    x: &Tensor,
    loss: &dyn Fn(&[f64], &Tensor) -> f64,
    back: &dyn Fn(&[f64], &Tensor, &mut [f64]) -> Tensor,
    tol: f64,
) -> f64 {
    let mut g = vec![0.0; p.len()];
    let dx = back(p, x, &mut g);
    let coords = probe_coords(x.len(), 64, 1);
    let numeric = finite_difference(
        |v| {
            let t = Tensor {
                shape: x.shape,
                data: v.to_vec(),
            };
            loss(p, &t)
        },
        &x.data,
        &coords,
    );
    let analytic: Vec<f64> = coords.iter().map(|&i| dx.data[i]).collect();
    let err = max_relative_error(&analytic, &numeric);
    assert!(err < tol, "input gradient relative error {err:e}");
    err
}

/// Parameter-gradient counterpart of [`check_input_grad`], probing only the
/// given candidate coordinates (the trainable ones).
pub fn check_param_grad(
    p: &[f64],
    candidates: &[usize],
    x: &Tensor,
    loss: &dyn Fn(&[f64], &Tensor) -> f64,
    back: &dyn Fn(&[f64], &Tensor, &mut [f64]) -> Tensor,
    tol: f64,
) -> f64 {
    if candidates.is_empty() {
        return 0.0;
    }
    let mut g = vec![0.0; p.len()];
    back(p, x, &mut g);
    let coords: Vec<usize> = probe_coords(candidates.len(), 64, 2)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    let numeric = finite_difference(|v| loss(v, x), p, &coords);
    let analytic: Vec<f64> = coords.iter().map(|&i| g[i]).collect();
    let err = max_relative_error(&analytic, &numeric);
    assert!(err < tol, "parameter gradient relative error {err:e}");
    err
}
