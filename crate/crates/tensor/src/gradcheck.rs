//! Central finite-difference gradient checks in 64-bit mode.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Max over coordinates of `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, input: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Graph<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..input.len()).collect();
    check_coords(&f, input, eps, &coords)
}

/// Like [`grad_check`] but only over `count` coordinates drawn with `seed`.
pub fn grad_check_sampled<F>(f: F, input: &Tensor<f64>, eps: f64, count: usize, seed: u64) -> Result<f64>
where
    F: Fn(&Graph<f64>, Var) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = count.min(input.len());
    let coords = sample(&mut rng, input.len(), count).into_vec();
    check_coords(&f, input, eps, &coords)
}

/// Analytic gradient of `f` at `input`.
pub fn analytic_grad<F>(f: F, input: &Tensor<f64>) -> Result<Tensor<f64>>
where
    F: Fn(&Graph<f64>, Var) -> Result<Var>,
{
    let g = Graph::new();
    let x = g.param(input.clone());
    let y = f(&g, x)?;
    let mut grads = g.backward(y)?;
    Ok(grads.take(x).unwrap_or_else(|| Tensor::zeros(input.shape().to_vec())))
}

fn eval<F>(f: &F, input: Tensor<f64>) -> Result<f64>
where
    F: Fn(&Graph<f64>, Var) -> Result<Var>,
{
    let g = Graph::new();
    let x = g.constant(input);
    let y = f(&g, x)?;
    let v = g.value(y);
    if v.len() != 1 {
        return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

fn check_coords<F>(f: &F, input: &Tensor<f64>, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&Graph<f64>, Var) -> Result<Var>,
{
    let analytic = analytic_grad(f, input)?;
    let mut worst = 0.0f64;
    for &i in coords {
        let mut plus = input.clone();
        plus.data_mut()[i] += eps;
        let mut minus = input.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(f, plus)? - eval(f, minus)?) / (2.0 * eps);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
