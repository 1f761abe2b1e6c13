//! Central finite-difference gradient oracle.
//!
//! Only forward values are used here, so the check stays independent of the
//! backward rules it validates.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;
use rand::Rng;
use rand_distr::StandardNormal;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Gaussian tensor with standard deviation `std`.
pub fn random_tensor<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(rows, cols, data).expect("positive dims")
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    Ok(tape.value(root).item())
}

/// Numerical gradient of the scalar function `f` with respect to each input.
pub fn numeric_gradients<F>(inputs: &[Tensor], f: F) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].rows(), inputs[i].cols());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&work, &f)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&work, &f)?;
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * FD_STEP);
        }
        out.push(g);
    }
    Ok(out)
}

/// Analytic gradients of `f` via [`Tape::backward`].
pub fn analytic_gradients<F>(inputs: &[Tensor], f: F) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    Ok(vars.iter().map(|&v| grads.wrt(v).clone()).collect())
}

/// Largest relative error between analytic and numeric gradients over all entries.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()).map(|(&x, &y)| relative_error(x, y)))
        .fold(0.0, f64::max)
}

/// Compares analytic and numeric gradients; panics if `f` errors.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let a = analytic_gradients(inputs, &f).expect("analytic pass");
    let n = numeric_gradients(inputs, &f).expect("numeric pass");
    max_relative_error(&a, &n)
}

/// Like [`check_gradients`], but differentiates `numeric_f` by finite
/// differences and `analytic_f` by the tape.
///
/// Objectives with stop-gradient nodes need this: perturbing an input also
/// moves the detached values, so the numeric side must hold them at their
/// base-point values explicitly.
pub fn compare_gradients<A, N>(inputs: &[Tensor], analytic_f: A, numeric_f: N) -> f64
where
    A: Fn(&mut Tape, &[Var]) -> Result<Var>,
    N: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let a = analytic_gradients(inputs, analytic_f).expect("analytic pass");
    let n = numeric_gradients(inputs, numeric_f).expect("numeric pass");
    max_relative_error(&a, &n)
}
