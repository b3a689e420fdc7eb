//! Central finite-difference checks of backward-pass gradients (64-bit).

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), false);
    let out = f(&mut tape, v)?;
    let t = tape.value(out);
    if t.numel() != 1 {
        return Err(Error::validation(
            "grad_check needs a scalar-valued function",
        ));
    }
    Ok(t.item())
}

/// Largest relative error between the backward gradient of `f` at `x` and
/// central differences with step `eps`, over every element of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_indices(f, x, eps, &all)
}

/// As [`grad_check`], restricted to the listed elements of `x`.
pub fn grad_check_indices<F>(f: F, x: &Tensor<f64>, eps: f64, indices: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let out = f(&mut tape, v)?;
    let analytic = tape.backward(out)?.get(v);
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}
