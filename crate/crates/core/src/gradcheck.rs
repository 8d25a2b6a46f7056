//! Central finite-difference checks of tape gradients.
//!
//! The numerical side only ever evaluates the forward function on constants, so
//! it is independent of every backward rule it checks.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub analytic_norm: f64,
}

fn relative(analytic: &[f64], numeric: &[f64]) -> GradCheck {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let max_abs = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let denom = na.max(nn);
    GradCheck {
        rel_error: if denom < 1e-300 { diff } else { diff / denom },
        max_abs_error: max_abs,
        analytic_norm: na,
    }
}

fn eval_const<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    Ok(f(&vars)?.item())
}

/// Analytic gradients of the scalar `f(inputs)` with respect to every input.
pub fn analytic_gradients<F>(inputs: &[Tensor], f: &F) -> Result<(f64, Vec<Tensor>)>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&vars)?;
    let grads = tape.backward(loss)?;
    Ok((loss.item(), vars.iter().map(|v| grads.wrt(*v)).collect()))
}

/// Full elementwise check over every coordinate of every input.
pub fn check_all<F>(inputs: &[Tensor], f: F, step: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let (_, analytic) = analytic_gradients(inputs, &f)?;
    let mut a_flat = Vec::new();
    let mut n_flat = Vec::new();
    let mut work = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..work[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval_const(&work, &f)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval_const(&work, &f)?;
            work[i].data_mut()[j] = orig;
            n_flat.push((plus - minus) / (2.0 * step));
            a_flat.push(grad.data()[j]);
        }
    }
    Ok(relative(&a_flat, &n_flat))
}

/// Directional check: compares `∇f·v` with the central difference along `v` for
/// each supplied direction set (one tensor per input).
pub fn check_directions<F>(
    inputs: &[Tensor],
    f: F,
    directions: &[Vec<Tensor>],
    step: f64,
) -> Result<Vec<GradCheck>>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let (_, analytic) = analytic_gradients(inputs, &f)?;
    let mut out = Vec::with_capacity(directions.len());
    for dir in directions {
        let dot: f64 = analytic
            .iter()
            .zip(dir)
            .map(|(g, d)| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        let shifted = |s: f64| -> Vec<Tensor> {
            inputs
                .iter()
                .zip(dir)
                .map(|(x, d)| x.zip_map(d, |a, b| a + s * b).expect("direction shape"))
                .collect()
        };
        let plus = eval_const(&shifted(step), &f)?;
        let minus = eval_const(&shifted(-step), &f)?;
        out.push(relative(&[dot], &[(plus - minus) / (2.0 * step)]));
    }
    Ok(out)
}

/// Unit-norm random direction with one tensor per input.
pub fn random_direction<R: Rng + ?Sized>(inputs: &[Tensor], rng: &mut R) -> Vec<Tensor> {
    let mut dir: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::randn(t.shape(), 1.0, rng))
        .collect();
    let norm = dir
        .iter()
        .map(|t| t.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    for t in &mut dir {
        *t = t.scale(1.0 / norm);
    }
    dir
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_wrong_gradient() {
        // relu at exactly 0 has a one-sided derivative; the check must notice
        let x = vec![Tensor::from_vec(vec![0.0, 1.0])];
        let r = check_all(&x, |v| Ok(v[0].relu().sum()), FD_STEP).unwrap();
        assert!(r.rel_error > 0.1);
    }

    #[test]
    fn passes_on_smooth_function() {
        let x = vec![Tensor::from_vec(vec![0.3, -1.2, 2.0])];
        let r = check_all(&x, |v| Ok(v[0].exp().mul(v[0])?.sum()), FD_STEP).unwrap();
        assert!(r.rel_error < 1e-8, "{r:?}");
    }
}
