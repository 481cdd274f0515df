use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Compares tape gradients of a scalar function against central differences.
///
/// Returns the maximum over all input components of
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`. A function that
/// fails to evaluate yields `f64::INFINITY`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let analytic = match analytic_grads(&f, inputs) {
        Ok(g) => g,
        Err(_) => return f64::INFINITY,
    };
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        f(&tape, &vars)?.value().item()
    };

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let plus = eval(&probe);
            probe[i].data_mut()[j] = orig - eps;
            let minus = eval(&probe);
            probe[i].data_mut()[j] = orig;
            let (Ok(plus), Ok(minus)) = (plus, minus) else {
                return f64::INFINITY;
            };
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

fn analytic_grads<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| v.grad().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
        .collect())
}
