use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

fn eval_forward<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let g = Graph::surrogate();
    let xv = g.constant(x.clone());
    let y = f(&g, xv)?;
    let v = y.value();
    if v.len() != 1 {
        return Err(Error::NotScalar(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Maximum over coordinates of `|analytic − central difference| / max(1, |analytic|)`.
///
/// Graphs are built in surrogate mode, so straight-through nodes are checked along their
/// soft path; the hard path is piecewise constant and has no useful finite difference.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    if h <= 0.0 {
        return Err(Error::arg("finite-difference step must be positive"));
    }
    let first = eval_forward(&f, x)?;
    let second = eval_forward(&f, x)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let g = Graph::surrogate();
    let xv = g.param(x.clone());
    let y = f(&g, xv)?;
    let grads = g.backward(y)?;
    let analytic = grads
        .wrt(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval_forward(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval_forward(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
