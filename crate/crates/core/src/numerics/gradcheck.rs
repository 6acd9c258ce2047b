use crate::error::{Error, Result};

use super::{Graph, Tensor, Var};

/// Compares the reverse-mode gradient of a scalar function against central
/// differences and returns the worst relative error
/// `|analytic - numeric| / max(1, |analytic|)` over all coordinates.
///
/// `f` receives a fresh graph and the leaf holding `point` and must return
/// the scalar output.
pub fn finite_diff_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    let analytic = g.backward(y)?.wrt(x);

    let eval = |p: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p);
        let y = f(&mut g, x)?;
        if g.value(y).len() != 1 {
            return Err(Error::InvalidArgument("function is not scalar".into()));
        }
        Ok(g.value(y).item())
    };

    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
