use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central
/// differences at every coordinate of `x`.
///
/// Returns `max |analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(f, x, eps, &coords)
}

/// [`grad_check`] restricted to the listed flat coordinates of `x`.
pub fn grad_check_coords<F>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Usage(format!(
            "grad_check step {eps} outside [1e-7, 1e-3]"
        )));
    }
    if let Some(&c) = coords.iter().find(|&&c| c >= x.len()) {
        return Err(Error::Usage(format!(
            "grad_check coordinate {c} out of range for {} values",
            x.len()
        )));
    }
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let y = f(&mut g, xv)?;
    let grads = g.backward(y)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let y = f(&mut g, v)?;
        let out = g.value(y);
        if !out.is_scalar() {
            return Err(Error::Usage("grad_check function must be scalar".into()));
        }
        Ok(out.item())
    };

    let mut worst: f64 = 0.0;
    for &c in coords {
        let mut plus = x.clone();
        plus.data_mut()[c] += eps;
        let mut minus = x.clone();
        minus.data_mut()[c] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[c];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::numeric(format!(
                "grad_check hit a non-finite value at coordinate {c}"
            )));
        }
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
