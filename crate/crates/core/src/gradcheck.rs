//! Central finite-difference gradient checks for `f64` variables.

use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::scalar;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub indices: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` over the checked entries.
    pub rel_error: f64,
    pub max_abs_error: f64,
}

/// Compare the autograd gradient of the scalar `f()` with respect to `var`
/// against central differences with step `h`. `f` must read `var` (its
/// storage is perturbed in place and restored afterwards). At most
/// `max_entries` evenly spaced entries are checked.
pub fn check_gradient(var: &Var, f: impl Fn() -> Result<Tensor>, h: f64, max_entries: usize) -> Result<GradCheck> {
    if var.dtype() != DType::F64 {
        return Err(Error::arg("gradient checks need an f64 variable"));
    }
    let loss = f()?;
    let grads = loss.backward()?;
    let n = var.elem_count();
    let analytic_all: Vec<f64> = match grads.get(var.as_tensor()) {
        Some(g) => g.flatten_all()?.to_vec1()?,
        None => vec![0.0; n],
    };
    let original = var.as_tensor().copy()?;
    let flat: Vec<f64> = original.flatten_all()?.to_vec1()?;
    let stride = n.div_ceil(max_entries.max(1)).max(1);
    let indices: Vec<usize> = (0..n).step_by(stride).collect();

    let mut numeric = Vec::with_capacity(indices.len());
    let eval_at = |i: usize, delta: f64| -> Result<f64> {
        let mut v = flat.clone();
        v[i] += delta;
        var.set(&Tensor::from_vec(v, original.shape(), original.device())?)?;
        scalar(&f()?)
    };
    for &i in &indices {
        let plus = eval_at(i, h)?;
        let minus = eval_at(i, -h)?;
        numeric.push((plus - minus) / (2.0 * h));
    }
    var.set(&original)?;

    let analytic: Vec<f64> = indices.iter().map(|&i| analytic_all[i]).collect();
    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    let denom = norm(&analytic).max(norm(&numeric)).max(1e-300);
    Ok(GradCheck {
        rel_error: norm(&diff) / denom,
        max_abs_error: diff.iter().fold(0.0, |m, d| m.max(d.abs())),
        indices,
        analytic,
        numeric,
    })
}
