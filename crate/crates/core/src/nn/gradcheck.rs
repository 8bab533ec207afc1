//! Finite-difference verification of backpropagated gradients.

use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};

use super::ParamStore;

/// Analytic and central-difference derivative of a scalar loss with respect to
/// one parameter element.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    /// `|a - n| / max(|a|, |n|, 1e-8)`.
    pub fn rel_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(1e-8);
        (self.analytic - self.numeric).abs() / scale
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.sum_all()?.to_scalar::<f64>()?)
}

fn nudge(var: &Var, base: &[f64], index: usize, delta: f64) -> Result<()> {
    let mut values = base.to_vec();
    values[index] += delta;
    let t = Tensor::from_vec(values, var.shape(), var.device())?.to_dtype(var.dtype())?;
    var.set(&t)?;
    Ok(())
}

/// Compares backprop against central differences for each named trainable
/// parameter of `store`, at the element with the largest analytic gradient.
///
/// `loss` must be deterministic and return a scalar; stores should be f64.
pub fn check_gradients<F>(store: &ParamStore, names: &[&str], eps: f64, loss: F) -> Result<Vec<GradCheck>>
where
    F: Fn() -> Result<Tensor>,
{
    let grads = loss()?.backward()?;
    let mut checks = Vec::with_capacity(names.len());
    for &name in names {
        let var = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("no parameter {name}")))?;
        let grad: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?,
            None => vec![0.0; var.elem_count()],
        };
        let index = grad
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let base: Vec<f64> = var.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        nudge(&var, &base, index, eps)?;
        let plus = scalar(&loss()?)?;
        nudge(&var, &base, index, -eps)?;
        let minus = scalar(&loss()?)?;
        nudge(&var, &base, index, 0.0)?;
        checks.push(GradCheck {
            name: name.to_string(),
            index,
            analytic: grad[index],
            numeric: (plus - minus) / (2.0 * eps),
        });
    }
    Ok(checks)
}

/// Names of trainable parameters whose gradient is missing or identically zero.
pub fn zero_gradient_params(store: &ParamStore, loss: &Tensor) -> Result<Vec<String>> {
    let grads = loss.backward()?;
    let mut zero = Vec::new();
    for (name, var) in store.named_trainable() {
        let nonzero = match grads.get(var.as_tensor()) {
            Some(g) => g.to_dtype(DType::F64)?.abs()?.flatten_all()?.max(0)?.to_scalar::<f64>()? > 0.0,
            None => false,
        };
        if !nonzero {
            zero.push(name);
        }
    }
    Ok(zero)
}
