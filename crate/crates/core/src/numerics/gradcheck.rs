//! Central finite differences, evaluated without the tape.

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Gradient scale below which two gradients are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::contract(format!("step size must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite evaluation at coordinate {i}: f(x+h)={plus}, f(x-h)={minus}"
            )));
        }
        out.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(out)
}

/// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, GRAD_FLOOR)`.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> Result<f64> {
    let diff = analytic.max_abs_diff(numeric)?;
    let scale = analytic.max_abs().max(numeric.max_abs()).max(GRAD_FLOOR);
    Ok(diff / scale)
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub rel_error: f64,
    pub grad_scale: f64,
}

/// Compares tape gradients of every listed parameter against central
/// differences of `loss_fn`, which must build a scalar loss on a fresh graph.
pub fn check_param_gradients<F>(store: &ParamStore, ids: &[ParamId], h: f64, loss_fn: F) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        let bw = g.backward(loss)?;
        g.param_grads(&bw)
    };
    let mut report = Vec::with_capacity(ids.len());
    for &id in ids {
        let param = store.get(id);
        let analytic = grads
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(param.tensor.shape().to_vec()));
        let mut work = store.clone();
        let numeric = finite_diff_grad(
            |t| {
                *work.tensor_mut(id) = t.clone();
                let mut g = Graph::new(&work);
                let loss = loss_fn(&mut g)?;
                Ok(g.value(loss).item())
            },
            &param.tensor,
            h,
        )?;
        report.push(ParamCheck {
            name: param.name.clone(),
            rel_error: relative_error(&analytic, &numeric)?,
            grad_scale: analytic.max_abs(),
        });
    }
    Ok(report)
}
