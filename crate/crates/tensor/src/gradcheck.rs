//! Central finite-difference verification of reverse-mode gradients.

use crate::{Graph, ParamStore, Result, Tensor, TensorError, Var};

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn scalar_output(v: Var<'_, f64>) -> Result<f64> {
    v.item()
}

/// Max over coordinates of `|analytic − central| / max(1, |central|)` for the
/// gradient of `f` at `x`.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<'g, f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    finite_difference_check_with(None, f, x, step)
}

/// [`finite_difference_check`] on a graph with `params` attached; the
/// parameters are held fixed.
pub fn finite_difference_check_with<F>(
    params: Option<&ParamStore<f64>>,
    f: F,
    x: &Tensor<f64>,
    step: f64,
) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<'g, f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(TensorError::Contract(format!("finite-difference step must be positive, got {step}")));
    }
    let new_graph = || match params {
        Some(p) => Graph::with_params(p),
        None => Graph::new(),
    };
    let eval = |x: Tensor<f64>| -> Result<f64> {
        let g = new_graph().no_grad();
        let leaf = g.leaf(x);
        scalar_output(f(&g, leaf)?)
    };

    let first = eval(x.clone())?;
    let second = eval(x.clone())?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }

    let analytic = {
        let g = new_graph();
        let leaf = g.leaf(x.clone());
        let loss = f(&g, leaf)?;
        let grads = g.backward(loss)?;
        grads.wrt(leaf).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()))
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(probe.clone())?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Per-parameter outcome of [`param_gradient_check`].
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub per_param: Vec<(String, f64)>,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

/// Checks the gradient of `f` with respect to every trainable parameter of
/// `store`. Parameters larger than `max_coords` are probed at evenly spaced
/// coordinates.
pub fn param_gradient_check<F>(
    store: &ParamStore<f64>,
    f: F,
    step: f64,
    max_coords: usize,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<'g, f64>) -> Result<Var<'g, f64>>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let g = Graph::with_params(s).no_grad();
        scalar_output(f(&g)?)
    };
    let first = eval(store)?;
    let second = eval(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }

    let grads = {
        let g = Graph::with_params(store);
        let loss = f(&g)?;
        g.backward(loss)?.into_param_grads()
    };

    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.trainable().map(|(id, _)| id).collect();
    for id in ids {
        let n = store.value(id).numel();
        let analytic = grads
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        let mut worst = 0.0f64;
        for i in (0..n).step_by(stride) {
            let orig = work.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(analytic[i], numeric));
            report.coordinates += 1;
        }
        report.per_param.push((store.get(id).name.clone(), worst));
    }
    Ok(report)
}
