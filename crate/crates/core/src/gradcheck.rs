//! Central finite-difference verification of reverse-mode gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{contract_err, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

/// Denominator floor for relative errors, so coordinates whose true gradient
/// is zero are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return contract_err(format!("grad_check needs a scalar function, got shape {:?}", t.shape()));
    }
    Ok(t.item())
}

/// Worst relative error between the reverse-mode gradient of `f` at `point`
/// and central differences `(f(x + step) - f(x - step)) / (2 step)`.
///
/// `coords` restricts the comparison to a subset of coordinates; `None`
/// checks all of them.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64, coords: Option<&[usize]>) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return contract_err("grad_check step must be positive");
    }
    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(&mut g, x)?;
    scalar_of(&g, y)?;
    let grads = g.backward(y)?;
    let analytic = grads.get(&g, x).unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::no_grad();
        let x = g.constant(t);
        let y = f(&mut g, x)?;
        scalar_of(&g, y)
    };
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };
    let mut worst = 0.0f64;
    for &i in coords {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Like [`grad_check`], but differentiates with respect to the parameters of
/// `store`. `coords` lists `(parameter index, element index)` pairs.
pub fn grad_check_params<F>(
    f: F,
    store: &ParamStore,
    step: f64,
    coords: &[(usize, usize)],
) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(step > 0.0) {
        return contract_err("grad_check step must be positive");
    }
    let mut work = store.clone();
    work.zero_grad();
    let mut g = Graph::new();
    let y = f(&mut g, &work)?;
    scalar_of(&g, y)?;
    let grads = g.backward(y)?;
    g.accumulate_into(&grads, &mut work);
    let analytic: Vec<Tensor> = work.iter().map(|p| p.grad.clone()).collect();

    let mut eval = |pi: usize, ei: usize, delta: f64| -> Result<f64> {
        let original = work.iter().nth(pi).expect("parameter index").value.data()[ei];
        work.iter_mut().nth(pi).unwrap().value.data_mut()[ei] = original + delta;
        let mut g = Graph::no_grad();
        let y = f(&mut g, &work);
        work.iter_mut().nth(pi).unwrap().value.data_mut()[ei] = original;
        scalar_of(&g, y?)
    };
    let mut worst = 0.0f64;
    for &(pi, ei) in coords {
        let numeric = (eval(pi, ei, step)? - eval(pi, ei, -step)?) / (2.0 * step);
        worst = worst.max(relative_error(analytic[pi].data()[ei], numeric));
    }
    Ok(worst)
}
