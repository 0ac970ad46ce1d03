use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::params::ParamSet;

/// Analytic gradients of the scalar built by `loss_fn`.
pub fn grad<F>(loss_fn: F, params: &ParamSet) -> Result<(f64, ParamSet)>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, params)?;
    Ok((g.scalar(loss), g.backward(loss, params)?))
}

/// Central differences, one scalar parameter at a time.
pub fn finite_difference_grad<F>(loss_fn: F, params: &ParamSet, eps: f64) -> Result<ParamSet>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<NodeId>,
{
    assert!(eps > 0.0, "eps must be positive");
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let loss = loss_fn(&mut g, p)?;
        Ok(g.scalar(loss))
    };
    let mut work = params.clone();
    let mut out = params.zeros_like();
    for t in 0..params.len() {
        for i in 0..params.by_index(t).len() {
            let orig = params.by_index(t).data()[i];
            work.by_index_mut(t).data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work.by_index_mut(t).data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work.by_index_mut(t).data_mut()[i] = orig;
            out.by_index_mut(t).data_mut()[i] = (up - down) / (2.0 * eps);
        }
    }
    Ok(out)
}

/// Gradient values below this magnitude are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Largest [`relative_error`] over all scalars, with the offending parameter name.
pub fn max_relative_error(a: &ParamSet, b: &ParamSet) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for ((name, x), (_, y)) in a.iter().zip(b.iter()) {
        for (&u, &v) in x.data().iter().zip(y.data()) {
            let e = relative_error(u, v);
            if e > worst.0 {
                worst = (e, name.to_string());
            }
        }
    }
    worst
}
