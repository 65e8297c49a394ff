//! Central-difference gradient checking.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Gradient entries whose numeric reference is smaller than this are
/// compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// Compares an analytic gradient with central differences.
///
/// `eval` returns the function value and its claimed gradient (one tensor
/// per point tensor). The result is `max |analytic − numeric| / max(|numeric|, floor)`.
pub fn grad_check_with<F>(mut eval: F, point: &[Tensor], h: f64) -> Result<f64>
where
    F: FnMut(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    let (_, analytic) = eval(point)?;
    let mut work: Vec<Tensor> = point.to_vec();
    let mut worst = 0.0f64;
    for (ti, a) in analytic.iter().enumerate() {
        for j in 0..work[ti].len() {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + h;
            let (fp, _) = eval(&work)?;
            work[ti].data_mut()[j] = orig - h;
            let (fm, _) = eval(&work)?;
            work[ti].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let err = (a.data()[j] - numeric).abs() / numeric.abs().max(REL_ERR_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Builds the graph with `f` on parameter leaves holding `point`, runs
/// `backward`, and checks the result against central differences.
pub fn grad_check<F>(f: F, point: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_with(|p| eval_graph(&f, p), point, h)
}

/// Value and parameter gradients of the scalar built by `f`.
pub fn eval_graph<F>(f: &F, point: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item(), grads.wrt(&vars)))
}
