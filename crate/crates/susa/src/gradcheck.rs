//! Central finite-difference checking of composed forward passes.

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::graph::{take_grads, Graph, NodeId};

/// Default step for central differences at 64-bit precision.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Compare analytic gradients of a scalar-valued computation against central
/// finite differences. `build` receives a fresh graph plus the parameter
/// leaves (in the order of `params`) and returns the scalar output node.
///
/// Returns the max over all parameter elements of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<B>(build: B, params: &[ArrayD<f64>], step: f64) -> Result<f64>
where
    B: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |point: &[ArrayD<f64>]| -> Result<(f64, Option<Vec<ArrayD<f64>>>, bool)> {
        let mut g = Graph::<f64>::new();
        let ids: Vec<NodeId> = point.iter().map(|p| g.leaf(p.clone(), true)).collect();
        let out = build(&mut g, &ids)?;
        let value = g.scalar_value(out);
        Ok((value, None, value.is_finite()))
    };

    // Analytic pass.
    let mut g = Graph::<f64>::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.leaf(p.clone(), true)).collect();
    let out = build(&mut g, &ids)?;
    if !g.scalar_value(out).is_finite() {
        return Err(Error::NonFinite("grad_check forward evaluation".into()));
    }
    let mut grads = g.backward(out)?;
    let analytic = take_grads(&mut grads, &g, &ids);

    let mut max_err = 0.0f64;
    let mut point: Vec<ArrayD<f64>> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for ei in 0..param.len() {
            let orig = param.as_slice().unwrap()[ei];
            point[pi].as_slice_mut().unwrap()[ei] = orig + step;
            let (plus, _, ok_p) = eval(&point)?;
            point[pi].as_slice_mut().unwrap()[ei] = orig - step;
            let (minus, _, ok_m) = eval(&point)?;
            point[pi].as_slice_mut().unwrap()[ei] = orig;
            if !ok_p || !ok_m {
                return Err(Error::NonFinite(format!(
                    "grad_check finite-difference evaluation at parameter {pi} element {ei}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi].as_slice().unwrap()[ei];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::NonFinite(format!(
                    "grad_check gradient at parameter {pi} element {ei}"
                )));
            }
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
