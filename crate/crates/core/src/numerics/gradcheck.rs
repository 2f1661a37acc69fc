use crate::error::Result;
use crate::numerics::{Graph, Tensor, Var};

/// Below this magnitude gradients are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Largest relative disagreement between the tape's gradient and a central
/// finite difference, over every coordinate of every parameter.
///
/// `f` builds a scalar from the parameter vars it is handed; it is called
/// once with gradients enabled and twice per coordinate for the
/// differences. The relative error of one coordinate is
/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn grad_check<Fun>(f: Fun, params: &[Tensor<f64>], h: f64) -> Result<f64>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|p| g.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &vars)?;
    let grads = g.gradients(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get(v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect();
    drop(g);

    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = ps
            .iter()
            .map(|p| g.constant(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut worst = 0.0f64;
    for pi in 0..params.len() {
        for j in 0..params[pi].len() {
            let x0 = params[pi].data()[j];
            work[pi].data_mut()[j] = x0 + h;
            let up = eval(&work)?;
            work[pi].data_mut()[j] = x0 - h;
            let down = eval(&work)?;
            work[pi].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi][j];
            let denom = a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
