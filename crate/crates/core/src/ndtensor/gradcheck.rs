//! Central-finite-difference verification of recorded gradients.

use super::{Graph, Tensor, TensorError, Var};

/// Compare the analytic gradient of `f` at `points` against central finite
/// differences with step `eps`. Returns the maximum over all coordinates of
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-8)`.
pub fn grad_check_multi<F>(
    f: &mut F,
    points: &[Tensor<f64>],
    eps: f64,
) -> Result<f64, TensorError>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let analytic: Vec<Tensor<f64>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
        let loss = f(&mut g, &vars)?;
        g.backward(loss)?;
        vars.iter()
            .zip(points)
            .map(|(v, p)| {
                g.grad(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(&p.shape))
            })
            .collect()
    };

    let eval = |f: &mut F, pts: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.constant(p.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.scalar_value(loss))
    };

    let mut max_rel = 0.0f64;
    let mut work: Vec<Tensor<f64>> = points.to_vec();
    for pi in 0..points.len() {
        for ci in 0..points[pi].numel() {
            let orig = work[pi].data[ci];
            work[pi].data[ci] = orig + eps;
            let lp = eval(f, &work)?;
            work[pi].data[ci] = orig - eps;
            let lm = eval(f, &work)?;
            work[pi].data[ci] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let ana = analytic[pi].data[ci];
            let rel = (ana - numeric).abs() / (ana.abs() + numeric.abs() + 1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// Single-input convenience wrapper around [`grad_check_multi`].
pub fn grad_check<F>(f: &mut F, point: &Tensor<f64>, eps: f64) -> Result<f64, TensorError>
where
    F: FnMut(&mut Graph<f64>, Var) -> Result<Var, TensorError>,
{
    let mut wrapped = |g: &mut Graph<f64>, vars: &[Var]| f(g, vars[0]);
    grad_check_multi(&mut wrapped, std::slice::from_ref(point), eps)
}
