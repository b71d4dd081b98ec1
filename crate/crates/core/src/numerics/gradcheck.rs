//! Finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::tensor::Tensor;

/// Entries per parameter above which only a strided subset is probed.
const PROBE_LIMIT: usize = 128;

/// Compares the reverse-mode gradient of a scalar loss against central
/// finite differences and returns the max relative error over all probed
/// parameter entries.
///
/// `build` constructs the loss on a fresh graph from leaves bound to
/// `params` in order; it is called once for the analytic pass and twice per
/// probed entry for the difference quotient.
pub fn grad_check<F>(build: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps
            .iter()
            .map(|p| g.leaf(p, false))
            .collect::<Result<_>>()?;
        let loss = build(&mut g, &vars)?;
        let v = g.scalar_value(loss);
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    // Analytic pass.
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| g.leaf(p, true))
        .collect::<Result<_>>()?;
    let loss = build(&mut g, &vars)?;
    if !g.scalar_value(loss).is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    let grads = g.backward(loss)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get(vars[pi]);
        let n = p.len();
        let stride = n.div_ceil(PROBE_LIMIT).max(1);
        for ei in (0..n).step_by(stride) {
            let orig = p.data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let fp = eval(&work)?;
            work[pi].data_mut()[ei] = orig - eps;
            let fm = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let an = analytic.map_or(0.0, |a| a[ei]);
            // the floor keeps central-difference roundoff (~1e-10 absolute
            // at eps ~ 1e-6) from registering on near-zero entries
            let denom = an.abs().max(fd.abs()).max(1e-4);
            max_rel = max_rel.max((an - fd).abs() / denom);
        }
    }
    Ok(max_rel)
}
