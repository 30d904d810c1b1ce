//! Central finite-difference checking of graph gradients.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Worst-case discrepancy found by [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    /// `(input index, flat element index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Denominator floor for the relative error; entries whose gradients are
/// both below this magnitude are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step `h`, for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let inputs: Vec<Tensor> = inputs.iter().map(|t| t.as_standard_layout().into_owned()).collect();
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out);

    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor> = inputs.clone();
    for (idx, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, inputs[idx].shape());
        let flat: Vec<f64> = analytic.iter().copied().collect();
        for (e, &a) in flat.iter().enumerate() {
            let orig = inputs[idx].as_slice().expect("standard layout")[e];
            set_flat(&mut work[idx], e, orig + h);
            let fp = eval(&work)?;
            set_flat(&mut work[idx], e, orig - h);
            let fm = eval(&work)?;
            set_flat(&mut work[idx], e, orig);
            let n = (fp - fm) / (2.0 * h);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
            if rel > report.max_rel_err {
                report = GradCheckReport {
                    max_rel_err: rel,
                    worst: (idx, e),
                    analytic: a,
                    numeric: n,
                };
            }
        }
    }
    Ok(report)
}

fn set_flat(t: &mut Tensor, e: usize, v: f64) {
    t.as_slice_mut().expect("standard layout")[e] = v;
}
