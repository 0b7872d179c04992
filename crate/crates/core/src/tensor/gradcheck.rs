//! Central-difference gradient checking.

use super::array::Tensor;
use super::graph::{Graph, Precision, Var};
use crate::error::{Error, Result};

/// Outcome for one checked leaf.
#[derive(Debug, Clone)]
pub struct LeafCheck {
    pub name: String,
    pub components_checked: usize,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafCheck>,
    pub max_relative_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_relative_error < tol
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many components per leaf, evenly strided.
    pub max_components_per_leaf: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_components_per_leaf: None,
        }
    }
}

/// Compares analytic gradients of `build` with central differences.
///
/// `build` receives a fresh 64-bit graph and one `Var` per entry of
/// `leaves` (in order) and must return a scalar loss. The error for a
/// component is `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(leaves: &[(String, Tensor)], opts: GradCheckOptions, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&opts.eps) {
        return Err(Error::invalid(
            "grad_check",
            format!("eps {} outside [1e-7, 1e-3]", opts.eps),
        ));
    }
    let eval = |values: &[Tensor]| -> Result<(Graph, Var, Vec<Var>)> {
        let mut g = Graph::with_precision(Precision::F64);
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok((g, loss, vars))
    };

    let mut values: Vec<Tensor> = leaves.iter().map(|(_, t)| t.clone()).collect();
    let (g, loss, vars) = eval(&values)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();
    drop(g);

    let mut report = GradCheckReport {
        leaves: Vec::with_capacity(leaves.len()),
        max_relative_error: 0.0,
    };
    for (li, (name, _)) in leaves.iter().enumerate() {
        let n = values[li].numel();
        let stride = opts
            .max_components_per_leaf
            .map_or(1, |cap| n.div_ceil(cap.max(1)))
            .max(1);
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for c in (0..n).step_by(stride) {
            let orig = values[li].data()[c];
            values[li].data_mut()[c] = orig + opts.eps;
            let (gp, lp, _) = eval(&values)?;
            let fp = gp.value(lp).item();
            values[li].data_mut()[c] = orig - opts.eps;
            let (gm, lm, _) = eval(&values)?;
            let fm = gm.value(lm).item();
            values[li].data_mut()[c] = orig;

            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = analytic[li].data()[c];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!("grad_check on {name}[{c}]")));
            }
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
            checked += 1;
        }
        report.max_relative_error = report.max_relative_error.max(worst);
        report.leaves.push(LeafCheck {
            name: name.clone(),
            components_checked: checked,
            max_relative_error: worst,
        });
    }
    Ok(report)
}
