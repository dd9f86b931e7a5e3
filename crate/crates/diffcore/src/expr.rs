//! Expression-level entry points: evaluate, differentiate and check a
//! scalar expression against central finite differences.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{DiffError, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Named input tensors.
pub type Bindings = BTreeMap<String, Tensor>;

/// Leaf handles for the bound variables of one graph.
pub struct Vars(BTreeMap<String, NodeId>);

impl Vars {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| DiffError::Unbound(name.to_string()))
    }
}

/// An expression is anything that can record itself onto a fresh graph.
pub trait Expr {
    fn build(&self, g: &mut Graph, vars: &Vars) -> Result<NodeId>;
}

impl<F> Expr for F
where
    F: Fn(&mut Graph, &Vars) -> Result<NodeId>,
{
    fn build(&self, g: &mut Graph, vars: &Vars) -> Result<NodeId> {
        self(g, vars)
    }
}

fn record(expr: &dyn Expr, bindings: &Bindings) -> Result<(Graph, Vars, NodeId)> {
    let mut g = Graph::new();
    let mut vars = BTreeMap::new();
    for (name, t) in bindings {
        vars.insert(name.clone(), g.leaf(name, Arc::new(t.clone()))?);
    }
    let vars = Vars(vars);
    let root = expr.build(&mut g, &vars)?;
    Ok((g, vars, root))
}

pub fn forward(expr: &dyn Expr, bindings: &Bindings) -> Result<Tensor> {
    let (g, _, root) = record(expr, bindings)?;
    Ok(g.value(root).clone())
}

/// Gradient of a scalar expression with respect to the named bindings.
/// Variables the root does not depend on get a zero gradient.
pub fn gradient(
    expr: &dyn Expr,
    bindings: &Bindings,
    wrt: &[&str],
) -> Result<BTreeMap<String, Tensor>> {
    for name in wrt {
        if !bindings.contains_key(*name) {
            return Err(DiffError::Unbound(name.to_string()));
        }
    }
    let (g, vars, root) = record(expr, bindings)?;
    let grads = g.backward(root)?;
    let mut out = BTreeMap::new();
    for name in wrt {
        let id = vars.get(name)?;
        let t = grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(g.shape(id)));
        out.insert(name.to_string(), t);
    }
    Ok(out)
}

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    /// Max over differentiable coordinates of
    /// `|analytic - central| / max(1e-12, |central|)`.
    pub max_relative_error: f64,
    /// Coordinate attaining the maximum.
    pub worst: Option<(String, usize)>,
    /// Coordinates whose one-sided slopes disagree at every probed step;
    /// they are excluded from the maximum.
    pub kinks: Vec<(String, usize)>,
    pub checked: usize,
}

impl FdReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_relative_error <= tol
    }
}

fn eval_scalar(expr: &dyn Expr, bindings: &Bindings) -> Result<f64> {
    forward(expr, bindings)?.item()
}

/// Compares reverse-mode gradients against central differences over every
/// coordinate of every binding.
pub fn finite_diff_check(expr: &dyn Expr, bindings: &Bindings, step: f64) -> Result<FdReport> {
    let names: Vec<&str> = bindings.keys().map(String::as_str).collect();
    finite_diff_check_wrt(expr, bindings, &names, step)
}

/// [`finite_diff_check`] restricted to the named bindings.
pub fn finite_diff_check_wrt(
    expr: &dyn Expr,
    bindings: &Bindings,
    wrt: &[&str],
    step: f64,
) -> Result<FdReport> {
    if !(step > 0.0) {
        return Err(DiffError::InvalidArgument {
            op: "finite_diff_check",
            msg: format!("step {step} must be > 0"),
        });
    }
    let analytic = gradient(expr, bindings, wrt)?;
    let mut work = bindings.clone();
    let f0 = eval_scalar(expr, bindings)?;
    let mut report = FdReport {
        max_relative_error: 0.0,
        worst: None,
        kinks: Vec::new(),
        checked: 0,
    };
    for name in wrt {
        let n = bindings[*name].len();
        let grad = &analytic[*name];
        for k in 0..n {
            let x0 = bindings[*name].data()[k];
            let mut at = |delta: f64| -> Result<f64> {
                work.get_mut(*name).expect("bound").data_mut()[k] = x0 + delta;
                eval_scalar(expr, &work)
            };
            let fp = at(step)?;
            let fm = at(-step)?;
            let fp2 = at(step / 2.0)?;
            let fm2 = at(-step / 2.0)?;
            work.get_mut(*name).expect("bound").data_mut()[k] = x0;

            let central = (fp - fm) / (2.0 * step);
            // A smooth function's one-sided slopes disagree by O(step); at a
            // kink the disagreement does not shrink with the step.
            let jump = ((fp - f0) / step - (f0 - fm) / step).abs();
            let jump_half = ((fp2 - f0) / (step / 2.0) - (f0 - fm2) / (step / 2.0)).abs();
            let noise = 1e-6 * central.abs().max(1.0);
            if jump > noise && jump_half > 0.75 * jump {
                report.kinks.push((name.to_string(), k));
                continue;
            }
            let err = (grad.data()[k] - central).abs() / central.abs().max(1e-12);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((name.to_string(), k));
            }
        }
    }
    Ok(report)
}
