//! Central finite-difference checks of tape gradients in 64-bit precision.

use super::{Binding, Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};

/// Step of the five-point stencil.
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on this absolute scale.
pub const SCALE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl GradReport {
    fn new() -> Self {
        Self { checked: 0, max_rel: 0.0, worst: String::new() }
    }

    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(SCALE_FLOOR);
        self.checked += 1;
        if rel > self.max_rel || !rel.is_finite() {
            self.max_rel = if rel.is_finite() { rel } else { f64::INFINITY };
            self.worst = format!("{} analytic {analytic:.9e} numeric {numeric:.9e}", what());
        }
    }

    pub fn merge(&mut self, other: &GradReport) {
        self.checked += other.checked;
        if other.max_rel > self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst.clone();
        }
    }
}

/// Five-point central difference of `f` at `x`.
pub fn derivative(mut f: impl FnMut(f64) -> Result<f64>, x: f64) -> Result<f64> {
    let h = FD_STEP;
    let (a, b, c, d) = (f(x - 2.0 * h)?, f(x - h)?, f(x + h)?, f(x + 2.0 * h)?);
    Ok((a - 8.0 * b + 8.0 * c - d) / (12.0 * h))
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let val = g.value(v);
    if val.len() != 1 {
        return Err(Error::shape("gradient check loss", "1x1", format!("{} elements", val.len())));
    }
    Ok(val[0])
}

pub type Builder<'a> = &'a dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// Check the gradient of `build(inputs)` with respect to every entry of every input.
pub fn check_inputs(inputs: &[Tensor<f64>], build: Builder) -> Result<GradReport> {
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.tensor(t, false)).collect();
        let out = build(&mut g, &vars)?;
        scalar_of(&g, out)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.tensor(t, true)).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut report = GradReport::new();
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[k].len()];
        let an = grads.wrt(*v).unwrap_or(&zeros).to_vec();
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data[i];
            let num = derivative(
                |x| {
                    work[k].data[i] = x;
                    eval(&work)
                },
                x0,
            )?;
            work[k].data[i] = x0;
            report.record(|| format!("input {k}[{i}]"), an[i], num);
        }
    }
    Ok(report)
}

/// Check parameter gradients of `build`, probing at most `per_tensor` evenly spaced entries
/// of each parameter tensor.
pub fn check_params(
    ps: &ParamSet<f64>,
    per_tensor: usize,
    build: &dyn Fn(&mut Graph<f64>, &Binding) -> Result<Var>,
) -> Result<GradReport> {
    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let b = g.bind(p, false);
        let out = build(&mut g, &b)?;
        scalar_of(&g, out)
    };
    let mut g = Graph::new();
    let b = g.bind(ps, true);
    let out = build(&mut g, &b)?;
    let grads = g.backward(out)?.for_binding(&b);
    let mut report = GradReport::new();
    let mut work = ps.clone();
    for (k, an) in grads.iter().enumerate() {
        let n = an.len();
        let probes = per_tensor.min(n).max(1);
        for p in 0..probes {
            let i = p * n / probes;
            let x0 = ps.get(k).data[i];
            let num = derivative(
                |x| {
                    work.get_mut(k).data[i] = x;
                    eval(&work)
                },
                x0,
            )?;
            work.get_mut(k).data[i] = x0;
            report.record(|| format!("{}[{i}]", ps.name(k)), an.data[i], num);
        }
    }
    Ok(report)
}
