//! Central finite-difference gradient checking in 64-bit.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of the backward rules it is used to validate.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub rel_tol: f64,
    /// Absolute slack for gradients that are (numerically) zero.
    pub abs_tol: f64,
    /// Upper bound on perturbed entries per tensor; entries are chosen on an
    /// even stride when a tensor is larger.
    pub max_entries: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-8,
            max_entries: usize::MAX,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: Vec<String>,
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|)` seen among
    /// entries above the absolute floor.
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn record(&mut self, label: String, analytic: f64, numeric: f64, opts: &GradCheckOptions) {
        self.checked += 1;
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        if scale > opts.abs_tol {
            self.max_rel_err = self.max_rel_err.max(diff / scale);
        }
        if !(diff <= opts.rel_tol * scale + opts.abs_tol) {
            self.failures
                .push(format!("{label}: analytic {analytic:e} vs numeric {numeric:e}"));
        }
    }
}

fn entries(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        let stride = n as f64 / max as f64;
        (0..max).map(|i| (i as f64 * stride) as usize).collect()
    }
}

/// Checks `d loss / d input` for every tensor in `inputs`. `f` rebuilds the
/// scalar loss from graph leaves holding the inputs.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let mut report = GradCheckReport {
        checked: 0,
        failures: Vec::new(),
        max_rel_err: 0.0,
    };
    let mut work = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[ti].shape()));
        for idx in entries(inputs[ti].numel(), opts.max_entries) {
            let orig = work[ti].data()[idx];
            work[ti].data_mut()[idx] = orig + opts.step;
            let up = eval(&work)?;
            work[ti].data_mut()[idx] = orig - opts.step;
            let down = eval(&work)?;
            work[ti].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            report.record(format!("input{ti}[{idx}]"), analytic.data()[idx], numeric, &opts);
        }
    }
    Ok(report)
}

/// Checks `d loss / d param` for every parameter of `store` whose name
/// passes `select`.
pub fn check_params<F>(
    store: &ParamStore<f64>,
    select: impl Fn(&str) -> bool,
    opts: GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;
    let analytic = g.param_grads(&grads);
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, s)?;
        Ok(g.value(loss).item())
    };
    let mut report = GradCheckReport {
        checked: 0,
        failures: Vec::new(),
        max_rel_err: 0.0,
    };
    let names: Vec<String> = store
        .params()
        .map(|(k, _)| k.to_string())
        .filter(|k| select(k))
        .collect();
    let mut work = store.clone();
    for name in names {
        let numel = store.param(&name)?.numel();
        let an = match analytic.get(&name) {
            Some(t) => t.clone(),
            None => Tensor::zeros(store.param(&name)?.shape()),
        };
        for idx in entries(numel, opts.max_entries) {
            let orig = store.param(&name)?.data()[idx];
            work.param_mut(&name).expect("present").data_mut()[idx] = orig + opts.step;
            let up = eval(&work)?;
            work.param_mut(&name).expect("present").data_mut()[idx] = orig - opts.step;
            let down = eval(&work)?;
            work.param_mut(&name).expect("present").data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            report.record(format!("{name}[{idx}]"), an.data()[idx], numeric, &opts);
        }
    }
    Ok(report)
}
