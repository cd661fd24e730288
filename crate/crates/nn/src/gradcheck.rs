//! Finite-difference verification of analytic gradients.

use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::Tensor;

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(|a|, |n|, floor)` over all checked entries.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// Name and index of the worst entry.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor, so entries whose true gradient is zero are judged
    /// on absolute error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-6 }
    }
}

/// Compares analytic gradients of the scalar `f` with central differences,
/// for every trainable parameter in `store` and every tensor in `inputs`.
pub fn grad_check<F>(store: &ParamStore, inputs: &[Tensor], opts: GradCheckOptions, f: F) -> GradCheckReport
where
    F: Fn(&mut Tape, &ParamStore, &[Var]) -> Var,
{
    let eval = |s: &ParamStore, xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.input(x.clone())).collect();
        let out = f(&mut tape, s, &vars);
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let out = f(&mut tape, store, &vars);
    let node_grads = tape.backward(out);
    let pgrads = tape.param_grads(&node_grads, store.len());

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        worst: None,
    };
    let mut record = |name: &str, idx: usize, analytic: f64, numeric: f64| {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(opts.floor);
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((name.to_owned(), idx));
        }
    };

    let h = opts.step;
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let len = store.value(id).len();
        let zero = Tensor::zeros(store.value(id).rows(), store.value(id).cols());
        let analytic = pgrads.get(id).cloned().unwrap_or(zero);
        let mut s = store.clone();
        for k in 0..len {
            let orig = s.value(id).data()[k];
            s.value_mut(id).data_mut()[k] = orig + h;
            let up = eval(&s, inputs);
            s.value_mut(id).data_mut()[k] = orig - h;
            let down = eval(&s, inputs);
            s.value_mut(id).data_mut()[k] = orig;
            record(&name, k, analytic.data()[k], (up - down) / (2.0 * h));
        }
    }
    for (i, v) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[i].rows(), inputs[i].cols());
        let analytic = node_grads.wrt(*v).cloned().unwrap_or(zero);
        let mut xs = inputs.to_vec();
        for k in 0..xs[i].len() {
            let orig = xs[i].data()[k];
            xs[i].data_mut()[k] = orig + h;
            let up = eval(store, &xs);
            xs[i].data_mut()[k] = orig - h;
            let down = eval(store, &xs);
            xs[i].data_mut()[k] = orig;
            record(&format!("input{i}"), k, analytic.data()[k], (up - down) / (2.0 * h));
        }
    }
    report
}
