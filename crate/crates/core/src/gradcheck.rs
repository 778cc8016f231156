//! Central finite-difference checks for tape gradients.

use rand::Rng;

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Perturbation used for every central difference.
pub const STEP: f64 = 1e-6;

/// Denominator floor for the relative error, so entries whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(param, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
    /// Parameters whose analytic gradient was missing.
    pub missing: Vec<String>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.missing.is_empty() && self.max_rel_err < tol
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of `loss_fn` against central finite
/// differences for every entry of every parameter in `store`.
pub fn check_store<F>(store: &ParamStore, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    let grads = tape.backward(loss)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = loss_fn(&mut t, s)?;
        Ok(t.value(l).item())
    };

    let mut report = GradCheckReport::default();
    let mut probe = store.clone();
    for name in store.names() {
        let Some(analytic) = grads.get(&name) else {
            report.missing.push(name);
            continue;
        };
        for i in 0..analytic.len() {
            let orig = probe.get(&name).expect("param").values()[i];
            probe.get_mut(&name).expect("param").values_mut()[i] = orig + STEP;
            let up = eval(&probe)?;
            probe.get_mut(&name).expect("param").values_mut()[i] = orig - STEP;
            let down = eval(&probe)?;
            probe.get_mut(&name).expect("param").values_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.values()[i];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((name.clone(), i, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Uniform(-1, 1) matrix, for tests.
pub fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let values = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, values).expect("sized")
}
