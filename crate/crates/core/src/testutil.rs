use crate::error::Result;
use crate::gradcheck::check_store;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use crate::gradcheck::random_tensor;

/// Finite-difference check over named inputs; `f` receives their vars in order.
pub fn check_gradients<F>(inputs: &[(&str, Tensor)], tol: f64, f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    for (name, t) in inputs {
        store.insert(name, t.clone());
    }
    let report = check_store(&store, |tape, s| {
        let vars: Vec<Var> = inputs
            .iter()
            .map(|(n, _)| tape.param(s, n))
            .collect::<Result<_>>()?;
        f(tape, &vars)
    })
    .unwrap();
    assert!(report.passes(tol), "gradient check failed: {report:?}");
}
