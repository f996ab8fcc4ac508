//! Central finite-difference gradient checks in `f64`.

use super::{ParamStore, Tape, Var};

/// Small enough that a random instance rarely straddles a ReLU kink.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Compare backprop gradients of the scalar `f` against central differences
/// for every scalar of every parameter in `store`. Returns the worst relative
/// error `|n - a| / max(|n|, |a|, 1e-6)`.
pub fn max_relative_error(
    store: &mut ParamStore<f64>,
    f: &dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var,
) -> f64 {
    max_relative_error_with_step(store, f, DEFAULT_STEP)
}

pub fn max_relative_error_with_step(
    store: &mut ParamStore<f64>,
    f: &dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var,
    h: f64,
) -> f64 {
    let mut tape = Tape::new();
    store.zero_grad();
    let loss = f(&mut tape, store);
    tape.backward(loss, store).expect("backward over a scalar loss");
    let eval = |store: &ParamStore<f64>| {
        let mut t = Tape::new();
        let v = f(&mut t, store);
        t.value(v).data()[0]
    };
    let mut worst = 0.0f64;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for k in 0..store.value(id).data().len() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + h;
            let plus = eval(store);
            store.value_mut(id).data_mut()[k] = orig - h;
            let minus = eval(store);
            store.value_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = store.grad(id).data()[k];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}
