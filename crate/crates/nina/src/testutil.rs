//! Shared helpers for unit tests: parameter perturbation and
//! finite-difference gradient checks over whole parameter stores.

use rand_chacha::ChaCha8Rng;

use crate::params::{gauss, ParamStore};
use crate::tape::{Tape, VarId};
use crate::Result;

/// Add gaussian noise to every parameter entry (clamps re-applied),
/// turning identity-initialized models into generic ones.
pub fn perturb_store(store: &mut ParamStore, scale: f64, rng: &mut ChaCha8Rng) {
    for e in &mut store.entries {
        for v in &mut e.value.data {
            *v += scale * gauss(rng);
        }
    }
    store.apply_clamps();
}

/// Check tape gradients of `build`'s scalar loss against central finite
/// differences over every entry of every parameter.
pub fn fd_param_check(
    store: &mut ParamStore,
    tol: f64,
    build: impl Fn(&mut Tape, &ParamStore) -> Result<VarId>,
) {
    let mut tape = Tape::new();
    let loss = build(&mut tape, store).unwrap();
    tape.backward(loss).unwrap();
    let grads = tape.param_grads();

    let eval = |store: &ParamStore| -> f64 {
        let mut t = Tape::new();
        let l = build(&mut t, store).unwrap();
        t.value(l).item()
    };
    let h = 1e-5;
    for (pid, g) in &grads {
        for i in 0..g.data.len() {
            let orig = store.get(*pid).data[i];
            store.get_mut(*pid).data[i] = orig + h;
            let fp = eval(store);
            store.get_mut(*pid).data[i] = orig - h;
            let fm = eval(store);
            store.get_mut(*pid).data[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let rel = (g.data[i] - fd).abs() / fd.abs().max(1e-3);
            assert!(
                rel < tol,
                "param {} entry {i}: tape {} vs fd {fd} (rel {rel})",
                store.entries[pid.0].name,
                g.data[i]
            );
        }
    }
}
