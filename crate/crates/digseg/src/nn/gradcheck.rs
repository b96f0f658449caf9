//! Central finite-difference gradient checking.
//!
//! The checker enumerates every parameter element through the `Params`
//! visitor, perturbs it by `+-h`, and compares the analytic gradient against
//! `(loss(th + h) - loss(th - h)) / 2h`. Elements whose analytic and
//! numeric gradients are both below `SMALL_GRAD_FLOOR` are compared
//! absolutely (a relative error is meaningless at that scale) and must agree
//! within `SMALL_GRAD_ABS_TOL`.

use super::{Grads, Params};

pub const SMALL_GRAD_FLOOR: f64 = 1e-6;
pub const SMALL_GRAD_ABS_TOL: f64 = 1e-8;

/// Perturb parameter `name[k]` by `delta`, returning the previous value.
fn poke<M: Params<f64>>(model: &mut M, name: &str, k: usize, delta: f64) -> f64 {
    let mut old = f64::NAN;
    model.visit_mut("", &mut |n, mut v| {
        if n == name {
            let sl = v.as_slice_mut().expect("params are contiguous");
            old = sl[k];
            sl[k] += delta;
        }
    });
    debug_assert!(old.is_finite());
    old
}

fn restore<M: Params<f64>>(model: &mut M, name: &str, k: usize, value: f64) {
    model.visit_mut("", &mut |n, mut v| {
        if n == name {
            v.as_slice_mut().expect("params are contiguous")[k] = value;
        }
    });
}

/// Run the finite-difference comparison over every parameter element.
///
/// Returns the maximum relative error observed among elements with a
/// meaningful gradient magnitude; panics if a small-gradient element
/// disagrees absolutely.
pub fn check_against_fd<M: Params<f64>>(
    model: &mut M,
    loss: impl Fn(&M) -> f64,
    backward: impl Fn(&M, &mut Grads<f64>),
) -> f64 {
    let mut grads = Grads::new();
    backward(model, &mut grads);

    let mut names: Vec<(String, usize)> = Vec::new();
    model.visit("", &mut |n, v| names.push((n.to_string(), v.len())));

    let mut max_rel = 0.0f64;
    for (name, len) in names {
        let analytic = grads
            .get(&name)
            .unwrap_or_else(|| panic!("no gradient recorded for {name}"))
            .as_standard_layout()
            .into_owned();
        let aslice = analytic
            .as_slice()
            .unwrap_or_else(|| panic!("gradient for {name} not contiguous"));
        for k in 0..len {
            let orig = poke(model, &name, k, 0.0);
            let h = 1e-5 * orig.abs().max(1.0);
            poke(model, &name, k, h);
            let lp = loss(model);
            restore(model, &name, k, orig - h);
            let lm = loss(model);
            restore(model, &name, k, orig);
            let fd = (lp - lm) / (2.0 * h);
            let a = aslice[k];
            let mag = fd.abs().max(a.abs());
            if mag < SMALL_GRAD_FLOOR {
                assert!(
                    (fd - a).abs() < SMALL_GRAD_ABS_TOL,
                    "{name}[{k}]: small-gradient mismatch fd={fd:e} analytic={a:e}"
                );
            } else {
                let rel = (fd - a).abs() / mag;
                if rel > max_rel {
                    max_rel = rel;
                }
            }
        }
    }
    max_rel
}
