//! Finite-difference oracle shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use lorasp::linalg::Gradients;
use lorasp::{Matrix, StreamRng};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Entrywise relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Worst relative error between `grads` and central differences of `loss`,
/// probing up to `per_param` random entries of every parameter.
///
/// The floor is `1e-6` or `1e-4 ·` the largest analytic gradient entry,
/// whichever is bigger. Entries far below the gradient's own scale carry
/// more rounding noise than signal at this step size.
pub fn max_fd_error(
    params: &BTreeMap<String, Matrix>,
    grads: &Gradients,
    loss: impl Fn(&BTreeMap<String, Matrix>) -> f64,
    per_param: usize,
    rng: &mut StreamRng,
) -> (f64, String) {
    let scale = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    let floor = (1e-4 * scale).max(1e-6);
    let mut worst = (0.0, String::new());
    let mut probe = params.clone();
    for (name, value) in params {
        let g = grads.get(name).unwrap_or_else(|| panic!("no gradient for {name}"));
        let n = value.len();
        let picks: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| rng.index(0, n)).collect()
        };
        for idx in picks {
            let orig = value.data()[idx];
            probe.get_mut(name).unwrap().data_mut()[idx] = orig + FD_STEP;
            let up = loss(&probe);
            probe.get_mut(name).unwrap().data_mut()[idx] = orig - FD_STEP;
            let down = loss(&probe);
            probe.get_mut(name).unwrap().data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let e = rel_error(g.data()[idx], numeric, floor);
            if e > worst.0 {
                worst = (
                    e,
                    format!("{name}[{idx}]: analytic {} numeric {numeric}", g.data()[idx]),
                );
            }
        }
    }
    worst
}
