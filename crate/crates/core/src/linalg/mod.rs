//! Dense matrices, a one-sided Jacobi SVD, a reverse-mode tape and the
//! seeded random streams every model in the crate is built from.

pub mod io;
mod matrix;
pub mod rng;
mod svd;
pub mod tape;

pub use matrix::Matrix;
pub use rng::StreamRng;
pub use svd::{svd, SvdResult, SVD_MAX_SWEEPS};
pub use tape::{Gradients, NodeId, Tape};

/// `log(1 + exp(x))` without overflow; returns `x` itself once `x > 30`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log(sum(exp(values)))`.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
