//! Select-prune adapter: vector bank, router, energy-target selection,
//! masked application and the spectral and router losses.
//!
//! Per layer the update is `ΔW(x) = U · diag(mask(x) ⊙ s(x)) · V` where
//! `s(x) = softplus(W₂ · relu(W₁x + b₁) + b₂)`. Scores are sorted by `s²`
//! and the smallest prefix with cumulative energy `E_k(x) ≥ η` stays active.
//!
//! Two evaluation paths exist. The plain functions (`route`, `select`,
//! `apply_adapter`, ...) work on single vectors for inference and as
//! references; [`record_lorasp`] builds the same computation for a batch on a
//! [`Tape`] for training. During backward the selection (`k` and the mask) is
//! a constant: task gradients reach only active scores, while the spectral
//! loss reaches every score through the denominator of `E_k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{logsumexp, softplus, Matrix, NodeId, StreamRng, Tape};
use crate::spectral::{cumulative_energy, rank_at_energy};

/// Total squared-score energy below which a selection is degenerate.
pub const DEGENERATE_ENERGY: f64 = 1e-24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    /// Width of the vector bank.
    #[serde(default = "default_r_init")]
    pub r_init: usize,
    /// Energy target.
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Weight of the spectral loss.
    #[serde(default = "default_spec_weight")]
    pub spec_weight: f64,
    /// Weight of the router regulariser.
    #[serde(default = "default_router_weight")]
    pub router_weight: f64,
    /// Router hidden width; `r_init / 4` when unset.
    #[serde(default)]
    pub hidden_dim: Option<usize>,
}

fn default_r_init() -> usize {
    128
}
fn default_eta() -> f64 {
    0.9
}
fn default_spec_weight() -> f64 {
    1e-2
}
fn default_router_weight() -> f64 {
    1e-3
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            r_init: default_r_init(),
            eta: default_eta(),
            spec_weight: default_spec_weight(),
            router_weight: default_router_weight(),
            hidden_dim: None,
        }
    }
}

impl AdapterConfig {
    pub fn hidden(&self) -> usize {
        self.hidden_dim.unwrap_or((self.r_init / 4).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.r_init == 0 {
            return Err(Error::Config("r_init must be at least 1".into()));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::Config(format!("eta must lie in (0, 1], got {}", self.eta)));
        }
        if !(self.spec_weight >= 0.0) || !(self.router_weight >= 0.0) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.hidden_dim == Some(0) {
            return Err(Error::Config("hidden_dim must be at least 1".into()));
        }
        Ok(())
    }
}

/// Wide basis of candidate update directions for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorBank {
    /// `d_out x r`
    pub u: Matrix,
    /// `r x d_in`
    pub v: Matrix,
}

impl VectorBank {
    pub fn r(&self) -> usize {
        self.v.rows()
    }

    pub fn d_in(&self) -> usize {
        self.v.cols()
    }

    pub fn d_out(&self) -> usize {
        self.u.rows()
    }

    /// `U · diag(values) · V`, the update for a given score vector.
    pub fn materialize(&self, values: &[f64]) -> Result<Matrix> {
        if values.len() != self.r() {
            return Err(Error::Shape {
                op: "materialize",
                lhs: self.u.shape(),
                rhs: (values.len(), 1),
            });
        }
        let scaled = Matrix::from_fn(self.u.rows(), self.r(), |i, j| self.u.get(i, j) * values[j]);
        scaled.matmul(&self.v)
    }
}

/// Two-layer scoring network.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    /// `h x d_in`
    pub w1: Matrix,
    /// `1 x h`
    pub b1: Matrix,
    /// `r x h`
    pub w2: Matrix,
    /// `1 x r`
    pub b2: Matrix,
}

impl RouterParams {
    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn outputs(&self) -> usize {
        self.w2.rows()
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Router with Gaussian weights scaled by `1/√fan_in` and zero biases.
    pub fn init(d_in: usize, hidden: usize, outputs: usize, seed: u64, name: &str) -> Self {
        let w1 = StreamRng::new(seed, &format!("{name}.w1")).gaussian_matrix(hidden, d_in, 1.0 / (d_in as f64).sqrt());
        let w2 =
            StreamRng::new(seed, &format!("{name}.w2")).gaussian_matrix(outputs, hidden, 1.0 / (hidden as f64).sqrt());
        Self {
            w1,
            b1: Matrix::zeros(1, hidden),
            w2,
            b2: Matrix::zeros(1, outputs),
        }
    }

    /// Pre-activation output `W₂ · relu(W₁x + b₁) + b₂`.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = self.w1.mat_vec(x)?;
        for (v, b) in h.iter_mut().zip(self.b1.data()) {
            *v = (*v + b).max(0.0);
        }
        let mut out = self.w2.mat_vec(&h)?;
        for (v, b) in out.iter_mut().zip(self.b2.data()) {
            *v += b;
        }
        Ok(out)
    }
}

/// Trainable parameter count of one adapted layer.
pub fn trainable_params(d_in: usize, d_out: usize, config: &AdapterConfig) -> usize {
    let (r, h) = (config.r_init, config.hidden());
    r * (d_in + d_out) + h * d_in + h + r * h + r
}

/// Builds a layer's bank and router. `U = 0`, so the adapter is an exact
/// no-op until trained; `V` is Gaussian with scale `1/√d_in`. Each
/// parameter draws from its own stream `"{name}.{param}"`.
pub fn init_adapter(
    d_in: usize,
    d_out: usize,
    config: &AdapterConfig,
    seed: u64,
    name: &str,
) -> Result<(VectorBank, RouterParams)> {
    config.validate()?;
    if d_in == 0 || d_out == 0 {
        return Err(Error::Config(format!("layer {name} needs nonzero dims")));
    }
    let r = config.r_init;
    let bank = VectorBank {
        u: Matrix::zeros(d_out, r),
        v: StreamRng::new(seed, &format!("{name}.bank.v")).gaussian_matrix(r, d_in, 1.0 / (d_in as f64).sqrt()),
    };
    let router = RouterParams::init(d_in, config.hidden(), r, seed, &format!("{name}.router"));
    Ok((bank, router))
}

/// Router scores `s(x)`, strictly positive.
pub fn route(x: &[f64], router: &RouterParams) -> Result<Vec<f64>> {
    Ok(router.logits(x)?.into_iter().map(softplus).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub scores: Vec<f64>,
    /// Indices sorted by `s²`, nonincreasing; ties keep index order.
    pub order: Vec<usize>,
    pub k: usize,
    pub energy_k: f64,
    pub mask: Vec<f64>,
    pub degenerate: bool,
}

impl SelectionResult {
    /// `mask ⊙ s`.
    pub fn masked_scores(&self) -> Vec<f64> {
        self.scores.iter().zip(&self.mask).map(|(s, m)| s * m).collect()
    }

    /// `‖(1 − mask) ⊙ s‖₂ / ‖s‖₂`.
    pub fn pruned_fraction(&self) -> f64 {
        let total: f64 = self.scores.iter().map(|s| s * s).sum();
        if total < DEGENERATE_ENERGY {
            return 0.0;
        }
        let pruned: f64 = self.scores.iter().zip(&self.mask).map(|(s, m)| (1.0 - m) * s * s).sum();
        (pruned / total).sqrt()
    }
}

/// Keeps the smallest score prefix (by `s²`) whose energy reaches `eta`.
pub fn select(scores: &[f64], eta: f64) -> SelectionResult {
    let curve = cumulative_energy(scores);
    let r = scores.len();
    if curve.total_energy < DEGENERATE_ENERGY {
        return SelectionResult {
            scores: scores.to_vec(),
            order: curve.order,
            k: 0,
            energy_k: 1.0,
            mask: vec![0.0; r],
            degenerate: true,
        };
    }
    let k = rank_at_energy(&curve, eta);
    let mut mask = vec![0.0; r];
    for &i in &curve.order[..k] {
        mask[i] = 1.0;
    }
    SelectionResult {
        scores: scores.to_vec(),
        energy_k: curve.cumulative[k - 1],
        order: curve.order,
        k,
        mask,
        degenerate: false,
    }
}

/// `U · (mask ⊙ s ⊙ (V·x))`, evaluated without forming `ΔW`.
pub fn apply_adapter(x: &[f64], bank: &VectorBank, selection: &SelectionResult) -> Result<Vec<f64>> {
    if selection.scores.len() != bank.r() || bank.u.cols() != bank.r() {
        return Err(Error::Shape {
            op: "apply_adapter",
            lhs: bank.v.shape(),
            rhs: (selection.scores.len(), 1),
        });
    }
    let mut z = bank.v.mat_vec(x)?;
    for ((zi, s), m) in z.iter_mut().zip(&selection.scores).zip(&selection.mask) {
        *zi *= s * m;
    }
    bank.u.mat_vec(&z)
}

/// `1 − E_k(x)`; zero for a degenerate selection.
pub fn spectral_loss(selection: &SelectionResult) -> f64 {
    if selection.degenerate {
        0.0
    } else {
        1.0 - selection.energy_k
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouterRegularization {
    pub balance: f64,
    pub z: f64,
}

impl RouterRegularization {
    pub fn total(&self) -> f64 {
        self.balance + self.z
    }
}

/// Load-balance and z-loss over a batch.
///
/// `balance = (r / mean k) · Σᵢ fᵢ Pᵢ` with `fᵢ` the fraction of inputs
/// where vector `i` is active and `Pᵢ` the batch mean of `sᵢ² / Σⱼ sⱼ²`;
/// uniform usage and energy give 1. `z` is the batch mean of the squared
/// log-sum-exp of the pre-softplus logits.
pub fn router_regularization(selections: &[SelectionResult], logits: &[Vec<f64>]) -> Result<RouterRegularization> {
    if selections.is_empty() || selections.len() != logits.len() {
        return Err(Error::Empty("router regularisation batch"));
    }
    let n = selections.len() as f64;
    let r = selections[0].scores.len();
    let mut freq = vec![0.0; r];
    let mut share = vec![0.0; r];
    let mut mean_k = 0.0;
    for sel in selections {
        mean_k += sel.k as f64 / n;
        let total: f64 = sel.scores.iter().map(|s| s * s).sum();
        for i in 0..r {
            freq[i] += sel.mask[i] / n;
            if total >= DEGENERATE_ENERGY {
                share[i] += sel.scores[i] * sel.scores[i] / total / n;
            }
        }
    }
    let balance = if mean_k > 0.0 {
        r as f64 / mean_k * freq.iter().zip(&share).map(|(f, p)| f * p).sum::<f64>()
    } else {
        0.0
    };
    let z = logits.iter().map(|l| logsumexp(l).powi(2)).sum::<f64>() / n;
    Ok(RouterRegularization { balance, z })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedOutput {
    pub y: Vec<f64>,
    pub selection: SelectionResult,
}

/// `W₀x + apply_adapter(x, bank, select(route(x), eta))`.
pub fn forward_adapted(
    x: &[f64],
    base: &Matrix,
    bank: &VectorBank,
    router: &RouterParams,
    eta: f64,
) -> Result<AdaptedOutput> {
    if base.shape() != (bank.d_out(), bank.d_in()) {
        return Err(Error::Shape {
            op: "forward_adapted",
            lhs: base.shape(),
            rhs: (bank.d_out(), bank.d_in()),
        });
    }
    let selection = select(&route(x, router)?, eta);
    let delta = apply_adapter(x, bank, &selection)?;
    let mut y = base.mat_vec(x)?;
    for (a, d) in y.iter_mut().zip(delta) {
        *a += d;
    }
    Ok(AdaptedOutput { y, selection })
}

/// Parameter nodes of one adapted layer on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LoraSpNodes {
    pub u: NodeId,
    pub v: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Parameter names used by [`register`] under a layer prefix.
pub const PARAM_SUFFIXES: [&str; 6] = ["bank.u", "bank.v", "router.w1", "router.b1", "router.w2", "router.b2"];

pub fn register(tape: &mut Tape, prefix: &str, bank: &VectorBank, router: &RouterParams) -> LoraSpNodes {
    let mut p = |suffix: &str, m: &Matrix| tape.param(&format!("{prefix}.{suffix}"), m.clone());
    LoraSpNodes {
        u: p("bank.u", &bank.u),
        v: p("bank.v", &bank.v),
        w1: p("router.w1", &router.w1),
        b1: p("router.b1", &router.b1),
        w2: p("router.w2", &router.w2),
        b2: p("router.b2", &router.b2),
    }
}

/// Batch evaluation of one adapted layer on a tape.
#[derive(Debug, Clone)]
pub struct RecordedLoraSp {
    /// `n x d_out` adapter contribution.
    pub delta: NodeId,
    /// `n x r` router scores.
    pub scores: NodeId,
    /// `n x r` pre-softplus logits.
    pub logits: NodeId,
    pub selections: Vec<SelectionResult>,
    /// Batch mean of `1 − E_k`.
    pub spec_loss: NodeId,
    /// `balance + z`.
    pub router_loss: NodeId,
}

/// Records router, selection and masked update for the rows of `x`.
///
/// With `frozen` set, those selections (their `k` and mask) are reused
/// instead of being recomputed from the current scores; finite-difference
/// checks rely on this to hold the discrete choice fixed.
pub fn record_lorasp(
    tape: &mut Tape,
    x: NodeId,
    nodes: &LoraSpNodes,
    eta: f64,
    frozen: Option<&[SelectionResult]>,
) -> Result<RecordedLoraSp> {
    let pre = tape.matmul_t(x, nodes.w1)?;
    let pre = tape.add_row(pre, nodes.b1)?;
    let hidden = tape.relu(pre);
    let logits = tape.matmul_t(hidden, nodes.w2)?;
    let logits = tape.add_row(logits, nodes.b2)?;
    let scores = tape.softplus(logits);

    let svals = tape.value(scores).clone();
    let (n, r) = svals.shape();
    let selections: Vec<SelectionResult> = match frozen {
        Some(f) => {
            if f.len() != n || f.iter().any(|s| s.mask.len() != r) {
                return Err(Error::Shape {
                    op: "record_lorasp(frozen)",
                    lhs: (n, r),
                    rhs: (f.len(), f.first().map_or(0, |s| s.mask.len())),
                });
            }
            f.to_vec()
        }
        None => (0..n).map(|i| select(svals.row(i), eta)).collect(),
    };
    let mask = Matrix::from_fn(n, r, |i, j| selections[i].mask[j]);
    let nondeg = Matrix::from_fn(n, 1, |i, _| if selections[i].degenerate { 0.0 } else { 1.0 });
    let degen = nondeg.map(|v| 1.0 - v);
    let mask = tape.constant(mask);

    // Masked low-rank update: U · (mask ⊙ s ⊙ (V·x)) per row.
    let z = tape.matmul_t(x, nodes.v)?;
    let gated = tape.mul(scores, mask)?;
    let gated = tape.mul(gated, z)?;
    let delta = tape.matmul_t(gated, nodes.u)?;

    // Spectral loss: mean over rows of 1 − kept/total.
    let s2 = tape.square(scores);
    let kept_energy = tape.mul(s2, mask)?;
    let kept = tape.row_sum(kept_energy);
    let total = tape.row_sum(s2);
    let degen = tape.constant(degen);
    let total_safe = tape.add(total, degen)?;
    let energy = tape.div(kept, total_safe)?;
    let nondeg_node = tape.constant(nondeg.clone());
    let kept_part = tape.mul(energy, nondeg_node)?;
    let per_row = tape.sub(nondeg_node, kept_part)?;
    let spec_loss = tape.mean(per_row);

    // Balance: (r / mean k) · Σᵢ fᵢ Pᵢ, with f and mean k constant.
    let mean_k = selections.iter().map(|s| s.k as f64).sum::<f64>() / n as f64;
    let share = tape.div_col(s2, total_safe)?;
    let share = tape.mul_col(share, nondeg_node)?;
    let share = tape.col_sum(share);
    let mut freq = Matrix::zeros(1, r);
    for s in &selections {
        for (f, m) in freq.data_mut().iter_mut().zip(&s.mask) {
            *f += m / n as f64;
        }
    }
    let freq = tape.constant(freq);
    let weighted = tape.mul(share, freq)?;
    let weighted = tape.sum(weighted);
    let balance_scale = if mean_k > 0.0 {
        r as f64 / (mean_k * n as f64)
    } else {
        0.0
    };
    let balance = tape.scale(weighted, balance_scale);
    let lse = tape.logsumexp_rows(logits);
    let lse2 = tape.square(lse);
    let z_loss = tape.mean(lse2);
    let router_loss = tape.add(balance, z_loss)?;

    Ok(RecordedLoraSp {
        delta,
        scores,
        logits,
        selections,
        spec_loss,
        router_loss,
    })
}
