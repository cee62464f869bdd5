//! Fixed-rank LoRA and LoRA mixtures of experts.

use serde::{Deserialize, Serialize};

use crate::adapter::RouterParams;
use crate::error::{Error, Result};
use crate::linalg::tape::{argmax, softmax_rows};
use crate::linalg::{logsumexp, Matrix, NodeId, StreamRng, Tape};

/// Largest supported expert count.
pub const MAX_EXPERTS: usize = 8;

/// `ΔW = scaling · B·A`, with `B` starting at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// `r x d_in`
    pub a: Matrix,
    /// `d_out x r`
    pub b: Matrix,
    pub scaling: f64,
}

impl LoraAdapter {
    pub fn init(d_in: usize, d_out: usize, rank: usize, seed: u64, name: &str) -> Result<Self> {
        if rank == 0 || d_in == 0 || d_out == 0 {
            return Err(Error::Config(format!("lora {name}: rank and dims must be nonzero")));
        }
        Ok(Self {
            a: StreamRng::new(seed, &format!("{name}.a")).gaussian_matrix(rank, d_in, 1.0 / (d_in as f64).sqrt()),
            b: Matrix::zeros(d_out, rank),
            scaling: 1.0,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn num_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// `scaling · B·A`.
    pub fn materialize(&self) -> Matrix {
        self.b.matmul_unchecked(&self.a).scale(self.scaling)
    }

    fn delta(&self, x: &[f64]) -> Result<Vec<f64>> {
        let ax = self.a.mat_vec(x)?;
        Ok(self.b.mat_vec(&ax)?.into_iter().map(|v| self.scaling * v).collect())
    }
}

fn check_base(w0: &Matrix, d_in: usize, d_out: usize, op: &'static str) -> Result<()> {
    if w0.shape() != (d_out, d_in) {
        return Err(Error::Shape {
            op,
            lhs: w0.shape(),
            rhs: (d_out, d_in),
        });
    }
    Ok(())
}

/// `W₀x + scaling · B(Ax)`.
pub fn lora_forward(x: &[f64], w0: &Matrix, adapter: &LoraAdapter) -> Result<Vec<f64>> {
    check_base(w0, adapter.a.cols(), adapter.b.rows(), "lora_forward")?;
    let mut y = w0.mat_vec(x)?;
    for (a, d) in y.iter_mut().zip(adapter.delta(x)?) {
        *a += d;
    }
    Ok(y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    /// One expert per input (argmax, lowest index on ties).
    Hard,
    /// Softmax mixture of all experts.
    Soft,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeAdapter {
    pub experts: Vec<LoraAdapter>,
    /// Scorer with one output per expert.
    pub gate: RouterParams,
    pub mode: GateMode,
}

impl MoeAdapter {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        d_in: usize,
        d_out: usize,
        count: usize,
        rank: usize,
        hidden: usize,
        mode: GateMode,
        seed: u64,
        name: &str,
    ) -> Result<Self> {
        if count == 0 || count > MAX_EXPERTS {
            return Err(Error::Config(format!(
                "expert count must be in 1..={MAX_EXPERTS}, got {count}"
            )));
        }
        let experts = (0..count)
            .map(|e| LoraAdapter::init(d_in, d_out, rank, seed, &format!("{name}.expert{e}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            experts,
            gate: RouterParams::init(d_in, hidden.max(1), count, seed, &format!("{name}.gate")),
            mode,
        })
    }

    pub fn num_params(&self) -> usize {
        self.experts.iter().map(LoraAdapter::num_params).sum::<usize>() + self.gate.num_params()
    }

    /// Mixture weights `g(x)`: one-hot in hard mode, softmax in soft mode.
    pub fn gate_weights(&self, x: &[f64]) -> Result<Vec<f64>> {
        let logits = self.gate.logits(x)?;
        Ok(gate_from_logits(&logits, self.mode))
    }
}

pub fn gate_from_logits(logits: &[f64], mode: GateMode) -> Vec<f64> {
    match mode {
        GateMode::Hard => {
            let mut g = vec![0.0; logits.len()];
            g[argmax(logits)] = 1.0;
            g
        }
        GateMode::Soft => softmax_rows(&Matrix::row_vector(logits)).into_data(),
    }
}

/// `W₀x + Σᵢ gᵢ(x) · Bᵢ(Aᵢx)`; hard mode evaluates only the chosen expert.
pub fn moe_forward(x: &[f64], w0: &Matrix, moe: &MoeAdapter) -> Result<Vec<f64>> {
    let first = moe.experts.first().ok_or(Error::Empty("expert list"))?;
    check_base(w0, first.a.cols(), first.b.rows(), "moe_forward")?;
    let g = moe.gate_weights(x)?;
    let mut y = w0.mat_vec(x)?;
    for (expert, &gi) in moe.experts.iter().zip(&g) {
        if moe.mode == GateMode::Hard && gi == 0.0 {
            continue;
        }
        for (a, d) in y.iter_mut().zip(expert.delta(x)?) {
            *a += gi * d;
        }
    }
    Ok(y)
}

/// `scaling · (x·Aᵀ)·Bᵀ` for the rows of `x`.
pub fn record_lora(tape: &mut Tape, x: NodeId, a: NodeId, b: NodeId, scaling: f64) -> Result<NodeId> {
    let ax = tape.matmul_t(x, a)?;
    let bax = tape.matmul_t(ax, b)?;
    Ok(if scaling == 1.0 { bax } else { tape.scale(bax, scaling) })
}

#[derive(Debug, Clone, Copy)]
pub struct ExpertNodes {
    pub a: NodeId,
    pub b: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct GateNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

#[derive(Debug, Clone)]
pub struct RecordedMoe {
    pub delta: NodeId,
    pub logits: NodeId,
    /// `n x E` mixture weights.
    pub gates: NodeId,
    /// Per-row chosen (argmax) expert.
    pub choices: Vec<usize>,
    /// Switch-style balance plus z-loss.
    pub router_loss: NodeId,
}

/// Batch evaluation of a mixture on a tape. Hard mode is straight-through:
/// the forward value uses the one-hot choice, only the chosen expert
/// receives gradient, and the gate receives the softmax gradient.
pub fn record_moe(
    tape: &mut Tape,
    x: NodeId,
    experts: &[(ExpertNodes, f64)],
    gate: &GateNodes,
    mode: GateMode,
) -> Result<RecordedMoe> {
    let pre = tape.matmul_t(x, gate.w1)?;
    let pre = tape.add_row(pre, gate.b1)?;
    let hidden = tape.relu(pre);
    let logits = tape.matmul_t(hidden, gate.w2)?;
    let logits = tape.add_row(logits, gate.b2)?;
    let gates = match mode {
        GateMode::Hard => tape.argmax_rows(logits),
        GateMode::Soft => tape.softmax_rows(logits),
    };
    let lv = tape.value(logits).clone();
    let (n, e) = lv.shape();
    let choices: Vec<usize> = (0..n).map(|i| argmax(lv.row(i))).collect();

    let mut delta: Option<NodeId> = None;
    for (j, (nodes, scaling)) in experts.iter().enumerate() {
        let d = record_lora(tape, x, nodes.a, nodes.b, *scaling)?;
        let gj = tape.column(gates, j)?;
        let weighted = tape.mul_col(d, gj)?;
        delta = Some(match delta {
            Some(acc) => tape.add(acc, weighted)?,
            None => weighted,
        });
    }
    let delta = delta.ok_or(Error::Empty("expert list"))?;

    let probs = tape.softmax_rows(logits);
    let mean_probs = tape.col_sum(probs);
    let mut freq = Matrix::zeros(1, e);
    for &c in &choices {
        freq.data_mut()[c] += 1.0 / n as f64;
    }
    let freq = tape.constant(freq);
    let weighted = tape.mul(mean_probs, freq)?;
    let weighted = tape.sum(weighted);
    let balance = tape.scale(weighted, e as f64 / n as f64);
    let lse = tape.logsumexp_rows(logits);
    let lse2 = tape.square(lse);
    let z = tape.mean(lse2);
    let router_loss = tape.add(balance, z)?;

    Ok(RecordedMoe {
        delta,
        logits,
        gates,
        choices,
        router_loss,
    })
}

/// Plain evaluation of the mixture's router loss, matching [`record_moe`].
pub fn moe_router_loss(logits: &[Vec<f64>]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::Empty("gate batch"));
    }
    let n = logits.len() as f64;
    let e = logits[0].len();
    let mut freq = vec![0.0; e];
    let mut mean_p = vec![0.0; e];
    let mut z = 0.0;
    for l in logits {
        freq[argmax(l)] += 1.0 / n;
        for (m, p) in mean_p.iter_mut().zip(gate_from_logits(l, GateMode::Soft)) {
            *m += p / n;
        }
        z += logsumexp(l).powi(2) / n;
    }
    let balance = e as f64 * freq.iter().zip(&mean_p).map(|(f, p)| f * p).sum::<f64>();
    Ok(balance + z)
}
