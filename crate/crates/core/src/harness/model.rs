//! The frozen base network with one adapter kind attached to both layers.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::tasks::{BaseNet, LAYERS};
use crate::adapter::{self, AdapterConfig, LoraSpNodes, SelectionResult};
use crate::baselines::{self, ExpertNodes, GateMode, GateNodes, LoraAdapter, MoeAdapter};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterKind {
    Lorasp,
    Lora,
    MoeHard,
    MoeSoft,
    FullFt,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 5] = [Self::Lorasp, Self::Lora, Self::MoeHard, Self::MoeSoft, Self::FullFt];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lorasp => "lorasp",
            Self::Lora => "lora",
            Self::MoeHard => "moe-hard",
            Self::MoeSoft => "moe-soft",
            Self::FullFt => "full-ft",
        }
    }

    fn gate_mode(self) -> Option<GateMode> {
        match self {
            Self::MoeHard => Some(GateMode::Hard),
            Self::MoeSoft => Some(GateMode::Soft),
            _ => None,
        }
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Architecture choices of the adapter, independent of optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: AdapterKind,
    /// Fixed LoRA rank.
    pub rank: usize,
    /// LoRA-SP bank width.
    pub r_init: usize,
    /// Router and gate hidden width; `None` means `r_init / 4` for both.
    pub hidden_dim: Option<usize>,
    pub eta: f64,
    pub experts: usize,
    pub expert_rank: usize,
}

impl ModelSpec {
    fn lorasp_config(&self) -> AdapterConfig {
        AdapterConfig {
            r_init: self.r_init,
            eta: self.eta,
            hidden_dim: self.hidden_dim,
            ..AdapterConfig::default()
        }
    }

    fn gate_hidden(&self) -> usize {
        self.lorasp_config().hidden()
    }

    /// Nominal active rank of a fixed-capacity kind.
    pub fn nominal_rank(&self, d_out: usize, d_in: usize) -> Option<usize> {
        match self.kind {
            AdapterKind::Lorasp => None,
            AdapterKind::Lora => Some(self.rank),
            AdapterKind::MoeHard => Some(self.expert_rank),
            AdapterKind::MoeSoft => Some(self.experts * self.expert_rank),
            AdapterKind::FullFt => Some(d_out.min(d_in)),
        }
    }

    /// Hand-derived trainable parameter count for one `d_out x d_in` layer.
    pub fn layer_params(&self, d_out: usize, d_in: usize) -> usize {
        match self.kind {
            AdapterKind::Lorasp => adapter::trainable_params(d_in, d_out, &self.lorasp_config()),
            AdapterKind::Lora => self.rank * (d_in + d_out),
            AdapterKind::MoeHard | AdapterKind::MoeSoft => {
                let (e, h) = (self.experts, self.gate_hidden());
                e * self.expert_rank * (d_in + d_out) + h * d_in + h + e * h + e
            }
            AdapterKind::FullFt => d_out * d_in,
        }
    }
}

/// Discrete routing decisions to hold fixed while re-recording a pass.
#[derive(Debug, Clone, Default)]
pub struct Frozen {
    pub selections: BTreeMap<String, Vec<SelectionResult>>,
}

/// Node handles and discrete decisions of one recorded forward pass.
#[derive(Debug, Clone)]
pub struct Pass {
    pub output: NodeId,
    /// Mean over layers of the spectral loss (LoRA-SP only).
    pub spec: Option<NodeId>,
    /// Mean over layers of the router regularizer (routed kinds only).
    pub router: Option<NodeId>,
    pub selections: BTreeMap<String, Vec<SelectionResult>>,
    pub choices: BTreeMap<String, Vec<usize>>,
    /// `n x E` gate weights per layer (mixture kinds only).
    pub gates: BTreeMap<String, Matrix>,
}

/// Loss nodes of one recorded pass.
#[derive(Debug, Clone)]
pub struct LossPass {
    pub total: NodeId,
    pub task: NodeId,
    pub pass: Pass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub spec: f64,
    pub router: f64,
}

/// Adapter parameters for both layers, keyed by tape parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: BTreeMap<String, Matrix>,
}

impl Model {
    pub fn init(spec: &ModelSpec, base: &BaseNet, seed: u64) -> Result<Self> {
        let mut params = BTreeMap::new();
        for layer in LAYERS {
            let w = base.weight(layer).expect("known layer");
            let (d_out, d_in) = w.shape();
            match spec.kind {
                AdapterKind::Lorasp => {
                    let (bank, router) = adapter::init_adapter(d_in, d_out, &spec.lorasp_config(), seed, layer)?;
                    params.insert(format!("{layer}.bank.u"), bank.u);
                    params.insert(format!("{layer}.bank.v"), bank.v);
                    params.insert(format!("{layer}.router.w1"), router.w1);
                    params.insert(format!("{layer}.router.b1"), router.b1);
                    params.insert(format!("{layer}.router.w2"), router.w2);
                    params.insert(format!("{layer}.router.b2"), router.b2);
                }
                AdapterKind::Lora => {
                    let l = LoraAdapter::init(d_in, d_out, spec.rank, seed, &format!("{layer}.lora"))?;
                    params.insert(format!("{layer}.lora.a"), l.a);
                    params.insert(format!("{layer}.lora.b"), l.b);
                }
                AdapterKind::MoeHard | AdapterKind::MoeSoft => {
                    let moe = MoeAdapter::init(
                        d_in,
                        d_out,
                        spec.experts,
                        spec.expert_rank,
                        spec.gate_hidden(),
                        spec.kind.gate_mode().expect("moe kind"),
                        seed,
                        layer,
                    )?;
                    for (e, ex) in moe.experts.into_iter().enumerate() {
                        params.insert(format!("{layer}.expert{e}.a"), ex.a);
                        params.insert(format!("{layer}.expert{e}.b"), ex.b);
                    }
                    params.insert(format!("{layer}.gate.w1"), moe.gate.w1);
                    params.insert(format!("{layer}.gate.b1"), moe.gate.b1);
                    params.insert(format!("{layer}.gate.w2"), moe.gate.w2);
                    params.insert(format!("{layer}.gate.b2"), moe.gate.b2);
                }
                AdapterKind::FullFt => {
                    params.insert(format!("{layer}.delta"), Matrix::zeros(d_out, d_in));
                }
            }
        }
        Ok(Self {
            spec: spec.clone(),
            params,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Matrix::len).sum()
    }

    fn p(&self, name: &str) -> Result<&Matrix> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("model is missing parameter {name}")))
    }

    /// Records the adapter contribution of one layer for the rows of `x`.
    fn record_layer(
        &self,
        tape: &mut Tape,
        layer: &str,
        x: NodeId,
        frozen: Option<&Frozen>,
        pass: &mut Pass,
        spec_terms: &mut Vec<NodeId>,
        router_terms: &mut Vec<NodeId>,
    ) -> Result<NodeId> {
        let param = |tape: &mut Tape, suffix: &str| -> Result<NodeId> {
            let name = format!("{layer}.{suffix}");
            Ok(tape.param(&name, self.p(&name)?.clone()))
        };
        match self.spec.kind {
            AdapterKind::Lorasp => {
                let nodes = LoraSpNodes {
                    u: param(tape, "bank.u")?,
                    v: param(tape, "bank.v")?,
                    w1: param(tape, "router.w1")?,
                    b1: param(tape, "router.b1")?,
                    w2: param(tape, "router.w2")?,
                    b2: param(tape, "router.b2")?,
                };
                let held = frozen.and_then(|f| f.selections.get(layer)).map(Vec::as_slice);
                let rec = adapter::record_lorasp(tape, x, &nodes, self.spec.eta, held)?;
                spec_terms.push(rec.spec_loss);
                router_terms.push(rec.router_loss);
                pass.selections.insert(layer.to_owned(), rec.selections);
                Ok(rec.delta)
            }
            AdapterKind::Lora => {
                let a = param(tape, "lora.a")?;
                let b = param(tape, "lora.b")?;
                baselines::record_lora(tape, x, a, b, 1.0)
            }
            AdapterKind::MoeHard | AdapterKind::MoeSoft => {
                let mut experts = Vec::with_capacity(self.spec.experts);
                for e in 0..self.spec.experts {
                    let a = param(tape, &format!("expert{e}.a"))?;
                    let b = param(tape, &format!("expert{e}.b"))?;
                    experts.push((ExpertNodes { a, b }, 1.0));
                }
                let gate = GateNodes {
                    w1: param(tape, "gate.w1")?,
                    b1: param(tape, "gate.b1")?,
                    w2: param(tape, "gate.w2")?,
                    b2: param(tape, "gate.b2")?,
                };
                let mode = self.spec.kind.gate_mode().expect("moe kind");
                let rec = baselines::record_moe(tape, x, &experts, &gate, mode)?;
                router_terms.push(rec.router_loss);
                pass.choices.insert(layer.to_owned(), rec.choices);
                pass.gates.insert(layer.to_owned(), tape.value(rec.gates).clone());
                Ok(rec.delta)
            }
            AdapterKind::FullFt => {
                let d = param(tape, "delta")?;
                tape.matmul_t(x, d)
            }
        }
    }

    /// Records `W2 · relu(W1 · x)` with both layers adapted.
    pub fn record(&self, tape: &mut Tape, base: &BaseNet, x: &Matrix, frozen: Option<&Frozen>) -> Result<Pass> {
        let mut h = tape.constant(x.clone());
        let mut pass = Pass {
            output: h,
            spec: None,
            router: None,
            selections: BTreeMap::new(),
            choices: BTreeMap::new(),
            gates: BTreeMap::new(),
        };
        let mut spec_terms = Vec::new();
        let mut router_terms = Vec::new();
        for (i, layer) in LAYERS.iter().enumerate() {
            let w = tape.constant(base.weight(layer).expect("known layer").clone());
            let y = tape.matmul_t(h, w)?;
            let d = self.record_layer(tape, layer, h, frozen, &mut pass, &mut spec_terms, &mut router_terms)?;
            let y = tape.add(y, d)?;
            h = if i + 1 < LAYERS.len() { tape.relu(y) } else { y };
        }
        pass.output = h;
        pass.spec = mean_of(tape, &spec_terms)?;
        pass.router = mean_of(tape, &router_terms)?;
        Ok(pass)
    }

    /// Records `MSE + w_spec · spec + w_router · router`.
    pub fn record_loss(
        &self,
        tape: &mut Tape,
        base: &BaseNet,
        x: &Matrix,
        y: &Matrix,
        weights: LossWeights,
        frozen: Option<&Frozen>,
    ) -> Result<LossPass> {
        let pass = self.record(tape, base, x, frozen)?;
        let target = tape.constant(y.clone());
        let err = tape.sub(pass.output, target)?;
        let err2 = tape.square(err);
        let task = tape.mean(err2);
        let mut total = task;
        for (term, w) in [(pass.spec, weights.spec), (pass.router, weights.router)] {
            if let Some(t) = term {
                if w != 0.0 {
                    let scaled = tape.scale(t, w);
                    total = tape.add(total, scaled)?;
                }
            }
        }
        Ok(LossPass { total, task, pass })
    }

    /// Adapted-network outputs for the rows of `x`.
    pub fn predict(&self, base: &BaseNet, x: &Matrix) -> Result<(Matrix, Pass)> {
        let mut tape = Tape::new();
        let pass = self.record(&mut tape, base, x, None)?;
        Ok((tape.value(pass.output).clone(), pass))
    }

    /// Per-layer weight offset averaged over the rows of `x`. Input-dependent
    /// kinds average their masked scores or gate weights, which gives the
    /// matrix analysed as this run's "update".
    pub fn effective_updates(&self, base: &BaseNet, x: &Matrix) -> Result<BTreeMap<String, Matrix>> {
        let (_, pass) = self.predict(base, x)?;
        let mut out = BTreeMap::new();
        let n = x.rows().max(1) as f64;
        for layer in LAYERS {
            let p = |s: &str| self.p(&format!("{layer}.{s}"));
            let m = match self.spec.kind {
                AdapterKind::Lorasp => {
                    let sels = &pass.selections[layer];
                    let r = p("bank.u")?.cols();
                    let mut mean = vec![0.0; r];
                    for s in sels {
                        for (m, v) in mean.iter_mut().zip(s.masked_scores()) {
                            *m += v / n;
                        }
                    }
                    let bank = adapter::VectorBank {
                        u: p("bank.u")?.clone(),
                        v: p("bank.v")?.clone(),
                    };
                    bank.materialize(&mean)?
                }
                AdapterKind::Lora => p("lora.b")?.matmul(p("lora.a")?)?,
                AdapterKind::MoeHard | AdapterKind::MoeSoft => {
                    let gates = &pass.gates[layer];
                    let (d_out, d_in) = base.weight(layer).expect("known layer").shape();
                    let mut acc = Matrix::zeros(d_out, d_in);
                    for e in 0..self.spec.experts {
                        let w = (0..gates.rows()).map(|i| gates.get(i, e)).sum::<f64>() / n;
                        let d = p(&format!("expert{e}.b"))?.matmul(p(&format!("expert{e}.a"))?)?;
                        acc.add_assign_unchecked(&d.scale(w));
                    }
                    acc
                }
                AdapterKind::FullFt => p("delta")?.clone(),
            };
            out.insert(layer.to_owned(), m);
        }
        Ok(out)
    }
}

fn mean_of(tape: &mut Tape, terms: &[NodeId]) -> Result<Option<NodeId>> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &t in rest {
        acc = tape.add(acc, t)?;
    }
    Ok(Some(tape.scale(acc, 1.0 / terms.len() as f64)))
}
