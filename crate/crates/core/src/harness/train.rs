use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::model::{AdapterKind, LossWeights, Model, ModelSpec};
use super::optim::Adam;
use super::tasks::{TaskSuite, LAYERS};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, StreamRng, Tape};

/// Loss above which a run is declared diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub kind: AdapterKind,
    /// Fixed LoRA rank.
    pub rank: usize,
    /// LoRA-SP bank width.
    pub r_init: usize,
    pub hidden_dim: Option<usize>,
    pub eta: f64,
    pub experts: usize,
    pub expert_rank: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub spec_weight: f64,
    pub router_weight: f64,
    /// Validation and rank logging period in steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: AdapterKind::Lorasp,
            rank: 8,
            r_init: 128,
            hidden_dim: None,
            eta: 0.9,
            experts: 4,
            expert_rank: 32,
            lr: 1e-3,
            steps: 1000,
            batch_size: 64,
            seed: 0,
            spec_weight: 1e-2,
            router_weight: 1e-3,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if self.steps == 0 {
            return bad("steps must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive and finite");
        }
        if !(self.spec_weight >= 0.0 && self.spec_weight.is_finite()) {
            return bad("spec_weight must be nonnegative");
        }
        if !(self.router_weight >= 0.0 && self.router_weight.is_finite()) {
            return bad("router_weight must be nonnegative");
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad("eta must lie in (0, 1]");
        }
        let positive = match self.kind {
            AdapterKind::Lorasp => self.r_init > 0,
            AdapterKind::Lora => self.rank > 0,
            AdapterKind::MoeHard | AdapterKind::MoeSoft => self.experts > 0 && self.expert_rank > 0,
            AdapterKind::FullFt => true,
        };
        if !positive {
            return bad("adapter width must be positive");
        }
        if self.hidden_dim == Some(0) {
            return bad("hidden_dim must be positive");
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            kind: self.kind,
            rank: self.rank,
            r_init: self.r_init,
            hidden_dim: self.hidden_dim,
            eta: self.eta,
            experts: self.experts,
            expert_rank: self.expert_rank,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            spec: self.spec_weight,
            router: self.router_weight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub name: String,
    pub planted_rank: usize,
    pub train_curve: Vec<CurvePoint>,
    pub val_curve: Vec<CurvePoint>,
    pub final_val_loss: f64,
    /// Mean active rank over both layers on this task's validation inputs.
    pub mean_active_rank: Option<f64>,
}

/// Five-number summary with linearly interpolated quartiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub min: f64,
    pub lq: f64,
    pub median: f64,
    pub uq: f64,
    pub max: f64,
}

impl Quantiles {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let at = |q: f64| {
            let pos = q * (v.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Some(Self {
            min: v[0],
            lq: at(0.25),
            median: at(0.5),
            uq: at(0.75),
            max: v[v.len() - 1],
        })
    }
}

/// Active-rank distribution of one layer over all validation inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRankStats {
    pub layer: String,
    pub mean: f64,
    pub quantiles: Quantiles,
    /// Mean active rank per task, in suite order.
    pub per_task: Vec<f64>,
}

/// One logged selection: a training-batch input at a logging step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankLogRow {
    pub step: usize,
    pub layer: String,
    pub task: String,
    pub input: usize,
    pub k: usize,
    pub energy_k: f64,
    pub spec_loss: f64,
}

/// Results of one run. Equality ignores `wall_time_s`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetrics {
    pub config: TrainConfig,
    pub tasks: Vec<TaskMetrics>,
    /// Populated for LoRA-SP runs only.
    pub layers: Vec<LayerRankStats>,
    pub trainable_params: usize,
    pub base_params: usize,
    pub trainable_fraction_pct: f64,
    /// Measured mean k for LoRA-SP, nominal rank for fixed-capacity kinds.
    pub active_rank: f64,
    pub mean_val_loss: f64,
    #[serde(skip)]
    pub rank_log: Vec<RankLogRow>,
    pub wall_time_s: f64,
}

impl PartialEq for RunMetrics {
    fn eq(&self, o: &Self) -> bool {
        self.config == o.config
            && self.tasks == o.tasks
            && self.layers == o.layers
            && self.trainable_params == o.trainable_params
            && self.base_params == o.base_params
            && self.trainable_fraction_pct == o.trainable_fraction_pct
            && self.active_rank == o.active_rank
            && self.mean_val_loss == o.mean_val_loss
            && self.rank_log == o.rank_log
    }
}

impl RunMetrics {
    pub fn task(&self, name: &str) -> Option<&TaskMetrics> {
        self.tasks.iter().find(|t| t.name == name)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: RunMetrics,
    pub model: Model,
}

fn mse(pred: &Matrix, target: &Matrix, rows: impl Iterator<Item = usize>) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in rows {
        for (p, t) in pred.row(i).iter().zip(target.row(i)) {
            sum += (p - t) * (p - t);
        }
        count += pred.cols();
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

fn snapshot(model: &Model) -> String {
    model
        .params
        .iter()
        .map(|(n, m)| {
            let norm = m.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            format!("{n}: |.|_F={norm:.3e}")
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Per-task epoch iterator over shuffled training rows.
struct Sampler {
    orders: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    rng: StreamRng,
}

impl Sampler {
    fn new(suite: &TaskSuite, seed: u64) -> Self {
        let mut rng = StreamRng::new(seed, "train.sampler");
        let orders = suite
            .tasks
            .iter()
            .map(|t| {
                let mut o: Vec<usize> = (0..t.train_x.rows()).collect();
                rng.shuffle(&mut o);
                o
            })
            .collect();
        Self {
            cursors: vec![0; suite.tasks.len()],
            orders,
            rng,
        }
    }

    fn next(&mut self, task: usize) -> usize {
        if self.cursors[task] == self.orders[task].len() {
            self.rng.shuffle(&mut self.orders[task]);
            self.cursors[task] = 0;
        }
        let i = self.orders[task][self.cursors[task]];
        self.cursors[task] += 1;
        i
    }
}

/// Trains one adapter on all tasks of `suite`.
///
/// Batch row `i` at step `s` comes from task `(s·B + i) mod T`, so every
/// batch interleaves the tasks uniformly. The base is never modified.
pub fn train(suite: &TaskSuite, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if suite.tasks.is_empty() {
        return Err(Error::Empty("task suite"));
    }
    let started = Instant::now();
    let base = &suite.base;
    let mut model = Model::init(&config.model_spec(), base, config.seed)?;
    let mut adam = Adam::new(config.lr);
    let mut sampler = Sampler::new(suite, config.seed);
    let weights = config.weights();
    let t_count = suite.tasks.len();
    let d_in = base.w1.cols();
    let d_out = base.w2.rows();
    let b = config.batch_size;

    let mut train_curves = vec![Vec::new(); t_count];
    let mut val_curves = vec![Vec::new(); t_count];
    let mut rank_log = Vec::new();

    for step in 0..config.steps {
        let mut x = Matrix::zeros(b, d_in);
        let mut y = Matrix::zeros(b, d_out);
        let mut row_task = Vec::with_capacity(b);
        for i in 0..b {
            let t = (step * b + i) % t_count;
            let j = sampler.next(t);
            x.row_mut(i).copy_from_slice(suite.tasks[t].train_x.row(j));
            y.row_mut(i).copy_from_slice(suite.tasks[t].train_y.row(j));
            row_task.push(t);
        }
        let mut tape = Tape::new();
        let lp = model.record_loss(&mut tape, base, &x, &y, weights, None)?;
        let total = tape.value(lp.total).get(0, 0);
        if !total.is_finite() || total > DIVERGENCE_LOSS {
            return Err(Error::Diverged {
                step,
                loss: total,
                detail: snapshot(&model),
            });
        }

        let logging = step % config.log_every == 0 || step + 1 == config.steps;
        if logging {
            let pred = tape.value(lp.pass.output);
            for (t, curve) in train_curves.iter_mut().enumerate() {
                let rows = (0..b).filter(|&i| row_task[i] == t);
                curve.push(CurvePoint {
                    step,
                    loss: mse(pred, &y, rows),
                });
            }
            for layer in LAYERS {
                if let Some(sels) = lp.pass.selections.get(layer) {
                    for (i, s) in sels.iter().enumerate() {
                        rank_log.push(RankLogRow {
                            step,
                            layer: layer.to_owned(),
                            task: suite.tasks[row_task[i]].name.clone(),
                            input: i,
                            k: s.k,
                            energy_k: s.energy_k,
                            spec_loss: crate::adapter::spectral_loss(s),
                        });
                    }
                }
            }
        }

        let grads = tape.backward(lp.total)?;
        adam.step(&mut model.params, &grads);

        if logging {
            for (t, task) in suite.tasks.iter().enumerate() {
                let (pred, _) = model.predict(base, &task.val_x)?;
                let loss = mse(&pred, &task.val_y, 0..pred.rows());
                val_curves[t].push(CurvePoint { step: step + 1, loss });
            }
        }
    }

    let spec = config.model_spec();
    let mut tasks = Vec::with_capacity(t_count);
    let mut per_layer_k: Vec<Vec<f64>> = vec![Vec::new(); LAYERS.len()];
    let mut per_layer_task: Vec<Vec<f64>> = vec![Vec::new(); LAYERS.len()];
    for (t, task) in suite.tasks.iter().enumerate() {
        let (pred, pass) = model.predict(base, &task.val_x)?;
        let final_val_loss = mse(&pred, &task.val_y, 0..pred.rows());
        if !final_val_loss.is_finite() {
            return Err(Error::Diverged {
                step: config.steps,
                loss: final_val_loss,
                detail: snapshot(&model),
            });
        }
        let mean_active_rank = if spec.kind == AdapterKind::Lorasp {
            let mut all = 0.0;
            for (l, layer) in LAYERS.iter().enumerate() {
                let ks: Vec<f64> = pass.selections[*layer].iter().map(|s| s.k as f64).collect();
                per_layer_task[l].push(ks.iter().sum::<f64>() / ks.len() as f64);
                all += ks.iter().sum::<f64>() / ks.len() as f64;
                per_layer_k[l].extend(ks);
            }
            Some(all / LAYERS.len() as f64)
        } else {
            None
        };
        tasks.push(TaskMetrics {
            name: task.name.clone(),
            planted_rank: task.planted_rank,
            train_curve: std::mem::take(&mut train_curves[t]),
            val_curve: std::mem::take(&mut val_curves[t]),
            final_val_loss,
            mean_active_rank,
        });
    }

    let layers: Vec<LayerRankStats> = if spec.kind == AdapterKind::Lorasp {
        LAYERS
            .iter()
            .enumerate()
            .map(|(l, layer)| LayerRankStats {
                layer: (*layer).to_owned(),
                mean: per_layer_k[l].iter().sum::<f64>() / per_layer_k[l].len() as f64,
                quantiles: Quantiles::of(&per_layer_k[l]).expect("nonempty validation set"),
                per_task: per_layer_task[l].clone(),
            })
            .collect()
    } else {
        Vec::new()
    };

    let dims = suite.layer_dims();
    let active_rank = match spec.kind {
        AdapterKind::Lorasp => layers.iter().map(|l| l.mean).sum::<f64>() / layers.len() as f64,
        _ => {
            dims.iter()
                .map(|&(_, o, i)| spec.nominal_rank(o, i).unwrap_or(0) as f64)
                .sum::<f64>()
                / dims.len() as f64
        }
    };
    let trainable_params = model.num_params();
    let base_params = base.num_params();
    let mean_val_loss = tasks.iter().map(|t| t.final_val_loss).sum::<f64>() / t_count as f64;

    Ok(TrainOutcome {
        metrics: RunMetrics {
            config: config.clone(),
            tasks,
            layers,
            trainable_params,
            base_params,
            trainable_fraction_pct: 100.0 * trainable_params as f64 / base_params as f64,
            active_rank,
            mean_val_loss,
            rank_log,
            wall_time_s: started.elapsed().as_secs_f64(),
        },
        model,
    })
}
