//! Synthetic regression tasks whose teacher updates have a known rank.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, StreamRng};

/// Names of the two adapted layers, in forward order.
pub const LAYERS: [&str; 2] = ["layer1", "layer2"];

/// Shape and sampling parameters of a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub d_in: usize,
    pub hidden: usize,
    pub d_out: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    /// Largest singular value of each planted update.
    pub planted_scale: f64,
    /// Ratio of the smallest to the largest planted singular value; values
    /// fall linearly in between. `1.0` gives a flat spectrum.
    pub planted_tail: f64,
    /// Magnitude of the one-hot task code written into the last input dims.
    pub code_scale: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            d_in: 64,
            hidden: 64,
            d_out: 32,
            train_samples: 1000,
            val_samples: 200,
            planted_scale: 1.0,
            planted_tail: 1.0,
            code_scale: 1.0,
        }
    }
}

/// Frozen two-layer network `y = W2 · relu(W1 · x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseNet {
    pub w1: Matrix,
    pub w2: Matrix,
}

impl BaseNet {
    pub fn weight(&self, layer: &str) -> Option<&Matrix> {
        match layer {
            "layer1" => Some(&self.w1),
            "layer2" => Some(&self.w2),
            _ => None,
        }
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.w2.len()
    }

    /// Batch forward with optional per-layer weight offsets.
    pub fn forward_with(&self, x: &Matrix, updates: &BTreeMap<String, Matrix>) -> Result<Matrix> {
        let w = |name: &str, base: &Matrix| match updates.get(name) {
            Some(d) => base.add(d),
            None => Ok(base.clone()),
        };
        let h = x.matmul_t(&w("layer1", &self.w1)?)?.map(|v| v.max(0.0));
        h.matmul_t(&w("layer2", &self.w2)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub name: String,
    pub planted_rank: usize,
    /// Teacher offset per adapted layer; exactly rank `planted_rank`.
    pub updates: BTreeMap<String, Matrix>,
    pub seed: u64,
    pub train_x: Matrix,
    pub train_y: Matrix,
    pub val_x: Matrix,
    pub val_y: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSuite {
    pub config: SuiteConfig,
    pub base: BaseNet,
    pub tasks: Vec<Task>,
}

impl TaskSuite {
    /// Dimensions of each adapted layer as `(d_out, d_in)`.
    pub fn layer_dims(&self) -> Vec<(&'static str, usize, usize)> {
        LAYERS
            .iter()
            .map(|&l| {
                let w = self.base.weight(l).expect("known layer");
                (l, w.rows(), w.cols())
            })
            .collect()
    }

    /// A suite holding only the listed tasks, sharing this base.
    pub fn subset(&self, indices: &[usize]) -> Result<TaskSuite> {
        let tasks = indices
            .iter()
            .map(|&i| {
                self.tasks
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("task index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        if tasks.is_empty() {
            return Err(Error::Empty("task subset"));
        }
        Ok(TaskSuite {
            config: self.config.clone(),
            base: self.base.clone(),
            tasks,
        })
    }
}

/// Singular values `scale` down to `tail · scale`, linearly spaced.
pub fn planted_spectrum(rank: usize, scale: f64, tail: f64) -> Vec<f64> {
    (0..rank)
        .map(|i| {
            let f = if rank > 1 { i as f64 / (rank - 1) as f64 } else { 0.0 };
            scale * (1.0 - (1.0 - tail) * f)
        })
        .collect()
}

/// Rank-`sigma.len()` matrix `Σ σᵢ aᵢ bᵢᵀ` with orthonormal `aᵢ` and `bᵢ`.
pub fn planted_update(rows: usize, cols: usize, sigma: &[f64], rng: &mut StreamRng) -> Result<Matrix> {
    let rank = sigma.len();
    if rank > rows.min(cols) {
        return Err(Error::RankOutOfRange {
            k: rank,
            max: rows.min(cols),
        });
    }
    let a = orthonormal_columns(rows, rank, rng);
    let b = orthonormal_columns(cols, rank, rng);
    let a = Matrix::from_fn(rows, rank, |i, j| a.get(i, j) * sigma[j]);
    Ok(a.matmul_t_unchecked(&b))
}

/// `n x k` matrix with orthonormal columns from Gram-Schmidt on Gaussians.
fn orthonormal_columns(n: usize, k: usize, rng: &mut StreamRng) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut v = rng.gaussian_vec(n, 1.0);
        for _ in 0..2 {
            for c in &cols {
                let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    Matrix::from_fn(n, k, |i, j| cols[j][i])
}

/// Gaussian inputs with the task code in the last `codes` dims.
fn sample_inputs(n: usize, d: usize, task: usize, codes: usize, code_scale: f64, rng: &mut StreamRng) -> Matrix {
    let mut x = rng.gaussian_matrix(n, d, 1.0);
    for i in 0..n {
        let row = x.row_mut(i);
        for (c, v) in row[d - codes..].iter_mut().enumerate() {
            *v = if c == task { code_scale } else { 0.0 };
        }
    }
    x
}

pub fn make_tasks(seed: u64, planted_ranks: &[usize]) -> Result<TaskSuite> {
    make_tasks_with(seed, planted_ranks, &SuiteConfig::default())
}

/// Builds the frozen base and one teacher per planted rank.
///
/// Inputs are standard Gaussian except for the last `planted_ranks.len()`
/// coordinates, which carry a one-hot task code so that input-conditioned
/// adapters can tell the tasks apart.
pub fn make_tasks_with(seed: u64, planted_ranks: &[usize], config: &SuiteConfig) -> Result<TaskSuite> {
    let (d_in, h, d_out) = (config.d_in, config.hidden, config.d_out);
    if planted_ranks.is_empty() {
        return Err(Error::Empty("planted rank list"));
    }
    if d_in == 0 || h == 0 || d_out == 0 || planted_ranks.len() >= d_in {
        return Err(Error::Config(format!(
            "suite dims {d_in}->{h}->{d_out} cannot hold {} task codes",
            planted_ranks.len()
        )));
    }
    if !(config.planted_scale > 0.0) || !(config.planted_tail > 0.0 && config.planted_tail <= 1.0) {
        return Err(Error::Config(
            "planted_scale must be positive and planted_tail in (0, 1]".into(),
        ));
    }
    if config.train_samples == 0 || config.val_samples == 0 {
        return Err(Error::Config("sample counts must be positive".into()));
    }
    let max = h.min(d_in).min(d_out);
    if let Some(&r) = planted_ranks.iter().find(|&&r| r > max) {
        return Err(Error::RankOutOfRange { k: r, max });
    }

    let root = StreamRng::new(seed, "suite");
    let base = BaseNet {
        w1: root
            .child("base.w1")
            .gaussian_matrix(h, d_in, (2.0 / d_in as f64).sqrt()),
        w2: root.child("base.w2").gaussian_matrix(d_out, h, (1.0 / h as f64).sqrt()),
    };
    let codes = planted_ranks.len();
    let mut tasks = Vec::with_capacity(codes);
    for (t, &rank) in planted_ranks.iter().enumerate() {
        let name = format!("task{t}");
        let stream = root.child(&name);
        let sigma = planted_spectrum(rank, config.planted_scale, config.planted_tail);
        let mut updates = BTreeMap::new();
        for (layer, w) in [("layer1", &base.w1), ("layer2", &base.w2)] {
            let mut rng = stream.child(layer);
            let d = planted_update(w.rows(), w.cols(), &sigma, &mut rng)?;
            updates.insert(layer.to_owned(), d);
        }
        let mut data = stream.child("data");
        let train_x = sample_inputs(config.train_samples, d_in, t, codes, config.code_scale, &mut data);
        let val_x = sample_inputs(config.val_samples, d_in, t, codes, config.code_scale, &mut data);
        let train_y = base.forward_with(&train_x, &updates)?;
        let val_y = base.forward_with(&val_x, &updates)?;
        tasks.push(Task {
            name,
            planted_rank: rank,
            updates,
            seed,
            train_x,
            train_y,
            val_x,
            val_y,
        });
    }
    Ok(TaskSuite {
        config: config.clone(),
        base,
        tasks,
    })
}
