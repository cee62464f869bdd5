//! Rank sweeps, the intrinsic-dimension estimate, and ablation grids.
//!
//! Each experiment is expressed as a list of independent [`Cell`]s plus an
//! assembly step, so callers can run cells in any order, in parallel, or
//! resume from stored results.

use serde::{Deserialize, Serialize};

use super::model::AdapterKind;
use super::tasks::TaskSuite;
use super::train::{train, RunMetrics, TrainConfig};
use crate::error::{Error, Result};

/// Val loss within this factor of full fine-tuning counts as a success.
pub const SUCCESS_FACTOR: f64 = 1.1;

/// Energy targets of the η ablation.
pub const ETA_GRID: [f64; 5] = [0.5, 0.7, 0.8, 0.9, 0.99];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Single,
    Multi,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Single => "single",
            Self::Multi => "multi",
        }
    }
}

/// One independent training run of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    /// Stable human-readable identifier, unique within the experiment.
    pub label: String,
    /// Indices into the suite's task list.
    pub tasks: Vec<usize>,
    pub config: TrainConfig,
}

impl Cell {
    pub fn run(&self, suite: &TaskSuite) -> Result<RunMetrics> {
        Ok(train(&suite.subset(&self.tasks)?, &self.config)?.metrics)
    }
}

/// Runs every cell in order.
pub fn run_cells(suite: &TaskSuite, cells: &[Cell]) -> Result<Vec<RunMetrics>> {
    cells.iter().map(|c| c.run(suite)).collect()
}

fn find<'a>(cells: &[Cell], runs: &'a [RunMetrics], label: &str) -> Result<&'a RunMetrics> {
    if cells.len() != runs.len() {
        return Err(Error::Config(format!(
            "{} results for {} cells",
            runs.len(),
            cells.len()
        )));
    }
    cells
        .iter()
        .position(|c| c.label == label)
        .map(|i| &runs[i])
        .ok_or_else(|| Error::Config(format!("no cell labelled {label}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub regime: Regime,
    pub task: String,
    pub planted_rank: usize,
    pub rank: usize,
    pub val_loss: f64,
    /// Full fine-tuning val loss in the same regime.
    pub full_ft_loss: f64,
    /// Val loss of the unadapted base on this task.
    pub zero_update_loss: f64,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankCurve {
    pub ranks: Vec<usize>,
    pub points: Vec<SweepPoint>,
}

impl RankCurve {
    /// `(rank, val loss)` pairs for one task and regime, by increasing rank.
    pub fn curve(&self, regime: Regime, task: &str) -> Vec<(usize, f64)> {
        let mut c: Vec<(usize, f64)> = self
            .points
            .iter()
            .filter(|p| p.regime == regime && p.task == task)
            .map(|p| (p.rank, p.val_loss))
            .collect();
        c.sort_by_key(|p| p.0);
        c
    }

    fn point(&self, regime: Regime, task: &str) -> Option<&SweepPoint> {
        self.points.iter().find(|p| p.regime == regime && p.task == task)
    }

    /// Intrinsic dimension per task on the single-task curves, with target
    /// `L*` = full fine-tuning loss and tolerance `ε = eps_fraction ·` the
    /// unadapted loss.
    pub fn intrinsic_dimensions(&self, eps_fraction: f64) -> Result<Vec<(String, usize, IntrinsicDimension)>> {
        let mut names: Vec<(String, usize)> = self
            .points
            .iter()
            .filter(|p| p.regime == Regime::Single)
            .map(|p| (p.task.clone(), p.planted_rank))
            .collect();
        names.dedup();
        names
            .into_iter()
            .map(|(task, planted)| {
                let p = self.point(Regime::Single, &task).expect("listed above");
                let id = intrinsic_dimension(
                    &self.curve(Regime::Single, &task),
                    p.full_ft_loss,
                    eps_fraction * p.zero_update_loss,
                )?;
                Ok((task, planted, id))
            })
            .collect()
    }

    /// Population variance of the per-task val losses at each rank.
    pub fn loss_variance(&self, regime: Regime) -> Vec<(usize, f64)> {
        self.ranks
            .iter()
            .map(|&r| {
                let v: Vec<f64> = self
                    .points
                    .iter()
                    .filter(|p| p.regime == regime && p.rank == r)
                    .map(|p| p.val_loss)
                    .collect();
                let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
                let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len().max(1) as f64;
                (r, var)
            })
            .collect()
    }
}

fn sweep_label(regime: Regime, task: Option<usize>, kind: &str) -> String {
    match task {
        Some(t) => format!("{}-task{t}-{kind}", regime.as_str()),
        None => format!("{}-{kind}", regime.as_str()),
    }
}

/// Cells of a rank sweep: per-task single runs and joint multi-task runs,
/// each with a full fine-tuning reference.
pub fn rank_sweep_cells(suite: &TaskSuite, ranks: &[usize], config: &TrainConfig) -> Result<Vec<Cell>> {
    if config.kind != AdapterKind::Lora {
        return Err(Error::Config(format!(
            "rank sweeps need kind lora, got {}",
            config.kind
        )));
    }
    if ranks.is_empty() {
        return Err(Error::Empty("rank grid"));
    }
    let mut groups: Vec<(Regime, Option<usize>, Vec<usize>)> = (0..suite.tasks.len())
        .map(|t| (Regime::Single, Some(t), vec![t]))
        .collect();
    groups.push((Regime::Multi, None, (0..suite.tasks.len()).collect()));

    let mut cells = Vec::new();
    for (regime, task, tasks) in groups {
        cells.push(Cell {
            label: sweep_label(regime, task, "full-ft"),
            tasks: tasks.clone(),
            config: TrainConfig {
                kind: AdapterKind::FullFt,
                ..config.clone()
            },
        });
        for &r in ranks {
            cells.push(Cell {
                label: sweep_label(regime, task, &format!("rank{r}")),
                tasks: tasks.clone(),
                config: TrainConfig {
                    rank: r,
                    ..config.clone()
                },
            });
        }
    }
    Ok(cells)
}

/// Base-only val loss per task.
fn zero_update_losses(suite: &TaskSuite) -> Result<Vec<f64>> {
    let none = Default::default();
    suite
        .tasks
        .iter()
        .map(|t| {
            let p = suite.base.forward_with(&t.val_x, &none)?;
            Ok(p.sub(&t.val_y)?.frobenius_norm_sq() / p.len() as f64)
        })
        .collect()
}

pub fn assemble_rank_sweep(
    suite: &TaskSuite,
    ranks: &[usize],
    cells: &[Cell],
    runs: &[RunMetrics],
) -> Result<RankCurve> {
    let zero = zero_update_losses(suite)?;
    let mut points = Vec::new();
    for regime in [Regime::Single, Regime::Multi] {
        for (t, task) in suite.tasks.iter().enumerate() {
            let group = match regime {
                Regime::Single => Some(t),
                Regime::Multi => None,
            };
            let full = find(cells, runs, &sweep_label(regime, group, "full-ft"))?;
            let full_ft_loss = full
                .task(&task.name)
                .ok_or(Error::Empty("task metrics"))?
                .final_val_loss;
            for &r in ranks {
                let run = find(cells, runs, &sweep_label(regime, group, &format!("rank{r}")))?;
                let val_loss = run.task(&task.name).ok_or(Error::Empty("task metrics"))?.final_val_loss;
                points.push(SweepPoint {
                    regime,
                    task: task.name.clone(),
                    planted_rank: task.planted_rank,
                    rank: r,
                    val_loss,
                    full_ft_loss,
                    zero_update_loss: zero[t],
                    success: val_loss <= SUCCESS_FACTOR * full_ft_loss,
                });
            }
        }
    }
    Ok(RankCurve {
        ranks: ranks.to_vec(),
        points,
    })
}

/// Trains every rank of `ranks` with fixed-rank LoRA, single- and multi-task.
pub fn rank_sweep(suite: &TaskSuite, ranks: &[usize], config: &TrainConfig) -> Result<RankCurve> {
    let cells = rank_sweep_cells(suite, ranks, config)?;
    let runs = run_cells(suite, &cells)?;
    assemble_rank_sweep(suite, ranks, &cells, &runs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "status", content = "rank")]
pub enum IntrinsicDimension {
    Rank(usize),
    /// No swept rank reached the target.
    Infeasible,
}

impl IntrinsicDimension {
    pub fn rank(self) -> Option<usize> {
        match self {
            Self::Rank(r) => Some(r),
            Self::Infeasible => None,
        }
    }
}

/// Smallest swept rank whose loss is at most `target + epsilon`.
pub fn intrinsic_dimension(curve: &[(usize, f64)], target: f64, epsilon: f64) -> Result<IntrinsicDimension> {
    if curve.is_empty() {
        return Err(Error::Empty("rank curve"));
    }
    let mut sorted = curve.to_vec();
    sorted.sort_by_key(|p| p.0);
    Ok(sorted
        .iter()
        .find(|(_, loss)| *loss <= target + epsilon)
        .map_or(IntrinsicDimension::Infeasible, |&(r, _)| IntrinsicDimension::Rank(r)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    SpectralLoss,
    EtaGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub eta: f64,
    pub spec_weight: f64,
    pub mean_active_rank: f64,
    /// `(task, val loss, mean active rank)` in suite order.
    pub per_task: Vec<(String, f64, f64)>,
    pub mean_val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

pub fn ablation_cells(suite: &TaskSuite, config: &TrainConfig, axis: AblationAxis) -> Result<Vec<Cell>> {
    if config.kind != AdapterKind::Lorasp {
        return Err(Error::Config(format!(
            "ablations need kind lorasp, got {}",
            config.kind
        )));
    }
    let tasks: Vec<usize> = (0..suite.tasks.len()).collect();
    let cell = |label: String, config: TrainConfig| Cell {
        label,
        tasks: tasks.clone(),
        config,
    };
    Ok(match axis {
        AblationAxis::SpectralLoss => vec![
            cell("with-spec".into(), config.clone()),
            cell(
                "without-spec".into(),
                TrainConfig {
                    spec_weight: 0.0,
                    ..config.clone()
                },
            ),
        ],
        AblationAxis::EtaGrid => ETA_GRID
            .iter()
            .map(|&eta| cell(format!("eta{eta}"), TrainConfig { eta, ..config.clone() }))
            .collect(),
    })
}

pub fn assemble_ablation(axis: AblationAxis, cells: &[Cell], runs: &[RunMetrics]) -> Result<AblationTable> {
    let rows = cells
        .iter()
        .map(|c| {
            let m = find(cells, runs, &c.label)?;
            Ok(AblationRow {
                label: c.label.clone(),
                eta: c.config.eta,
                spec_weight: c.config.spec_weight,
                mean_active_rank: m.active_rank,
                per_task: m
                    .tasks
                    .iter()
                    .map(|t| (t.name.clone(), t.final_val_loss, t.mean_active_rank.unwrap_or(f64::NAN)))
                    .collect(),
                mean_val_loss: m.mean_val_loss,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { axis, rows })
}

/// Runs LoRA-SP with and without the spectral loss, or over [`ETA_GRID`].
pub fn ablate(suite: &TaskSuite, config: &TrainConfig, axis: AblationAxis) -> Result<AblationTable> {
    let cells = ablation_cells(suite, config, axis)?;
    let runs = run_cells(suite, &cells)?;
    assemble_ablation(axis, &cells, &runs)
}
