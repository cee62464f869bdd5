//! Synthetic multi-task benchmark with planted update ranks.

pub mod model;
pub mod optim;
pub mod sweep;
pub mod tasks;
pub mod train;

pub use model::{AdapterKind, Frozen, LossPass, LossWeights, Model, ModelSpec, Pass};
pub use optim::Adam;
pub use sweep::{
    ablate, ablation_cells, assemble_ablation, assemble_rank_sweep, intrinsic_dimension, rank_sweep, rank_sweep_cells,
    run_cells, AblationAxis, AblationRow, AblationTable, Cell, IntrinsicDimension, RankCurve, Regime, SweepPoint,
    ETA_GRID, SUCCESS_FACTOR,
};
pub use tasks::{
    make_tasks, make_tasks_with, planted_spectrum, planted_update, BaseNet, SuiteConfig, Task, TaskSuite, LAYERS,
};
pub use train::{
    train, CurvePoint, LayerRankStats, Quantiles, RankLogRow, RunMetrics, TaskMetrics, TrainConfig, TrainOutcome,
    DIVERGENCE_LOSS,
};
