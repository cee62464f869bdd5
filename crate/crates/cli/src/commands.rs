//! The five subcommands. Each returns the directory it wrote.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use lorasp::harness::{
    ablation_cells, assemble_ablation, assemble_rank_sweep, rank_sweep_cells, AdapterKind, IntrinsicDimension, Model,
    ModelSpec, Regime, RunMetrics, TaskSuite, TrainOutcome, SUCCESS_FACTOR,
};
use lorasp::linalg::io::Bundle;
use lorasp::spectral::layer_rank_report;
use lorasp::Matrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::rows::{
    write_csv, write_wide_ranks, AblationCsvRow, CurveRow, IntrinsicDimensionRow, QuantileRow, ReportRow, VarianceRow,
};
use crate::runs::{finished, read_json, run_cells, write_atomic, write_json, Context, CONFIG_FILE, METRICS_FILE};
use crate::CliError;

pub struct RunOptions {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub resume: bool,
    pub jobs: usize,
}

/// Checkpoint header metadata.
#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: ExperimentConfig,
    model: ModelSpec,
}

/// Loads the config and builds the suite before anything touches the disk,
/// so bad input never leaves a directory behind.
fn resolve(opts: &RunOptions) -> Result<(ExperimentConfig, TaskSuite), CliError> {
    let mut cfg = ExperimentConfig::load(opts.config.as_deref())?;
    if let Some(seed) = opts.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    let suite = cfg.suite()?;
    Ok((cfg, suite))
}

/// Hidden layer vs output layer of the two-layer network.
pub fn module_group(layer: &str) -> &'static str {
    match layer {
        "layer1" => "hidden",
        "layer2" => "output",
        _ => "other",
    }
}

fn quantile_rows(m: &RunMetrics) -> Vec<QuantileRow> {
    m.layers
        .iter()
        .map(|l| QuantileRow {
            layer: l.layer.clone(),
            module_group: module_group(&l.layer).into(),
            min: l.quantiles.min,
            lq: l.quantiles.lq,
            median: l.quantiles.median,
            uq: l.quantiles.uq,
            max: l.quantiles.max,
        })
        .collect()
}

/// Effective updates on all validation inputs (`<layer>`) and on each task's
/// own inputs (`<task>/<layer>`).
fn updates_for(model: &Model, suite: &TaskSuite) -> Result<BTreeMap<String, Matrix>, CliError> {
    let all: Vec<Vec<f64>> = suite
        .tasks
        .iter()
        .flat_map(|t| (0..t.val_x.rows()).map(|i| t.val_x.row(i).to_vec()))
        .collect();
    let mut out = model.effective_updates(&suite.base, &Matrix::from_rows(&all)?)?;
    for t in &suite.tasks {
        for (layer, m) in model.effective_updates(&suite.base, &t.val_x)? {
            out.insert(format!("{}/{layer}", t.name), m);
        }
    }
    Ok(out)
}

fn summary(m: &RunMetrics) -> String {
    let mut s = String::new();
    let c = &m.config;
    let _ = writeln!(s, "kind              {}", c.kind);
    let _ = writeln!(
        s,
        "trainable params  {} ({:.3}% of {} base)",
        m.trainable_params, m.trainable_fraction_pct, m.base_params
    );
    let _ = writeln!(s, "active rank       {:.3}", m.active_rank);
    let _ = writeln!(s, "mean val loss     {:.6e}", m.mean_val_loss);
    let _ = writeln!(s, "wall time         {:.1}s", m.wall_time_s);
    if !m.layers.is_empty() {
        let _ = writeln!(s, "\nlayer    mean    min     lq      median  uq      max");
        for l in &m.layers {
            let q = l.quantiles;
            let _ = writeln!(
                s,
                "{:<8} {:<7.3} {:<7.2} {:<7.2} {:<7.2} {:<7.2} {:.2}",
                l.layer, l.mean, q.min, q.lq, q.median, q.uq, q.max
            );
        }
    }
    let _ = writeln!(s, "\ntask     planted  val loss      active rank");
    for t in &m.tasks {
        let k = t.mean_active_rank.map_or("-".to_owned(), |k| format!("{k:.3}"));
        let _ = writeln!(s, "{:<8} {:<8} {:<13.6e} {k}", t.name, t.planted_rank, t.final_val_loss);
    }
    s
}

fn write_train_outputs(
    dir: &Path,
    cfg: &ExperimentConfig,
    suite: &TaskSuite,
    out: &TrainOutcome,
) -> Result<(), CliError> {
    let m = &out.metrics;
    write_atomic(&dir.join("summary.txt"), summary(m).as_bytes())?;
    let mut curves = Vec::new();
    for t in &m.tasks {
        for (split, pts) in [("train", &t.train_curve), ("val", &t.val_curve)] {
            curves.extend(pts.iter().map(|p| CurveRow {
                task: t.name.clone(),
                split: split.into(),
                step: p.step,
                loss: p.loss,
            }));
        }
    }
    write_csv(&dir.join("curves.csv"), &curves)?;
    write_csv(&dir.join("rank_log.csv"), &m.rank_log)?;
    write_csv(&dir.join("rank_quantiles.csv"), &quantile_rows(m))?;

    let meta = CheckpointMeta {
        config: cfg.clone(),
        model: out.model.spec.clone(),
    };
    let mut ckpt = Bundle::new("checkpoint", serde_json::to_value(&meta).expect("serialisable"));
    ckpt.tensors = out.model.params.clone();
    write_atomic(&dir.join("checkpoint.lspb"), &ckpt.encode())?;
    let mut updates = Bundle::new("updates", serde_json::json!({ "config": cfg }));
    updates.tensors = updates_for(&out.model, suite)?;
    write_atomic(&dir.join("updates.lspb"), &updates.encode())?;
    Ok(())
}

pub fn train(ctx: &Context, opts: &RunOptions) -> Result<PathBuf, CliError> {
    let (cfg, suite) = resolve(opts)?;
    let dir = ctx.run_dir(&cfg.name, &cfg.hash("train"))?;
    if opts.resume && finished(&dir, &cfg).is_some() {
        ctx.log(format!("{} already finished", dir.display()));
        return Ok(dir);
    }
    let _ = fs::remove_file(dir.join(METRICS_FILE));
    write_json(&dir.join(CONFIG_FILE), &cfg)?;
    ctx.log(format!("training {} for {} steps", cfg.train.kind, cfg.train.steps));
    let out = lorasp::harness::train(&suite, &cfg.train).map_err(|e| {
        let _ = fs::write(dir.join("error.txt"), format!("{e}\n"));
        CliError::from(e)
    })?;
    write_train_outputs(&dir, &cfg, &suite, &out)?;
    write_json(&dir.join(METRICS_FILE), &out.metrics)?;
    ctx.log(summary(&out.metrics));
    Ok(dir)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SweepSummary {
    pub intrinsic_dimension: Vec<IntrinsicDimensionRow>,
    pub variance: Vec<VarianceRow>,
}

pub fn sweep(ctx: &Context, opts: &RunOptions) -> Result<PathBuf, CliError> {
    let (cfg, suite) = resolve(opts)?;
    let cells = rank_sweep_cells(&suite, &cfg.ranks, &cfg.train)?;
    let dir = ctx.run_dir(&cfg.name, &cfg.hash("sweep"))?;
    write_json(&dir.join(CONFIG_FILE), &cfg)?;
    let runs = run_cells(ctx, &dir, &suite, &cells, opts.resume, opts.jobs)?;
    let curve = assemble_rank_sweep(&suite, &cfg.ranks, &cells, &runs)?;
    write_csv(&dir.join("rank_curve.csv"), &curve.points)?;

    let intrinsic_dimension: Vec<IntrinsicDimensionRow> = curve
        .intrinsic_dimensions(cfg.eps_fraction)?
        .into_iter()
        .map(|(task, planted_rank, id)| IntrinsicDimensionRow {
            task,
            planted_rank,
            status: match id {
                IntrinsicDimension::Rank(_) => "rank".into(),
                IntrinsicDimension::Infeasible => "infeasible".into(),
            },
            rank: id.rank(),
        })
        .collect();
    let variance: Vec<VarianceRow> = [Regime::Single, Regime::Multi]
        .into_iter()
        .flat_map(|regime| {
            curve
                .loss_variance(regime)
                .into_iter()
                .map(move |(rank, variance)| VarianceRow {
                    regime: regime.as_str().into(),
                    rank,
                    variance,
                })
        })
        .collect();
    write_csv(&dir.join("intrinsic_dimension.csv"), &intrinsic_dimension)?;
    write_csv(&dir.join("variance.csv"), &variance)?;
    for row in &intrinsic_dimension {
        let id = row.rank.map_or("infeasible".to_owned(), |r| r.to_string());
        ctx.log(format!(
            "{}: planted rank {}, intrinsic dimension {id}",
            row.task, row.planted_rank
        ));
    }
    write_json(
        &dir.join("summary.json"),
        &SweepSummary {
            intrinsic_dimension,
            variance,
        },
    )?;
    Ok(dir)
}

pub fn ablate(ctx: &Context, opts: &RunOptions) -> Result<PathBuf, CliError> {
    let (cfg, suite) = resolve(opts)?;
    let cells = ablation_cells(&suite, &cfg.train, cfg.axis)?;
    let dir = ctx.run_dir(&cfg.name, &cfg.hash("ablate"))?;
    write_json(&dir.join(CONFIG_FILE), &cfg)?;
    let runs = run_cells(ctx, &dir, &suite, &cells, opts.resume, opts.jobs)?;
    let table = assemble_ablation(cfg.axis, &cells, &runs)?;
    let rows: Vec<AblationCsvRow> = table
        .rows
        .iter()
        .flat_map(|r| {
            r.per_task.iter().map(|(task, loss, k)| AblationCsvRow {
                label: r.label.clone(),
                eta: r.eta,
                spec_weight: r.spec_weight,
                task: task.clone(),
                val_loss: *loss,
                mean_active_rank: (!k.is_nan()).then_some(*k),
            })
        })
        .collect();
    write_csv(&dir.join("ablation.csv"), &rows)?;
    write_json(&dir.join("ablation.json"), &table)?;
    for r in &table.rows {
        ctx.log(format!(
            "{:<14} active rank {:.3}  mean val loss {:.4e}",
            r.label, r.mean_active_rank, r.mean_val_loss
        ));
    }
    Ok(dir)
}

fn sha_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(&h.finalize()[..8])
}

pub fn analyze(ctx: &Context, input: &Path, etas: &[f64]) -> Result<PathBuf, CliError> {
    if etas.is_empty() || etas.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
        return Err(CliError::Usage(format!(
            "--etas: every target must lie in (0, 1], got {etas:?}"
        )));
    }
    let bundle = Bundle::load(input)?;
    let updates = match bundle.kind.as_str() {
        "updates" => bundle.tensors,
        "checkpoint" => {
            let meta: CheckpointMeta = serde_json::from_value(bundle.meta)
                .map_err(|e| CliError::Usage(format!("{}: checkpoint header: {e}", input.display())))?;
            let suite = meta.config.suite()?;
            let model = Model {
                spec: meta.model,
                params: bundle.tensors,
            };
            updates_for(&model, &suite)?
        }
        other => {
            return Err(CliError::Usage(format!(
                "{}: bundle kind {other:?} is neither checkpoint nor updates",
                input.display()
            )))
        }
    };
    let report = layer_rank_report(&updates, etas)?;
    let bytes = fs::read(input)?;
    let eta_json = serde_json::to_vec(etas).expect("serialisable");
    let dir = ctx.run_dir("analyze", &sha_hex(&[&bytes, &eta_json]))?;
    write_json(&dir.join("spectral_report.json"), &report)?;
    write_atomic(&dir.join("spectral_report.csv"), report.to_csv().as_bytes())?;
    let wide: Vec<(String, usize, Vec<usize>)> = report
        .layers
        .iter()
        .map(|l| (l.layer.clone(), l.full_rank, l.ranks.iter().map(|r| r.k).collect()))
        .collect();
    write_wide_ranks(&dir.join("rank_at_eta.csv"), etas, &wide)?;
    for (layer, full, ks) in &wide {
        ctx.log(format!("{layer:<16} full rank {full:<4} k {ks:?}"));
    }
    Ok(dir)
}

struct RunEntry {
    id: String,
    config: Option<ExperimentConfig>,
    metrics: Option<RunMetrics>,
}

impl RunEntry {
    fn same_suite(&self, other: &Self) -> bool {
        match (&self.config, &other.config) {
            (Some(a), Some(b)) => {
                a.suite_seed == b.suite_seed && a.planted_ranks == b.planted_ranks && a.suite == b.suite
            }
            (None, None) => true,
            _ => false,
        }
    }
}

pub fn report(ctx: &Context, dirs: &[PathBuf]) -> Result<PathBuf, CliError> {
    let mut entries: Vec<RunEntry> = dirs
        .iter()
        .map(|d| RunEntry {
            id: d.display().to_string(),
            config: read_json(&d.join(CONFIG_FILE)).ok(),
            metrics: read_json(&d.join(METRICS_FILE)).ok(),
        })
        .collect();
    entries.sort_by(|a, b| a.id.cmp(&b.id));

    let mut rows = Vec::new();
    for e in &entries {
        let Some(m) = &e.metrics else {
            rows.push(ReportRow {
                strategy: e.config.as_ref().map_or("unknown".into(), |c| c.train.kind.to_string()),
                task: String::new(),
                run: e.id.clone(),
                planted_rank: None,
                trainable_pct: None,
                active_rank: None,
                final_val_loss: None,
                success: None,
                status: "incomplete".into(),
            });
            continue;
        };
        for t in &m.tasks {
            let reference = entries
                .iter()
                .filter(|r| r.same_suite(e))
                .filter_map(|r| r.metrics.as_ref())
                .filter(|r| r.config.kind == AdapterKind::FullFt)
                .find_map(|r| r.task(&t.name))
                .map(|r| r.final_val_loss);
            rows.push(ReportRow {
                strategy: m.config.kind.to_string(),
                task: t.name.clone(),
                run: e.id.clone(),
                planted_rank: Some(t.planted_rank),
                trainable_pct: Some(m.trainable_fraction_pct),
                active_rank: Some(t.mean_active_rank.unwrap_or(m.active_rank)),
                final_val_loss: Some(t.final_val_loss),
                success: reference.map(|l| t.final_val_loss <= SUCCESS_FACTOR * l),
                status: "complete".into(),
            });
        }
    }
    rows.sort_by(|a, b| (&a.strategy, &a.task, &a.run).cmp(&(&b.strategy, &b.task, &b.run)));

    let ids: Vec<&[u8]> = entries.iter().map(|e| e.id.as_bytes()).collect();
    let dir = ctx.run_dir("report", &sha_hex(&ids))?;
    write_csv(&dir.join("report.csv"), &rows)?;
    let qdir = dir.join("quantiles");
    fs::create_dir_all(&qdir)?;
    for e in &entries {
        if let Some(m) = e.metrics.as_ref().filter(|m| !m.layers.is_empty()) {
            let p = Path::new(&e.id);
            let name: Vec<String> = p
                .components()
                .rev()
                .take(2)
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect();
            let file = format!("{}.csv", name.into_iter().rev().collect::<Vec<_>>().join("-"));
            write_csv(&qdir.join(file), &quantile_rows(m))?;
        }
    }
    let incomplete = rows.iter().filter(|r| r.status != "complete").count();
    ctx.log(format!("{} rows, {incomplete} incomplete", rows.len()));
    Ok(dir)
}
