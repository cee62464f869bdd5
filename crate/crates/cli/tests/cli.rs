use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lorasp::harness::{make_tasks_with, planted_spectrum, planted_update, RankLogRow, RunMetrics, SweepPoint};
use lorasp::linalg::io::Bundle;
use lorasp::StreamRng;
use lorasp_cli::config::ExperimentConfig;
use lorasp_cli::rows::{
    read_csv, read_wide_ranks, AblationCsvRow, CurveRow, IntrinsicDimensionRow, QuantileRow, ReportRow, SpectralRow,
    VarianceRow,
};
use serde_json::{json, Value};
use tempfile::TempDir;

fn lorasp(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lorasp"))
        .arg("--out")
        .arg(root)
        .arg("--quiet")
        .args(args)
        .output()
        .expect("binary runs")
}

fn out_dir(o: &Output) -> PathBuf {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    PathBuf::from(String::from_utf8(o.stdout.clone()).unwrap().trim())
}

fn tiny(train: Value) -> Value {
    json!({
        "name": "tiny",
        "planted_ranks": [1, 3],
        "suite": { "d_in": 12, "hidden": 10, "d_out": 6, "train_samples": 64, "val_samples": 32 },
        "ranks": [1, 3, 6],
        "train": train,
    })
}

fn write_config(dir: &Path, file: &str, v: &Value) -> PathBuf {
    let p = dir.join(file);
    fs::write(&p, serde_json::to_vec_pretty(v).unwrap()).unwrap();
    p
}

fn quick(kind: &str) -> Value {
    json!({ "kind": kind, "rank": 4, "r_init": 8, "experts": 2, "expert_rank": 3,
            "lr": 0.01, "steps": 60, "batch_size": 16, "log_every": 20 })
}

fn metrics(dir: &Path) -> RunMetrics {
    serde_json::from_str(&fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap()
}

#[test]
fn train_writes_every_artifact() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &tiny(quick("lorasp")));
    let dir = out_dir(&lorasp(
        &tmp.path().join("runs"),
        &["train", "--config", cfg.to_str().unwrap()],
    ));
    assert!(dir.starts_with(tmp.path().join("runs").join("tiny")));

    let summary = fs::read_to_string(dir.join("summary.txt")).unwrap();
    assert!(summary.contains("trainable params"), "{summary}");
    assert!(summary.contains("layer1") && summary.contains("layer2"), "{summary}");

    // Defaults are echoed in full.
    let echoed: Value = serde_json::from_str(&fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["train"]["spec_weight"], json!(0.01));
    assert_eq!(echoed["train"]["router_weight"], json!(0.001));
    assert_eq!(echoed["eps_fraction"], json!(0.05));

    let m = metrics(&dir);
    let curves: Vec<CurveRow> = read_csv(&dir.join("curves.csv")).unwrap();
    assert_eq!(
        curves.len(),
        m.tasks
            .iter()
            .map(|t| t.train_curve.len() + t.val_curve.len())
            .sum::<usize>()
    );
    let last = curves.iter().rfind(|c| c.split == "val" && c.task == "task1").unwrap();
    assert_eq!(last.loss, m.tasks[1].val_curve.last().unwrap().loss);
    let log: Vec<RankLogRow> = read_csv(&dir.join("rank_log.csv")).unwrap();
    assert!(!log.is_empty() && log.iter().all(|r| r.energy_k >= 0.9));
    let q: Vec<QuantileRow> = read_csv(&dir.join("rank_quantiles.csv")).unwrap();
    assert_eq!(
        q.iter().map(|r| r.module_group.as_str()).collect::<Vec<_>>(),
        ["hidden", "output"]
    );
    assert_eq!(q[0].median, m.layers[0].quantiles.median);

    let ckpt = Bundle::load(&dir.join("checkpoint.lspb")).unwrap();
    assert_eq!(ckpt.kind, "checkpoint");
    assert!(ckpt.tensors.contains_key("layer1.bank.u"));
    let upd = Bundle::load(&dir.join("updates.lspb")).unwrap();
    assert!(upd.tensors.contains_key("layer2") && upd.tensors.contains_key("task0/layer1"));
}

#[test]
fn seed_override_changes_hash_and_reproduces() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("runs");
    let cfg = write_config(tmp.path(), "c.json", &tiny(quick("lora")));
    let c = cfg.to_str().unwrap();
    let a = out_dir(&lorasp(&root, &["train", "--config", c]));
    let b = out_dir(&lorasp(&root, &["train", "--config", c, "--seed", "7"]));
    assert_ne!(a, b);
    let b_metrics = metrics(&b);
    assert_eq!(b_metrics.config.seed, 7);
    fs::remove_file(b.join("metrics.json")).unwrap();
    let again = out_dir(&lorasp(&root, &["train", "--config", c, "--seed", "7"]));
    assert_eq!(again, b);
    assert_eq!(metrics(&again), b_metrics);
    assert_ne!(metrics(&a).tasks, b_metrics.tasks);
}

#[test]
fn resume_skips_a_finished_run() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("runs");
    let cfg = write_config(tmp.path(), "c.json", &tiny(quick("lora")));
    let dir = out_dir(&lorasp(&root, &["train", "--config", cfg.to_str().unwrap()]));
    let before = fs::read(dir.join("metrics.json")).unwrap();
    out_dir(&lorasp(
        &root,
        &["train", "--config", cfg.to_str().unwrap(), "--resume"],
    ));
    assert_eq!(fs::read(dir.join("metrics.json")).unwrap(), before);
}

#[test]
fn malformed_json_exits_2_without_output() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("runs");
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{\"train\": {\"lr\": 0.1,,}").unwrap();
    let o = lorasp(&root, &["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!root.exists());
}

#[test]
fn config_errors_name_the_field() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("runs");
    for (cfg, field) in [
        (json!({"train": {"stepz": 3}}), "stepz"),
        (json!({"train": {"steps": 0}}), "steps"),
        (json!({"planted_ranks": [99]}), "suite"),
    ] {
        let p = write_config(tmp.path(), "c.json", &cfg);
        let o = lorasp(&root, &["train", "--config", p.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2));
        assert!(
            String::from_utf8_lossy(&o.stderr).contains(field),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    assert!(!root.exists());
    assert_eq!(lorasp(&root, &["train", "--jobs", "0"]).status.code(), Some(2));
    assert_eq!(lorasp(&root, &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let tmp = TempDir::new().unwrap();
    let mut train = quick("full-ft");
    train["lr"] = json!(1e4);
    let p = write_config(tmp.path(), "c.json", &tiny(train));
    let o = lorasp(&tmp.path().join("runs"), &["train", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
}

#[test]
fn sweep_writes_curves_and_resumes() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("runs");
    let p = write_config(tmp.path(), "c.json", &tiny(quick("lora")));
    let args = ["sweep", "--config", p.to_str().unwrap(), "--jobs", "3"];
    let dir = out_dir(&lorasp(&root, &args));

    let points: Vec<SweepPoint> = read_csv(&dir.join("rank_curve.csv")).unwrap();
    assert_eq!(points.len(), 3 * 2 * 2);
    let mut keys: Vec<_> = points.iter().map(|p| (p.rank, p.task.clone(), p.regime)).collect();
    keys.sort();
    keys.dedup();
    assert_eq!(keys.len(), points.len());
    let ids: Vec<IntrinsicDimensionRow> = read_csv(&dir.join("intrinsic_dimension.csv")).unwrap();
    assert_eq!(
        ids.iter().map(|r| r.task.as_str()).collect::<Vec<_>>(),
        ["task0", "task1"]
    );
    let var: Vec<VarianceRow> = read_csv(&dir.join("variance.csv")).unwrap();
    assert_eq!(var.len(), 6);

    let cell = dir.join("cells/single-task0-rank1/metrics.json");
    let stamp = fs::metadata(&cell).unwrap().modified().unwrap();
    let before = fs::read(dir.join("rank_curve.csv")).unwrap();
    let mut resumed = args.to_vec();
    resumed.push("--resume");
    assert_eq!(out_dir(&lorasp(&root, &resumed)), dir);
    assert_eq!(fs::metadata(&cell).unwrap().modified().unwrap(), stamp);
    assert_eq!(fs::read(dir.join("rank_curve.csv")).unwrap(), before);

    let wrong = write_config(tmp.path(), "w.json", &tiny(quick("lorasp")));
    assert_eq!(
        lorasp(&root, &["sweep", "--config", wrong.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn ablate_eta_grid_has_one_row_per_cell_and_task() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = tiny(quick("lorasp"));
    cfg["axis"] = json!("eta_grid");
    cfg["train"]["steps"] = json!(20);
    let p = write_config(tmp.path(), "c.json", &cfg);
    let dir = out_dir(&lorasp(
        &tmp.path().join("runs"),
        &["ablate", "--config", p.to_str().unwrap(), "--jobs", "2"],
    ));
    let rows: Vec<AblationCsvRow> = read_csv(&dir.join("ablation.csv")).unwrap();
    assert_eq!(rows.len(), 5 * 2);
    assert_eq!(rows[0].label, "eta0.5");
    assert!(rows.iter().all(|r| r.mean_active_rank.is_some()));
}

fn planted_bundle(path: &Path) {
    let mut rng = StreamRng::new(3, "planted");
    let mut b = Bundle::new("updates", json!({}));
    b.tensors.insert(
        "layer1".into(),
        planted_update(20, 16, &planted_spectrum(2, 1.0, 0.5), &mut rng).unwrap(),
    );
    b.tensors.insert("layer2".into(), rng.gaussian_matrix(8, 20, 1.0));
    b.save(path).unwrap();
}

#[test]
fn analyze_recovers_planted_rank() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("runs");
    let input = tmp.path().join("u.lspb");
    planted_bundle(&input);
    let dir = out_dir(&lorasp(
        &root,
        &["analyze", input.to_str().unwrap(), "--etas", "0.9,0.99"],
    ));
    let (etas, wide) = read_wide_ranks(&dir.join("rank_at_eta.csv")).unwrap();
    assert_eq!(etas, [0.9, 0.99]);
    let layer1 = wide.iter().find(|r| r.0 == "layer1").unwrap();
    assert_eq!(layer1.2, [2, 2]);
    assert!(wide.iter().all(|r| r.2.len() == 2));
    let long: Vec<SpectralRow> = read_csv(&dir.join("spectral_report.csv")).unwrap();
    assert_eq!(long.len(), 4);
    assert!(long.iter().any(|r| r.layer == "layer1" && r.eta == 0.99 && r.k == 2));
}

#[test]
fn analyze_rejects_bad_inputs() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("runs");
    let empty = tmp.path().join("empty.lspb");
    Bundle::new("updates", json!({})).save(&empty).unwrap();
    assert_eq!(
        lorasp(&root, &["analyze", empty.to_str().unwrap()]).status.code(),
        Some(2)
    );

    let cut = tmp.path().join("cut.lspb");
    planted_bundle(&cut);
    let bytes = fs::read(&cut).unwrap();
    fs::write(&cut, &bytes[..bytes.len() - 5]).unwrap();
    let o = lorasp(&root, &["analyze", cut.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("cut.lspb") && err.contains("byte"), "{err}");

    let ok = tmp.path().join("ok.lspb");
    planted_bundle(&ok);
    assert_eq!(
        lorasp(&root, &["analyze", ok.to_str().unwrap(), "--etas", "1.5"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn analyze_accepts_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("runs");
    let p = write_config(tmp.path(), "c.json", &tiny(quick("lora")));
    let run = out_dir(&lorasp(&root, &["train", "--config", p.to_str().unwrap()]));
    let from_ckpt = out_dir(&lorasp(
        &root,
        &["analyze", run.join("checkpoint.lspb").to_str().unwrap()],
    ));
    let from_upd = out_dir(&lorasp(&root, &["analyze", run.join("updates.lspb").to_str().unwrap()]));
    let a: Vec<SpectralRow> = read_csv(&from_ckpt.join("spectral_report.csv")).unwrap();
    let b: Vec<SpectralRow> = read_csv(&from_upd.join("spectral_report.csv")).unwrap();
    assert_eq!(a, b);
    // A rank-4 LoRA product never needs more than 4 directions.
    assert!(a.iter().all(|r| r.k <= 4));
}

#[test]
fn report_compares_strategies() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("runs");
    let mut dirs = Vec::new();
    for kind in ["lorasp", "lora", "full-ft"] {
        let p = write_config(tmp.path(), &format!("{kind}.json"), &tiny(quick(kind)));
        dirs.push(out_dir(&lorasp(&root, &["train", "--config", p.to_str().unwrap()])));
    }
    let missing = tmp.path().join("unfinished");
    fs::create_dir_all(&missing).unwrap();
    let mut args = vec!["report".to_owned()];
    args.extend(dirs.iter().rev().map(|d| d.display().to_string()));
    args.push(missing.display().to_string());
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let dir = out_dir(&lorasp(&root, &args));

    let rows: Vec<ReportRow> = read_csv(&dir.join("report.csv")).unwrap();
    let keys: Vec<(String, String)> = rows.iter().map(|r| (r.strategy.clone(), r.task.clone())).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    assert_eq!(rows.len(), 3 * 2 + 1);
    let incomplete: Vec<&ReportRow> = rows.iter().filter(|r| r.status == "incomplete").collect();
    assert_eq!(incomplete.len(), 1);
    assert_eq!(incomplete[0].strategy, "unknown");
    for r in rows.iter().filter(|r| r.status == "complete") {
        assert!(r.trainable_pct.is_some() && r.active_rank.is_some() && r.final_val_loss.is_some());
        assert!(r.success.is_some(), "{r:?}");
    }
    assert!(rows
        .iter()
        .filter(|r| r.strategy == "full-ft")
        .all(|r| r.success == Some(true)));

    let q: Vec<PathBuf> = fs::read_dir(dir.join("quantiles"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(q.len(), 1);
    let text = fs::read_to_string(&q[0]).unwrap();
    assert!(text.starts_with("layer,module_group,min,lq,median,uq,max\n"), "{text}");
}

#[test]
fn published_schema_lists_every_config_key() {
    let schema: Value = serde_json::from_str(
        &fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/config.schema.json")).unwrap(),
    )
    .unwrap();
    let defaults = serde_json::to_value(ExperimentConfig::default()).unwrap();
    let keys = |v: &Value| {
        let mut k: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
        k.sort();
        k
    };
    assert_eq!(keys(&schema["properties"]), keys(&defaults));
    for section in ["suite", "train"] {
        assert_eq!(
            keys(&schema["properties"][section]["properties"]),
            keys(&defaults[section]),
            "{section}"
        );
        for (k, v) in defaults[section].as_object().unwrap() {
            assert_eq!(
                &schema["properties"][section]["properties"][k]["default"], v,
                "{section}.{k}"
            );
        }
    }
}

#[test]
fn shipped_configs_parse() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg: ExperimentConfig = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        make_tasks_with(cfg.suite_seed, &cfg.planted_ranks, &cfg.suite).unwrap();
    }
}
