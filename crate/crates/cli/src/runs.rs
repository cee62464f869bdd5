//! Output directories, atomic writes, resumable cells and the worker pool.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use lorasp::harness::{Cell, RunMetrics, TaskSuite};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::CliError;

/// Marks a finished run; written last.
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFIG_FILE: &str = "config.json";

pub struct Context {
    pub root: PathBuf,
    pub quiet: bool,
}

impl Context {
    pub fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    pub fn run_dir(&self, name: &str, hash: &str) -> Result<PathBuf, CliError> {
        let dir = self.root.join(name).join(hash);
        fs::create_dir_all(&dir).map_err(|e| CliError::Other(format!("{}: {e}", dir.display())))?;
        Ok(dir)
    }
}

/// Writes through a temporary file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serialisable");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Previously finished metrics in `dir`, if they were produced by `config`.
pub fn finished<C: DeserializeOwned + PartialEq>(dir: &Path, config: &C) -> Option<RunMetrics> {
    let stored: C = read_json(&dir.join(CONFIG_FILE)).ok()?;
    (stored == *config)
        .then(|| read_json(&dir.join(METRICS_FILE)).ok())
        .flatten()
}

/// Runs `f(0..n)` on up to `jobs` threads, returning results in index order.
/// The first error stops workers from picking up new items.
pub fn parallel<T: Send>(
    n: usize,
    jobs: usize,
    f: impl Fn(usize) -> Result<T, CliError> + Sync,
) -> Result<Vec<T>, CliError> {
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let slots: Mutex<Vec<Option<Result<T, CliError>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                if failed.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                failed.fetch_or(r.is_err(), Ordering::Relaxed);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    // Index order makes the reported error deterministic.
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map_while(|s| s)
        .collect::<Result<Vec<T>, CliError>>()
        .and_then(|v| {
            if v.len() == n {
                Ok(v)
            } else {
                Err(CliError::Other("worker stopped early".into()))
            }
        })
}

/// Runs every cell under `<dir>/cells/<label>/`, reusing finished cells when
/// `resume` is set.
pub fn run_cells(
    ctx: &Context,
    dir: &Path,
    suite: &TaskSuite,
    cells: &[Cell],
    resume: bool,
    jobs: usize,
) -> Result<Vec<RunMetrics>, CliError> {
    let done = AtomicUsize::new(0);
    parallel(cells.len(), jobs, |i| {
        let cell = &cells[i];
        let cell_dir = dir.join("cells").join(&cell.label);
        if resume {
            if let Some(m) = finished(&cell_dir, cell) {
                let n = done.fetch_add(1, Ordering::Relaxed) + 1;
                ctx.log(format!("[{n}/{}] {} reused", cells.len(), cell.label));
                return Ok(m);
            }
        }
        fs::create_dir_all(&cell_dir)?;
        let _ = fs::remove_file(cell_dir.join(METRICS_FILE));
        write_json(&cell_dir.join(CONFIG_FILE), cell)?;
        let t = Instant::now();
        let m = cell.run(suite)?;
        write_json(&cell_dir.join(METRICS_FILE), &m)?;
        let n = done.fetch_add(1, Ordering::Relaxed) + 1;
        ctx.log(format!(
            "[{n}/{}] {} val {:.4e} ({:.1}s)",
            cells.len(),
            cell.label,
            m.mean_val_loss,
            t.elapsed().as_secs_f64()
        ));
        Ok(m)
    })
}
