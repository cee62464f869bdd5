//! Typed CSV rows. Every file the CLI writes is produced by [`write_csv`]
//! from one of these types and can be read back with [`read_csv`].

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// One loss-curve sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub task: String,
    /// `train` or `val`.
    pub split: String,
    pub step: usize,
    pub loss: f64,
}

/// Active-rank distribution of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileRow {
    pub layer: String,
    pub module_group: String,
    pub min: f64,
    pub lq: f64,
    pub median: f64,
    pub uq: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicDimensionRow {
    pub task: String,
    pub planted_rank: usize,
    /// `rank` or `infeasible`.
    pub status: String,
    /// Empty when infeasible.
    pub rank: Option<usize>,
}

/// Spread of per-task val losses at one rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub regime: String,
    pub rank: usize,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCsvRow {
    pub label: String,
    pub eta: f64,
    pub spec_weight: f64,
    pub task: String,
    pub val_loss: f64,
    /// Empty for runs without rank selection.
    pub mean_active_rank: Option<f64>,
}

/// One (strategy, task) line of the aggregate report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub strategy: String,
    pub task: String,
    /// Run directory the row came from.
    pub run: String,
    pub planted_rank: Option<usize>,
    pub trainable_pct: Option<f64>,
    pub active_rank: Option<f64>,
    pub final_val_loss: Option<f64>,
    /// Empty when no full fine-tuning run on the same suite was given.
    pub success: Option<bool>,
    /// `complete` or `incomplete`.
    pub status: String,
}

/// Long-format spectral report line, as written by the library.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralRow {
    pub layer: String,
    pub full_rank: usize,
    pub eta: f64,
    pub k: usize,
    pub normalized_k: f64,
    pub rel_error_bound: f64,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| CliError::Usage(format!("{}: {e}", path.display()))))
        .collect()
}

/// `(layer, full rank, k per target)`.
pub type WideRankRow = (String, usize, Vec<usize>);

/// Wide rank table: `layer, full_rank, k@<eta>...`, one column per target.
pub fn write_wide_ranks(path: &Path, etas: &[f64], rows: &[WideRankRow]) -> Result<(), CliError> {
    let err = |e: csv::Error| CliError::Other(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    let mut header = vec!["layer".to_owned(), "full_rank".to_owned()];
    header.extend(etas.iter().map(|e| format!("k@{e:?}")));
    w.write_record(&header).map_err(err)?;
    for (layer, full, ks) in rows {
        let mut rec = vec![layer.clone(), full.to_string()];
        rec.extend(ks.iter().map(|k| k.to_string()));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_wide_ranks`].
pub fn read_wide_ranks(path: &Path) -> Result<(Vec<f64>, Vec<WideRankRow>), CliError> {
    let bad = |m: String| CliError::Usage(format!("{}: {m}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.len() < 2 || &header[0] != "layer" || &header[1] != "full_rank" {
        return Err(bad("expected header layer,full_rank,k@<eta>...".into()));
    }
    let etas = header
        .iter()
        .skip(2)
        .map(|h| {
            h.strip_prefix("k@")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(format!("bad column {h:?}")))
        })
        .collect::<Result<Vec<f64>, _>>()?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |i: usize| rec[i].parse::<usize>().map_err(|e| bad(format!("{:?}: {e}", &rec[i])));
        let ks = (2..rec.len()).map(num).collect::<Result<Vec<_>, _>>()?;
        rows.push((rec[0].to_owned(), num(1)?, ks));
    }
    Ok((etas, rows))
}
