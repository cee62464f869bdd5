//! Cumulative spectral energy, truncated SVD and per-layer rank reports.
//!
//! For singular values `σ₁ ≥ … ≥ σ_r` the cumulative energy is
//! `E(k) = Σ_{i≤k} σᵢ² / Σᵢ σᵢ²`, and the best rank-`k` approximation `A_k`
//! satisfies `‖A − A_k‖_F / ‖A‖_F = √(1 − E(k))`. The same energy is used on
//! router scores, so everything here takes plain nonnegative values.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix};

/// How the full rank used for normalisation is defined.
pub const FULL_RANK_DEFINITION: &str = "min(d_out, d_in)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyCurve {
    /// Squared values, sorted nonincreasing.
    pub sigma_squared: Vec<f64>,
    /// Position `i` holds the input index of the `i`-th largest value.
    pub order: Vec<usize>,
    /// `E(1..=r)`.
    pub cumulative: Vec<f64>,
    pub total_energy: f64,
    /// Empty or all-zero input. `cumulative` is then all ones.
    pub degenerate: bool,
}

impl EnergyCurve {
    pub fn len(&self) -> usize {
        self.cumulative.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cumulative.is_empty()
    }

    /// `E(k)`, with `E(0) = 0` for non-degenerate curves.
    pub fn energy_at(&self, k: usize) -> f64 {
        match k {
            0 if self.degenerate => 1.0,
            0 => 0.0,
            k => self.cumulative[k.min(self.len()) - 1],
        }
    }
}

/// Sorts `values` by square (stable, so ties keep input order) and
/// accumulates their energy fractions.
pub fn cumulative_energy(values: &[f64]) -> EnergyCurve {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| (values[j] * values[j]).total_cmp(&(values[i] * values[i])));
    let sigma_squared: Vec<f64> = order.iter().map(|&i| values[i] * values[i]).collect();

    let mut partial = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for &s in &sigma_squared {
        acc += s;
        partial.push(acc);
    }
    // The last partial sum is the total, so E(r) == 1 exactly.
    let total_energy = acc;
    let degenerate = !(total_energy > 0.0);
    let cumulative = if degenerate {
        vec![1.0; values.len()]
    } else {
        partial.iter().map(|p| p / total_energy).collect()
    };
    EnergyCurve {
        sigma_squared,
        order,
        cumulative,
        total_energy,
        degenerate,
    }
}

/// Smallest `k` with `E(k) ≥ η`, or 0 for a degenerate curve. `η` is
/// expected in `(0, 1]`; larger targets saturate at the full length.
pub fn rank_at_energy(curve: &EnergyCurve, eta: f64) -> usize {
    if curve.degenerate {
        return 0;
    }
    curve
        .cumulative
        .iter()
        .position(|&e| e >= eta)
        .map_or(curve.len(), |i| i + 1)
}

fn check_rank(a: &Matrix, k: usize) -> Result<()> {
    let max = a.rows().min(a.cols());
    if k == 0 || k > max {
        return Err(Error::RankOutOfRange { k, max });
    }
    Ok(())
}

/// Best rank-`k` approximation `U · diag(σ₁..σ_k, 0, …) · Vᵀ`.
pub fn truncate(a: &Matrix, k: usize) -> Result<Matrix> {
    check_rank(a, k)?;
    let s = svd(a)?;
    let kept: Vec<f64> = s
        .sigma
        .iter()
        .enumerate()
        .map(|(i, &v)| if i < k { v } else { 0.0 })
        .collect();
    Ok(s.reconstruct_with(&kept))
}

/// `‖A − A_k‖_F / ‖A‖_F`, evaluated through the spectrum as `√(1 − E(k))`.
pub fn relative_error(a: &Matrix, k: usize) -> Result<f64> {
    check_rank(a, k)?;
    if a.frobenius_norm_sq() == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    let s = svd(a)?;
    let curve = cumulative_energy(&s.sigma);
    // Tail sum instead of 1 - E(k) avoids cancellation for small tails.
    let tail: f64 = curve.sigma_squared[k..].iter().sum();
    Ok((tail / curve.total_energy).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaRank {
    pub eta: f64,
    pub k: usize,
    pub normalized_k: f64,
    /// `√(1 − E(k))`.
    pub rel_error_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpectrum {
    pub layer: String,
    pub rows: usize,
    pub cols: usize,
    pub full_rank: usize,
    pub sigma: Vec<f64>,
    pub curve: EnergyCurve,
    pub ranks: Vec<EtaRank>,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub full_rank_definition: String,
    pub etas: Vec<f64>,
    pub layers: Vec<LayerSpectrum>,
}

pub const REPORT_CSV_HEADER: [&str; 6] = ["layer", "full_rank", "eta", "k", "normalized_k", "rel_error_bound"];

impl SpectralReport {
    pub fn layer(&self, name: &str) -> Option<&LayerSpectrum> {
        self.layers.iter().find(|l| l.layer == name)
    }

    /// Mean normalised rank at `eta` over non-degenerate layers.
    pub fn mean_normalized_rank(&self, eta: f64) -> Option<f64> {
        let vals: Vec<f64> = self
            .layers
            .iter()
            .filter(|l| !l.degenerate)
            .filter_map(|l| l.ranks.iter().find(|r| r.eta == eta))
            .map(|r| r.normalized_k)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(REPORT_CSV_HEADER).expect("in-memory write");
        for l in &self.layers {
            for r in &l.ranks {
                w.write_record([
                    l.layer.clone(),
                    l.full_rank.to_string(),
                    format!("{:?}", r.eta),
                    r.k.to_string(),
                    format!("{:?}", r.normalized_k),
                    format!("{:?}", r.rel_error_bound),
                ])
                .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

/// Rank-at-energy for every layer and every requested `η`.
pub fn layer_rank_report(updates: &BTreeMap<String, Matrix>, etas: &[f64]) -> Result<SpectralReport> {
    if updates.is_empty() {
        return Err(Error::Empty("layer map"));
    }
    let mut layers = Vec::with_capacity(updates.len());
    for (name, m) in updates {
        let full_rank = m.rows().min(m.cols());
        let sigma = if full_rank == 0 { Vec::new() } else { svd(m)?.sigma };
        let curve = cumulative_energy(&sigma);
        let ranks = etas
            .iter()
            .map(|&eta| {
                let k = rank_at_energy(&curve, eta);
                let tail: f64 = if curve.degenerate {
                    0.0
                } else {
                    curve.sigma_squared[k..].iter().sum::<f64>() / curve.total_energy
                };
                EtaRank {
                    eta,
                    k,
                    normalized_k: if full_rank == 0 {
                        0.0
                    } else {
                        k as f64 / full_rank as f64
                    },
                    rel_error_bound: tail.sqrt(),
                }
            })
            .collect();
        layers.push(LayerSpectrum {
            layer: name.clone(),
            rows: m.rows(),
            cols: m.cols(),
            full_rank,
            degenerate: curve.degenerate,
            sigma,
            curve,
            ranks,
        });
    }
    Ok(SpectralReport {
        full_rank_definition: FULL_RANK_DEFINITION.to_owned(),
        etas: etas.to_vec(),
        layers,
    })
}
