//! One-sided (Hestenes) Jacobi SVD.
//!
//! Columns of a working copy of `A` are rotated pairwise until every pair is
//! orthogonal to machine precision relative to the pair's norms. The
//! accumulated rotations form `V`; the column norms are the singular values
//! and the normalised columns are `U`. Wide inputs are handled through the
//! transpose.

use super::matrix::dot;
use super::Matrix;
use crate::error::{Error, Result};

/// Maximum number of full Jacobi sweeps before giving up.
pub const SVD_MAX_SWEEPS: usize = 60;

/// Thin SVD `A = u · diag(sigma) · vt`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// `d_out x p`, orthonormal columns.
    pub u: Matrix,
    /// Nonincreasing, nonnegative, length `p = min(d_out, d_in)`.
    pub sigma: Vec<f64>,
    /// `p x d_in`, orthonormal rows.
    pub vt: Matrix,
}

impl SvdResult {
    /// `u · diag(sigma) · vt`.
    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_with(&self.sigma)
    }

    /// `u · diag(values) · vt` for a replacement spectrum of the same length.
    pub fn reconstruct_with(&self, values: &[f64]) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (x, &s) in us.row_mut(i).iter_mut().zip(values) {
                *x *= s;
            }
        }
        us.matmul_unchecked(&self.vt)
    }

    /// Number of singular values above `tol · sigma_max`.
    pub fn numerical_rank(&self, tol: f64) -> usize {
        let max = self.sigma.first().copied().unwrap_or(0.0);
        self.sigma.iter().filter(|&&s| s > tol * max).count()
    }
}

/// Computes the thin SVD of `a`. Deterministic for a fixed input.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if !a.is_finite() {
        let pos = a.data().iter().position(|v| !v.is_finite()).unwrap_or(0);
        return Err(Error::NonFinite {
            row: pos / a.cols().max(1),
            col: pos % a.cols().max(1),
        });
    }
    if a.rows() >= a.cols() {
        tall_svd(a)
    } else {
        let t = tall_svd(&a.transpose())?;
        Ok(SvdResult {
            u: t.vt.transpose(),
            sigma: t.sigma,
            vt: t.u.transpose(),
        })
    }
}

fn tall_svd(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    let norm_sq = a.frobenius_norm_sq();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.col(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = n <= 1;
    let mut off = 0.0;
    for _ in 0..SVD_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotations = 0usize;
        off = 0.0;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                off += gamma * gamma;
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotations += 1;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if rotations == 0 {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::SvdNoConvergence {
            rows: m,
            cols: n,
            sweeps: SVD_MAX_SWEEPS,
            residual: off.sqrt() / norm_sq.max(f64::MIN_POSITIVE),
        });
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable: equal singular values keep their column order.
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut next_basis = 0usize;
    for &j in &order {
        let candidate: Option<Vec<f64>> = if norms[j] > 0.0 {
            Some(cols[j].iter().map(|v| v / norms[j]).collect())
        } else {
            None
        };
        let accepted = candidate.and_then(|c| orthonormalize(c, &ucols));
        let column = match accepted {
            Some(c) => c,
            None => loop {
                // Complete the basis from standard unit vectors.
                let mut e = vec![0.0; m];
                e[next_basis] = 1.0;
                next_basis += 1;
                if let Some(c) = orthonormalize(e, &ucols) {
                    break c;
                }
            },
        };
        ucols.push(column);
    }

    let u = Matrix::from_fn(m, n, |i, k| ucols[k][i]);
    let vt = Matrix::from_fn(n, n, |k, i| vcols[order[k]][i]);
    Ok(SvdResult { u, sigma, vt })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Two passes of modified Gram-Schmidt against `basis`; `None` when the
/// vector is (numerically) inside the span already.
fn orthonormalize(mut v: Vec<f64>, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    let start = dot(&v, &v).sqrt();
    for _ in 0..2 {
        for b in basis {
            let proj = dot(&v, b);
            for (x, &y) in v.iter_mut().zip(b) {
                *x -= proj * y;
            }
        }
    }
    let norm = dot(&v, &v).sqrt();
    if norm <= 0.5 * start || norm == 0.0 {
        return None;
    }
    Some(v.into_iter().map(|x| x / norm).collect())
}
