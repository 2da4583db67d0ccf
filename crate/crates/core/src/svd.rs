//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! The input is orthogonalized column-pair by column-pair in cyclic order
//! until every pair's Gram cosine is below [`ROTATION_TOL`]. Column norms are
//! the singular values. Results are sorted descending (stable on ties) and
//! sign-normalized so the largest-magnitude entry of every `U` column is
//! positive, which makes the output a pure function of the input bytes.

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

pub const ROTATION_TOL: f64 = 1e-14;
pub const MAX_SWEEPS: usize = 60;

#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// m×k, orthonormal columns.
    pub u: Matrix,
    /// Length k, descending, nonnegative.
    pub sigma: Vec<f64>,
    /// n×k, orthonormal columns.
    pub v: Matrix,
}

impl SvdResult {
    pub fn rank_bound(&self) -> usize {
        self.sigma.len()
    }

    /// U·diag(σ)·Vᵀ.
    pub fn reconstruct(&self) -> Matrix {
        let us = self.u.scale_columns(&self.sigma).expect("sigma length matches U");
        crate::matrix::mm_nt(&us, &self.v)
    }
}

pub fn svd(w: &Matrix) -> Result<SvdResult> {
    if w.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("svd input has non-finite entries".into()));
    }
    let (m, n) = w.shape();
    if m >= n {
        jacobi(w)
    } else {
        // Work on the tall transpose and swap the roles of U and V.
        let t = jacobi(&w.transpose())?;
        let mut out = SvdResult { u: t.v, sigma: t.sigma, v: t.u };
        normalize_signs(&mut out);
        Ok(out)
    }
}

/// One-sided Jacobi on a tall (m ≥ n) matrix.
fn jacobi(w: &Matrix) -> Result<SvdResult> {
    let (m, n) = w.shape();
    // Columns stored contiguously: cols[j] is column j of the working matrix.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| w.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = n < 2;
    let mut worst = 0.0;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        worst = 0.0f64;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if alpha == 0.0 || beta == 0.0 || gamma == 0.0 {
                    continue;
                }
                let cosine = gamma.abs() / (alpha.sqrt() * beta.sqrt());
                worst = worst.max(cosine);
                if cosine <= ROTATION_TOL {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "jacobi svd did not converge in {MAX_SWEEPS} sweeps (largest residual cosine {worst:.3e})"
        )));
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable: equal singular values keep original column order.
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let sigma_max = sigma.first().copied().unwrap_or(0.0);
    let negligible = sigma_max * (m.max(n) as f64) * f64::EPSILON;

    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (rank, &j) in order.iter().enumerate() {
        let s = sigma[rank];
        let mut col = if s > negligible && s > 0.0 { cols[j].iter().map(|v| v / s).collect() } else { vec![0.0; m] };
        orthonormalize_against(&mut col, &ucols);
        ucols.push(col);
    }

    let mut u = Matrix::zeros(m, n);
    let mut v = Matrix::zeros(n, n);
    for (k, &j) in order.iter().enumerate() {
        for i in 0..m {
            u.as_mut_slice()[i * n + k] = ucols[k][i];
        }
        for i in 0..n {
            v.as_mut_slice()[i * n + k] = vcols[j][i];
        }
    }
    let mut out = SvdResult { u, sigma, v };
    normalize_signs(&mut out);
    Ok(out)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Two passes of modified Gram-Schmidt against `basis`, then normalize. A
/// column that collapses (null-space direction) is replaced by the first
/// standard basis vector that survives projection.
fn orthonormalize_against(col: &mut Vec<f64>, basis: &[Vec<f64>]) {
    let project = |col: &mut Vec<f64>| {
        for _ in 0..2 {
            for b in basis {
                let d = dot(col, b);
                for (x, y) in col.iter_mut().zip(b) {
                    *x -= d * y;
                }
            }
        }
        dot(col, col).sqrt()
    };
    let norm = project(col);
    if norm > 0.5 {
        col.iter_mut().for_each(|x| *x /= norm);
        return;
    }
    let m = col.len();
    for e in 0..m {
        let mut cand = vec![0.0; m];
        cand[e] = 1.0;
        let norm = project(&mut cand);
        if norm > 0.5 {
            cand.iter_mut().for_each(|x| *x /= norm);
            *col = cand;
            return;
        }
    }
    unreachable!("basis already spans the space");
}

/// Flip each singular pair so the largest-|·| entry of the U column is
/// positive (first row wins ties).
fn normalize_signs(r: &mut SvdResult) {
    let (m, k) = r.u.shape();
    let n = r.v.rows();
    for j in 0..k {
        let mut best = 0;
        let mut best_abs = -1.0;
        for i in 0..m {
            let a = r.u.as_slice()[i * k + j].abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if r.u.as_slice()[best * k + j] < 0.0 {
            for i in 0..m {
                r.u.as_mut_slice()[i * k + j] *= -1.0;
            }
            for i in 0..n {
                r.v.as_mut_slice()[i * k + j] *= -1.0;
            }
        }
    }
}
