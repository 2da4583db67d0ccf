//! Principal and minor low-rank splits of a weight matrix.
//!
//! Both splits take the thin SVD `W = U Σ Vᵀ` (k = min(m, n) components) and
//! move r of the components into balanced trainable factors
//! `B = U_sel Σ_sel^{1/2}`, `A = Σ_sel^{1/2} V_selᵀ`. The remaining components
//! are materialized as a dense frozen residual, so `B·A + residual = W`.
//! Principal selects the leading r components, minor the trailing r.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{mm, mm_nt, Matrix};
use crate::svd::{svd, SvdResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Principal,
    Minor,
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitKind::Principal => "principal",
            SplitKind::Minor => "minor",
        })
    }
}

impl std::str::FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "principal" => Ok(SplitKind::Principal),
            "minor" => Ok(SplitKind::Minor),
            other => Err(Error::Config(format!("unknown split kind `{other}` (expected principal|minor)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankSplit {
    /// m×r.
    pub b: Matrix,
    /// r×n.
    pub a: Matrix,
    /// m×n, frozen remainder.
    pub residual: Matrix,
    pub rank: usize,
    pub kind: SplitKind,
}

impl LowRankSplit {
    /// `b·a`, the full-size low-rank part.
    pub fn low_rank(&self) -> Matrix {
        mm(&self.b, &self.a)
    }
}

pub fn split_principal(w: &Matrix, r: usize) -> Result<LowRankSplit> {
    split(w, r, SplitKind::Principal)
}

pub fn split_minor(w: &Matrix, r: usize) -> Result<LowRankSplit> {
    split(w, r, SplitKind::Minor)
}

pub fn split(w: &Matrix, r: usize, kind: SplitKind) -> Result<LowRankSplit> {
    check_rank(w, r)?;
    split_from_svd(&svd(w)?, r, kind)
}

fn check_rank(w: &Matrix, r: usize) -> Result<()> {
    let k = w.rows().min(w.cols());
    if r == 0 || r > k {
        return Err(Error::Param(format!("rank {r} outside 1..={k} for a {}x{} matrix", w.rows(), w.cols())));
    }
    Ok(())
}

/// Builds a split from an existing decomposition, so principal and minor
/// splits of the same matrix can share one SVD.
pub fn split_from_svd(decomp: &SvdResult, r: usize, kind: SplitKind) -> Result<LowRankSplit> {
    let k = decomp.rank_bound();
    if r == 0 || r > k {
        return Err(Error::Param(format!("rank {r} outside 1..={k}")));
    }
    let (selected, rest) = match kind {
        SplitKind::Principal => (0..r, r..k),
        SplitKind::Minor => (k - r..k, 0..k - r),
    };
    let (b, a) = balanced_factors(decomp, selected)?;
    let residual = match rest.is_empty() {
        true => Matrix::zeros(decomp.u.rows(), decomp.v.rows()),
        false => partial_reconstruct(decomp, rest)?,
    };
    Ok(LowRankSplit { b, a, residual, rank: r, kind })
}

fn balanced_factors(decomp: &SvdResult, range: Range<usize>) -> Result<(Matrix, Matrix)> {
    let roots: Vec<f64> = decomp.sigma[range.clone()].iter().map(|s| s.sqrt()).collect();
    let b = decomp.u.columns(range.clone())?.scale_columns(&roots)?;
    let a = decomp.v.columns(range)?.scale_columns(&roots)?.transpose();
    Ok((b, a))
}

/// U_{:,range}·diag(σ_range)·V_{:,range}ᵀ.
pub fn partial_reconstruct(decomp: &SvdResult, range: Range<usize>) -> Result<Matrix> {
    let us = decomp.u.columns(range.clone())?.scale_columns(&decomp.sigma[range.clone()])?;
    Ok(mm_nt(&us, &decomp.v.columns(range)?))
}

pub fn reconstruct(split: &LowRankSplit) -> Matrix {
    let mut out = split.low_rank();
    crate::matrix::axpy(&mut out, 1.0, &split.residual);
    out
}
