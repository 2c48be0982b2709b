//! Natural cubic spline bases for the smooth age, period and cohort terms.
//!
//! The basis is the truncated-power construction of a natural cubic spline,
//! evaluated on the covariate rescaled to `[0, 1]` between the boundary knots.
//! It has `df` columns, no intercept, and every column vanishes at the lower
//! boundary knot, so it spans the same space as a `ns(x, df)` basis.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("spline df must be at least 2, got {0}")]
    DfTooSmall(usize),
    #[error("need at least {needed} distinct values for df = {df}, got {got}")]
    TooFewDistinct { df: usize, needed: usize, got: usize },
    #[error("non-finite covariate value {0}")]
    NonFinite(f64),
    #[error("invalid knot set: {0}")]
    InvalidKnots(String),
}

/// Boundary and interior knots of a natural cubic spline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotSet {
    lower: f64,
    upper: f64,
    interior: Vec<f64>,
}

impl KnotSet {
    pub fn new(lower: f64, upper: f64, interior: Vec<f64>) -> Result<Self, SplineError> {
        if !(lower.is_finite() && upper.is_finite()) || lower >= upper {
            return Err(SplineError::InvalidKnots(format!(
                "boundary knots must be finite and increasing, got [{lower}, {upper}]"
            )));
        }
        if interior.is_empty() {
            return Err(SplineError::DfTooSmall(1));
        }
        let mut prev = lower;
        for &k in &interior {
            if !k.is_finite() || k <= prev {
                return Err(SplineError::InvalidKnots(format!(
                    "interior knots must be strictly increasing inside ({lower}, {upper})"
                )));
            }
            prev = k;
        }
        if prev >= upper {
            return Err(SplineError::InvalidKnots(format!(
                "interior knot {prev} not below upper boundary {upper}"
            )));
        }
        Ok(Self { lower, upper, interior })
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn interior(&self) -> &[f64] {
        &self.interior
    }

    pub fn df(&self) -> usize {
        self.interior.len() + 1
    }

    /// All knots in increasing order, boundaries included.
    pub fn all(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.interior.len() + 2);
        v.push(self.lower);
        v.extend_from_slice(&self.interior);
        v.push(self.upper);
        v
    }
}

/// Type-7 (linear interpolation) quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Places boundary knots at the data range and `df - 1` interior knots at
/// the `i / df` quantiles of the distinct values.
pub fn knots_from_data(values: &[f64], df: usize) -> Result<KnotSet, SplineError> {
    if df < 2 {
        return Err(SplineError::DfTooSmall(df));
    }
    if let Some(&bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(SplineError::NonFinite(bad));
    }
    let mut distinct = values.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if distinct.len() < df + 1 {
        return Err(SplineError::TooFewDistinct {
            df,
            needed: df + 1,
            got: distinct.len(),
        });
    }
    let interior = (1..df)
        .map(|i| quantile_sorted(&distinct, i as f64 / df as f64))
        .collect();
    KnotSet::new(distinct[0], distinct[distinct.len() - 1], interior)
}

/// Evaluated basis: one row per point, `df` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    values: DMatrix<f64>,
}

impl BasisMatrix {
    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[(row, col)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.values
    }
}

#[inline]
fn cube_pos(v: f64) -> f64 {
    if v > 0.0 {
        v * v * v
    } else {
        0.0
    }
}

/// Evaluates all `df` basis functions at a single point.
pub fn basis_row(x: f64, knots: &KnotSet, out: &mut [f64]) {
    debug_assert_eq!(out.len(), knots.df());
    let span = knots.upper - knots.lower;
    let t = (x - knots.lower) / span;
    let n_inner = knots.interior.len();
    // knot k in scaled units: 0 is the lower boundary, n_inner + 1 the upper (= 1)
    let scaled = |k: usize| {
        if k == 0 {
            0.0
        } else if k <= n_inner {
            (knots.interior[k - 1] - knots.lower) / span
        } else {
            1.0
        }
    };
    let last = n_inner + 1;
    let tail = cube_pos(t - 1.0);
    let d = |k: usize| {
        let tk = scaled(k);
        (cube_pos(t - tk) - tail) / (1.0 - tk)
    };
    out[0] = t;
    let d_ref = d(last - 1);
    for k in 0..last - 1 {
        out[k + 1] = d(k) - d_ref;
    }
}

/// Evaluates the natural spline basis at every point of `x`.
pub fn natural_basis(x: &[f64], knots: &KnotSet) -> Result<BasisMatrix, SplineError> {
    if let Some(&bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(SplineError::NonFinite(bad));
    }
    let df = knots.df();
    let mut values = DMatrix::zeros(x.len(), df);
    let mut row = vec![0.0; df];
    for (i, &xi) in x.iter().enumerate() {
        basis_row(xi, knots, &mut row);
        for (j, v) in row.iter().enumerate() {
            values[(i, j)] = *v;
        }
    }
    Ok(BasisMatrix { values })
}
