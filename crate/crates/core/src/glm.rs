//! Poisson log-linear regression with offsets, fitted by IRLS.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::linalg::{PivotedQr, ALIAS_TOL};

pub const MAX_IRLS_ITER: usize = 50;
pub const DEVIANCE_TOL: f64 = 1e-10;
const MAX_HALVINGS: usize = 10;
const MAX_FAILED_DAMPING: usize = 3;

#[derive(Debug, Error)]
pub enum GlmError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid response at row {row}: {value}")]
    BadResponse { row: usize, value: f64 },
    #[error("non-finite offset at row {row}")]
    BadOffset { row: usize },
    #[error("IRLS did not converge after {iterations} iterations (deviance trace {trace:?})")]
    NonConvergence { iterations: usize, trace: Vec<f64> },
    #[error("design has no estimable columns")]
    Empty,
}

/// Design matrix with column labels. No intercept column is added.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    x: DMatrix<f64>,
    labels: Vec<String>,
}

impl DesignMatrix {
    pub fn new(x: DMatrix<f64>, labels: Vec<String>) -> Result<Self, GlmError> {
        if x.ncols() != labels.len() {
            return Err(GlmError::Shape(format!(
                "{} columns but {} labels",
                x.ncols(),
                labels.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(GlmError::Shape("non-finite design entry".into()));
        }
        Ok(Self { x, labels })
    }

    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn column_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Same columns in a different order.
    pub fn permute_columns(&self, order: &[usize]) -> DesignMatrix {
        let x = DMatrix::from_fn(self.nrows(), order.len(), |i, j| self.x[(i, order[j])]);
        let labels = order.iter().map(|&j| self.labels[j].clone()).collect();
        DesignMatrix { x, labels }
    }

    /// Linear predictor `X beta + offset` for a full-length coefficient vector.
    pub fn linear_predictor(&self, beta: &[f64], offset: &[f64]) -> Vec<f64> {
        let n = self.nrows();
        let mut eta = offset.to_vec();
        let data = self.x.as_slice();
        for (j, &b) in beta.iter().enumerate() {
            if b == 0.0 {
                continue;
            }
            for (e, x) in eta.iter_mut().zip(&data[j * n..(j + 1) * n]) {
                *e += b * x;
            }
        }
        eta
    }
}

/// Result of [`fit_poisson`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlmFit {
    pub labels: Vec<String>,
    /// Indices into `labels` of the estimated columns.
    pub retained: Vec<usize>,
    /// One coefficient per retained column.
    pub coefficients: Vec<f64>,
    pub aliased: Vec<String>,
    /// Covariance over retained columns, in the order of `retained`.
    pub covariance: Vec<Vec<f64>>,
    pub deviance: f64,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub final_step_norm: f64,
    pub deviance_trace: Vec<f64>,
}

impl GlmFit {
    /// Coefficients over all columns, aliased ones set to zero.
    pub fn full_coefficients(&self) -> Vec<f64> {
        let mut full = vec![0.0; self.labels.len()];
        for (&j, &b) in self.retained.iter().zip(&self.coefficients) {
            full[j] = b;
        }
        full
    }

    pub fn coefficient(&self, label: &str) -> Option<f64> {
        let j = self.labels.iter().position(|l| l == label)?;
        let k = self.retained.iter().position(|&r| r == j)?;
        Some(self.coefficients[k])
    }

    pub fn std_error(&self, label: &str) -> Option<f64> {
        let j = self.labels.iter().position(|l| l == label)?;
        let k = self.retained.iter().position(|&r| r == j)?;
        Some(self.covariance[k][k].sqrt())
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let r = self.retained.len();
        DMatrix::from_fn(r, r, |i, j| self.covariance[i][j])
    }
}

pub fn poisson_deviance(y: &[f64], mu: &[f64]) -> f64 {
    2.0 * y
        .iter()
        .zip(mu)
        .map(|(&yi, &mi)| if yi > 0.0 { yi * (yi / mi).ln() - (yi - mi) } else { mi })
        .sum::<f64>()
}

/// `sum y ln mu - mu - ln y!`, `-inf` if some `mu == 0` meets `y > 0`.
pub fn poisson_log_likelihood(y: &[f64], mu: &[f64]) -> f64 {
    let mut ll = 0.0;
    for (&yi, &mi) in y.iter().zip(mu) {
        if yi > 0.0 {
            if mi <= 0.0 {
                return f64::NEG_INFINITY;
            }
            ll += yi * mi.ln() - ln_gamma(yi + 1.0);
        }
        ll -= mi;
    }
    ll
}

fn check_inputs(x: &DesignMatrix, y: &[f64], offset: &[f64]) -> Result<(), GlmError> {
    if y.len() != x.nrows() || offset.len() != x.nrows() {
        return Err(GlmError::Shape(format!(
            "design has {} rows, response {}, offset {}",
            x.nrows(),
            y.len(),
            offset.len()
        )));
    }
    if let Some((row, &value)) = y.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
        return Err(GlmError::BadResponse { row, value });
    }
    if let Some(row) = offset.iter().position(|v| !v.is_finite()) {
        return Err(GlmError::BadOffset { row });
    }
    Ok(())
}

/// Weighted design `sqrt(w) X` over the chosen columns.
fn weighted_matrix(x: &DesignMatrix, cols: &[usize], sqrt_w: &[f64]) -> DMatrix<f64> {
    let n = x.nrows();
    let data = x.x.as_slice();
    let mut out = Vec::with_capacity(n * cols.len());
    for &j in cols {
        out.extend(data[j * n..(j + 1) * n].iter().zip(sqrt_w).map(|(a, w)| a * w));
    }
    DMatrix::from_vec(n, cols.len(), out)
}

/// Contiguous copy of the chosen columns.
fn select_columns(x: &DesignMatrix, cols: &[usize]) -> Vec<f64> {
    let n = x.nrows();
    let data = x.x.as_slice();
    let mut out = Vec::with_capacity(n * cols.len());
    for &j in cols {
        out.extend_from_slice(&data[j * n..(j + 1) * n]);
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (u, v) in ca.by_ref().zip(cb.by_ref()) {
        for k in 0..8 {
            acc[k] += u[k] * v[k];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(u, v)| u * v).sum();
    acc.iter().sum::<f64>() + tail
}

/// `X' W X` and `X' wz` from the column-major `X` with `q` columns.
fn weighted_gram(cols: &[f64], q: usize, w: &[f64], wz: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let n = w.len();
    let mut g = DMatrix::zeros(q, q);
    let mut b = DVector::zeros(q);
    let mut wx = vec![0.0; n];
    for j in 0..q {
        let cj = &cols[j * n..(j + 1) * n];
        for ((o, c), wi) in wx.iter_mut().zip(cj).zip(w) {
            *o = c * wi;
        }
        b[j] = dot(cj, wz);
        for k in j..q {
            let v = dot(&wx, &cols[k * n..(k + 1) * n]);
            g[(j, k)] = v;
            g[(k, j)] = v;
        }
    }
    (g, b)
}

/// Fits a Poisson GLM with log link and the given log-scale offset.
///
/// Starts from `mu = y + 0.5`. Columns that are linearly dependent on earlier
/// ones at the starting weights are aliased and left out. Halves the step up
/// to ten times when the deviance rises; three consecutive failed halvings
/// abort with [`GlmError::NonConvergence`].
pub fn fit_poisson(x: &DesignMatrix, y: &[f64], offset: &[f64]) -> Result<GlmFit, GlmError> {
    check_inputs(x, y, offset)?;
    let n = x.nrows();
    let p = x.ncols();
    if p == 0 {
        return Err(GlmError::Empty);
    }

    let mut mu: Vec<f64> = y.iter().map(|v| v + 0.5).collect();
    let mut eta: Vec<f64> = mu.iter().map(|m| m.ln()).collect();

    let sqrt_w: Vec<f64> = mu.iter().map(|m| m.sqrt()).collect();
    let all: Vec<usize> = (0..p).collect();
    let probe = PivotedQr::new(weighted_matrix(x, &all, &sqrt_w).as_slice().to_vec(), n, p, ALIAS_TOL);
    let mut retained: Vec<usize> = probe.retained().to_vec();
    retained.sort_unstable();
    if retained.is_empty() {
        return Err(GlmError::Empty);
    }

    let mut beta_full = vec![0.0; p];
    let mut dev_old = poisson_deviance(y, &mu);
    let mut trace = vec![dev_old];
    let mut failed = 0;
    let mut step_norm = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    let mut rows = select_columns(x, &retained);
    for iter in 1..=MAX_IRLS_ITER {
        iterations = iter;
        // first step solves for beta from the working response; later steps
        // solve for the increment, which keeps round-off from accumulating
        let wz: Vec<f64> = if iter == 1 {
            (0..n).map(|i| mu[i] * (eta[i] - offset[i]) + (y[i] - mu[i])).collect()
        } else {
            (0..n).map(|i| y[i] - mu[i]).collect()
        };
        let (info, rhs) = weighted_gram(&rows, retained.len(), &mu, &wz);
        let Some(chol) = info.cholesky() else {
            let sqrt_w: Vec<f64> = mu.iter().map(|m| m.sqrt()).collect();
            let xw = weighted_matrix(x, &retained, &sqrt_w);
            let qr = PivotedQr::new(xw.as_slice().to_vec(), n, retained.len(), ALIAS_TOL);
            if qr.rank() < retained.len() {
                let keep: Vec<usize> = qr.retained().iter().map(|&k| retained[k]).collect();
                retained = keep;
                retained.sort_unstable();
                rows = select_columns(x, &retained);
                if iter > 1 {
                    for (j, b) in beta_full.iter_mut().enumerate() {
                        if !retained.contains(&j) {
                            *b = 0.0;
                        }
                    }
                    eta = x.linear_predictor(&beta_full, offset);
                    mu = eta.iter().map(|e| e.exp()).collect();
                    dev_old = poisson_deviance(y, &mu);
                }
                continue;
            }
            return Err(GlmError::NonConvergence {
                iterations: iter,
                trace,
            });
        };
        let sol = chol.solve(&rhs);
        let mut candidate = if iter == 1 { vec![0.0; p] } else { beta_full.clone() };
        for (k, &col) in retained.iter().enumerate() {
            candidate[col] += sol[k];
        }

        let mut eta_new = x.linear_predictor(&candidate, offset);
        let mut mu_new: Vec<f64> = eta_new.iter().map(|e| e.exp()).collect();
        let mut dev_new = poisson_deviance(y, &mu_new);

        // the starting mu is not a fitted model, so the first step is never damped
        if iter > 1 {
            let mut halvings = 0;
            while !(dev_new.is_finite() && dev_new <= dev_old) && halvings < MAX_HALVINGS {
                for (c, b) in candidate.iter_mut().zip(&beta_full) {
                    *c = 0.5 * (*c + b);
                }
                eta_new = x.linear_predictor(&candidate, offset);
                mu_new = eta_new.iter().map(|e| e.exp()).collect();
                dev_new = poisson_deviance(y, &mu_new);
                halvings += 1;
            }
            if !(dev_new.is_finite() && dev_new <= dev_old) {
                failed += 1;
                trace.push(dev_new);
                if failed >= MAX_FAILED_DAMPING || !dev_new.is_finite() {
                    return Err(GlmError::NonConvergence {
                        iterations: iter,
                        trace,
                    });
                }
            } else {
                failed = 0;
            }
        } else if !dev_new.is_finite() {
            trace.push(dev_new);
            return Err(GlmError::NonConvergence {
                iterations: iter,
                trace,
            });
        }

        step_norm = candidate
            .iter()
            .zip(&beta_full)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        beta_full = candidate;
        eta = eta_new;
        mu = mu_new;
        if trace.last() != Some(&dev_new) {
            trace.push(dev_new);
        }
        let rel = (dev_new - dev_old).abs() / (dev_new.abs() + 0.1);
        dev_old = dev_new;
        if iter > 1 && rel < DEVIANCE_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(GlmError::NonConvergence { iterations, trace });
    }

    let (info, _) = weighted_gram(&rows, retained.len(), &mu, &vec![0.0; n]);
    let cov = match info.cholesky() {
        Some(c) => c.inverse(),
        None => {
            let sqrt_w: Vec<f64> = mu.iter().map(|m| m.sqrt()).collect();
            let xw = weighted_matrix(x, &retained, &sqrt_w);
            let qr = PivotedQr::new(xw.as_slice().to_vec(), n, retained.len(), ALIAS_TOL);
            let unordered = qr.unscaled_covariance();
            let pos = qr.retained();
            let mut m = DMatrix::zeros(retained.len(), retained.len());
            for a in 0..pos.len() {
                for b in 0..pos.len() {
                    m[(pos[a], pos[b])] = unordered[(a, b)];
                }
            }
            m
        }
    };
    let r = retained.len();
    let covariance: Vec<Vec<f64>> = (0..r)
        .map(|i| (0..r).map(|j| 0.5 * (cov[(i, j)] + cov[(j, i)])).collect())
        .collect();

    let aliased = (0..p)
        .filter(|j| !retained.contains(j))
        .map(|j| x.labels[j].clone())
        .collect();
    Ok(GlmFit {
        labels: x.labels.clone(),
        coefficients: retained.iter().map(|&j| beta_full[j]).collect(),
        retained,
        aliased,
        covariance,
        deviance: dev_old,
        log_likelihood: poisson_log_likelihood(y, &mu),
        iterations,
        final_step_norm: step_norm,
        deviance_trace: trace,
    })
}

/// `exp(X beta + offset)` with aliased coefficients taken as zero.
pub fn predict_mean(fit: &GlmFit, x: &DesignMatrix, offset: &[f64]) -> Result<Vec<f64>, GlmError> {
    if x.ncols() != fit.labels.len() {
        return Err(GlmError::Shape(format!(
            "fit has {} columns, design has {}",
            fit.labels.len(),
            x.ncols()
        )));
    }
    if offset.len() != x.nrows() {
        return Err(GlmError::Shape(format!(
            "design has {} rows, offset {}",
            x.nrows(),
            offset.len()
        )));
    }
    Ok(x.linear_predictor(&fit.full_coefficients(), offset)
        .into_iter()
        .map(f64::exp)
        .collect())
}

/// Poisson log-likelihood of `y` under the fitted means for `x` and `offset`.
pub fn log_likelihood(fit: &GlmFit, x: &DesignMatrix, y: &[f64], offset: &[f64]) -> Result<f64, GlmError> {
    let mu = predict_mean(fit, x, offset)?;
    if y.len() != mu.len() {
        return Err(GlmError::Shape("response length".into()));
    }
    Ok(poisson_log_likelihood(y, &mu))
}

/// Score `X^T (y - mu)` over all columns.
pub fn score(x: &DesignMatrix, y: &[f64], mu: &[f64]) -> Vec<f64> {
    let r: DVector<f64> = DVector::from_iterator(y.len(), y.iter().zip(mu).map(|(a, b)| a - b));
    (x.matrix().transpose() * r).iter().copied().collect()
}
