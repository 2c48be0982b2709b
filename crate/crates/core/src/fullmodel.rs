//! Method III: joint maximum likelihood of the stratum death counts and the
//! diagnosis-to-death lag histogram, sharing one set of lag probabilities.
//!
//! Lag probabilities are parametrised per age band by additive log-ratios
//! against the band's most frequent month. The objective is maximised with
//! preconditioned L-BFGS started from the Method II fit.

use log::debug;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::apc::{ApcSpec, DEFAULT_DF, SCR_LABEL};
use crate::estimators::{usable_rows, Diagnostics, EstimateError, EstimateResult, Method};
use crate::glm::{fit_poisson, GlmFit};
use crate::lag::{
    estimate_lag_survival, mle_lag_params, months_elapsed, LagError, LagHistogram, LagParameters,
    LAG_LOGLIK_INCLUDES_MULTINOMIAL_COEFFICIENT,
};
use crate::optim::{minimize, LbfgsOptions};
use crate::registry::{apply_lag_offsets, MortalityCell, MortalityTable, ScreeningGroup};

pub const MAX_ITER: usize = 500;
/// Gradient tolerance relative to the total number of deaths.
pub const GRAD_TOL_REL: f64 = 1e-6;
/// Starting probability for months with no observed deaths.
pub const PROB_FLOOR: f64 = 1e-10;
const PRECOND_INV_PROB_CAP: f64 = 1e6;

/// Fitted parameters of the joint model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FullModelParams {
    pub labels: Vec<String>,
    pub coefficients: Vec<f64>,
    pub lag: LagParameters,
    pub screening_log_effect: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FullModelFit {
    pub spec: ApcSpec,
    pub params: FullModelParams,
    pub log_likelihood: f64,
    pub warm_start_log_likelihood: f64,
    pub iterations: usize,
    pub gradient_inf_norm: f64,
    pub excluded_rows: usize,
    pub warnings: Vec<String>,
    pub trace: Vec<f64>,
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    None,
    Old,
    New,
}

struct Problem {
    n: usize,
    r: usize,
    /// Retained design columns, column-major.
    x: Vec<f64>,
    log_py: Vec<f64>,
    y: Vec<f64>,
    kind: Vec<Kind>,
    band: Vec<usize>,
    delta: Vec<usize>,
    hist: Vec<Vec<f64>>,
    refs: Vec<usize>,
    /// Offset of each band's free logits in the parameter vector.
    band_start: Vec<usize>,
    constant: f64,
}

impl Problem {
    fn dim(&self) -> usize {
        self.band_start.last().copied().unwrap_or(self.r) + self.hist.last().map(|h| h.len() - 1).unwrap_or(0)
    }

    fn probabilities(&self, theta: &[f64]) -> Vec<Vec<f64>> {
        self.hist
            .iter()
            .enumerate()
            .map(|(b, h)| {
                let k = h.len();
                let start = self.band_start[b];
                let mut logits = Vec::with_capacity(k);
                let mut j = 0;
                for m in 0..k {
                    if m == self.refs[b] {
                        logits.push(0.0);
                    } else {
                        logits.push(theta[start + j]);
                        j += 1;
                    }
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut p: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
                let s: f64 = p.iter().sum();
                p.iter_mut().for_each(|v| *v /= s);
                p
            })
            .collect()
    }

    /// Joint log-likelihood and its gradient.
    fn eval(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let (n, r) = (self.n, self.r);
        let beta = &theta[..r];
        let mut eta = self.log_py.clone();
        for (j, b) in beta.iter().enumerate() {
            for (e, x) in eta.iter_mut().zip(&self.x[j * n..(j + 1) * n]) {
                *e += b * x;
            }
        }
        let probs = self.probabilities(theta);
        // survival l[delta] = sum_{m >= delta} p_m and its complement
        let surv: Vec<(Vec<f64>, Vec<f64>)> = probs
            .iter()
            .map(|p| {
                let k = p.len();
                let mut l = vec![0.0; k + 1];
                let mut one_minus = vec![0.0; k + 1];
                for d in (0..k).rev() {
                    l[d] = l[d + 1] + p[d];
                }
                for d in 1..=k {
                    one_minus[d] = one_minus[d - 1] + p[d - 1];
                }
                (l, one_minus)
            })
            .collect();

        let mut g_delta: Vec<Vec<f64>> = probs.iter().map(|p| vec![0.0; p.len() + 1]).collect();
        let mut resid = vec![0.0; n];
        let mut ll = self.constant;
        for i in 0..n {
            let y = self.y[i];
            let e = eta[i].exp();
            let (l, om) = &surv[self.band[i]];
            let d = self.delta[i];
            let share = match self.kind[i] {
                Kind::None => 1.0,
                Kind::Old => l[d],
                Kind::New => om[d],
            };
            if share <= 0.0 {
                if y > 0.0 {
                    return f64::NEG_INFINITY;
                }
                resid[i] = 0.0;
                continue;
            }
            let mu = e * share;
            ll += if y > 0.0 { y * (eta[i] + share.ln()) } else { 0.0 } - mu;
            resid[i] = y - mu;
            match self.kind[i] {
                Kind::None => {}
                Kind::Old => g_delta[self.band[i]][d] += y / share - e,
                Kind::New => g_delta[self.band[i]][d] += -y / share + e,
            }
        }
        for j in 0..r {
            grad[j] = self.x[j * n..(j + 1) * n].iter().zip(&resid).map(|(a, b)| a * b).sum();
        }
        for (b, p) in probs.iter().enumerate() {
            let h = &self.hist[b];
            let total: f64 = h.iter().sum();
            for (m, &c) in h.iter().enumerate() {
                if c > 0.0 {
                    ll += c * p[m].ln();
                }
            }
            // dLL/dp_m = sum_{delta <= m} G[delta]
            let mut acc = 0.0;
            let dp: Vec<f64> = (0..p.len())
                .map(|m| {
                    acc += g_delta[b][m];
                    acc
                })
                .collect();
            let mean: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            let mut j = self.band_start[b];
            for m in 0..p.len() {
                if m == self.refs[b] {
                    continue;
                }
                grad[j] = h[m] - total * p[m] + p[m] * (dp[m] - mean);
                j += 1;
            }
        }
        ll
    }
}

fn band_of(hist: &LagHistogram, age: i32) -> Result<usize, EstimateError> {
    hist.band_index(age as f64).map_err(|e| match e {
        LagError::NoBand(a) => EstimateError::Config(format!("age {a} is outside every lag band")),
        other => EstimateError::Lag(other),
    })
}

/// Maximises the joint likelihood. Without a warm start, a Method II style
/// fit with offsets from `hist` is used; without screened rows the model
/// reduces to the plain APC fit plus the lag multinomial.
pub fn fit_full_model(
    table: &MortalityTable,
    hist: &LagHistogram,
    warm: Option<(&ApcSpec, &GlmFit)>,
) -> Result<FullModelFit, EstimateError> {
    let method = Method::M3;
    let mle = mle_lag_params(hist)?;

    let mut warnings = Vec::new();
    let (rows, w) = usable_rows(table.cells(), false);
    warnings.extend(w);
    let mut kept: Vec<&MortalityCell> = Vec::with_capacity(rows.len());
    let mut structural = 0;
    for c in rows {
        let delta = match c.time_since_invitation {
            Some(t) => months_elapsed(t),
            None if c.group.is_screened() => {
                return Err(EstimateError::Input(format!(
                    "screened cell {} lacks time_since_invitation",
                    c.key()
                )))
            }
            None => 0,
        };
        let band = band_of(hist, c.age())?;
        let zero = match c.group {
            ScreeningGroup::NoScreening => false,
            ScreeningGroup::PostOld => delta >= hist.counts(band).len(),
            ScreeningGroup::PostNew => delta == 0,
        };
        if zero {
            structural += 1;
        } else {
            kept.push(c);
        }
    }
    if structural > 0 {
        let msg = format!(
            "{structural} structurally empty cells excluded (post_new at 0 months, post_old beyond the lag support)"
        );
        debug!("{msg}");
        warnings.push(msg);
    }
    let has_new = kept.iter().any(|c| c.group == ScreeningGroup::PostNew);

    let owned;
    let (spec, start) = match warm {
        Some((s, f)) => (s.clone(), f),
        None => {
            let lag = estimate_lag_survival(hist)?;
            let adjusted = apply_lag_offsets(
                &MortalityTable::from_cells(kept.iter().map(|c| (*c).clone()).collect()),
                &lag,
            )?;
            let cells: Vec<&MortalityCell> = adjusted.cells().iter().filter(|c| c.prop_target > 0.0).collect();
            let spec = ApcSpec::from_cells(cells.iter().copied(), DEFAULT_DF, has_new).map_err(EstimateError::Apc)?;
            let x = spec.design(cells.iter().copied()).map_err(EstimateError::Apc)?;
            let y: Vec<f64> = cells.iter().map(|c| c.cases).collect();
            let off: Vec<f64> = cells.iter().map(|c| c.person_years.ln() + c.prop_target.ln()).collect();
            owned = fit_poisson(&x, &y, &off).map_err(|e| match e {
                crate::glm::GlmError::NonConvergence { iterations, trace } => EstimateError::NonConvergence {
                    method,
                    detail: format!("warm-start IRLS stopped after {iterations} iterations"),
                    trace,
                },
                other => EstimateError::Glm(other),
            })?;
            (spec, &owned)
        }
    };

    let design = spec.design(kept.iter().copied()).map_err(EstimateError::Apc)?;
    let n = kept.len();
    let r = start.retained.len();
    let mut x = Vec::with_capacity(n * r);
    let data = design.matrix().as_slice();
    for &j in &start.retained {
        x.extend_from_slice(&data[j * n..(j + 1) * n]);
    }

    let bands = hist.bands().to_vec();
    let mut hist_counts = Vec::with_capacity(bands.len());
    let mut refs = Vec::with_capacity(bands.len());
    let mut band_start = Vec::with_capacity(bands.len());
    let mut theta0: Vec<f64> = start.coefficients.clone();
    for b in 0..bands.len() {
        let counts: Vec<f64> = hist.counts(b).iter().map(|&c| c as f64).collect();
        let reference = counts
            .iter()
            .enumerate()
            .fold(0, |best, (m, &c)| if c > counts[best] { m } else { best });
        let p = mle.probs(b);
        let floored: Vec<f64> = p.iter().map(|&v| v.max(PROB_FLOOR)).collect();
        let s: f64 = floored.iter().sum();
        let p_ref = floored[reference] / s;
        band_start.push(theta0.len());
        for (m, &v) in floored.iter().enumerate() {
            if m != reference {
                theta0.push((v / s / p_ref).ln());
            }
        }
        refs.push(reference);
        hist_counts.push(counts);
    }

    let y: Vec<f64> = kept.iter().map(|c| c.cases).collect();
    let constant = -y.iter().filter(|&&v| v > 0.0).map(|&v| ln_gamma(v + 1.0)).sum::<f64>();
    let problem = Problem {
        n,
        r,
        x,
        log_py: kept.iter().map(|c| c.person_years.ln()).collect(),
        y,
        kind: kept
            .iter()
            .map(|c| match c.group {
                ScreeningGroup::NoScreening => Kind::None,
                ScreeningGroup::PostOld => Kind::Old,
                ScreeningGroup::PostNew => Kind::New,
            })
            .collect(),
        band: kept.iter().map(|c| band_of(hist, c.age())).collect::<Result<_, _>>()?,
        delta: kept
            .iter()
            .map(|c| c.time_since_invitation.map(months_elapsed).unwrap_or(0))
            .collect(),
        hist: hist_counts,
        refs,
        band_start,
        constant,
    };
    debug_assert_eq!(problem.dim(), theta0.len());

    let mut g0 = vec![0.0; theta0.len()];
    let ll0 = problem.eval(&theta0, &mut g0);
    if !ll0.is_finite() {
        return Err(EstimateError::StartValue(
            "joint log-likelihood is not finite at the Method II start".into(),
        ));
    }

    let p0 = problem.probabilities(&theta0);
    let cov = start.covariance_matrix();
    let precond = |g: &[f64], out: &mut [f64]| {
        for i in 0..r {
            out[i] = (0..r).map(|j| cov[(i, j)] * g[j]).sum();
        }
        for (b, p) in p0.iter().enumerate() {
            let total: f64 = problem.hist[b].iter().sum::<f64>().max(1.0);
            let p_ref = p[problem.refs[b]];
            let start = problem.band_start[b];
            let k = p.len() - 1;
            let gs: f64 = g[start..start + k].iter().sum();
            let mut j = 0;
            for (m, &pm) in p.iter().enumerate() {
                if m == problem.refs[b] {
                    continue;
                }
                let inv = (1.0 / pm).min(PRECOND_INV_PROB_CAP);
                out[start + j] = (inv * g[start + j] + gs / p_ref) / total;
                j += 1;
            }
        }
    };

    let total_deaths = table.total_cases() + hist.total() as f64;
    let opts = LbfgsOptions {
        max_iter: MAX_ITER,
        grad_tol: GRAD_TOL_REL * total_deaths.max(1.0),
        ..Default::default()
    };
    let res = minimize(
        |t, g| {
            let ll = problem.eval(t, g);
            g.iter_mut().for_each(|v| *v = -*v);
            -ll
        },
        &theta0,
        precond,
        &opts,
    );
    let trace: Vec<f64> = res.trace.iter().map(|f| -f).collect();
    if !res.converged {
        return Err(EstimateError::NonConvergence {
            method,
            detail: format!(
                "gradient norm {:.3e} after {} iterations (tolerance {:.3e})",
                res.grad_inf_norm, res.iterations, opts.grad_tol
            ),
            trace,
        });
    }

    let probs = problem.probabilities(&res.x);
    let lag = LagParameters::new(bands, probs)?;
    let labels: Vec<String> = start.retained.iter().map(|&j| design.labels()[j].clone()).collect();
    let coefficients = res.x[..r].to_vec();
    let screening_log_effect = labels.iter().position(|l| l == SCR_LABEL).map(|k| coefficients[k]);
    Ok(FullModelFit {
        spec,
        params: FullModelParams {
            labels,
            coefficients,
            lag,
            screening_log_effect,
        },
        log_likelihood: -res.f,
        warm_start_log_likelihood: ll0,
        iterations: res.iterations,
        gradient_inf_norm: res.grad_inf_norm,
        excluded_rows: table.len() - kept.len(),
        warnings,
        trace,
    })
}

/// Joint-likelihood estimate warm-started from a Method II result.
pub fn estimate_method3(
    table: &MortalityTable,
    hist: &LagHistogram,
    warm_start: &EstimateResult,
) -> Result<EstimateResult, EstimateError> {
    if hist.total() == 0 {
        return Err(EstimateError::Input("lag histogram has no deaths".into()));
    }
    if !table.cells().iter().any(|c| c.group == ScreeningGroup::PostNew) {
        return Err(EstimateError::Input(
            "screening effect undefined without post_new cells".into(),
        ));
    }
    let model = warm_start
        .model
        .as_ref()
        .filter(|_| warm_start.method == Method::M2)
        .ok_or_else(|| EstimateError::StartValue("warm start must be a Method II fit with its model".into()))?;
    let fit = fit_full_model(table, hist, Some((&model.spec, &model.fit)))?;
    let theta = fit
        .params
        .screening_log_effect
        .ok_or_else(|| EstimateError::Input("screening indicator is aliased with the APC terms".into()))?;
    let diag = Diagnostics {
        iterations: fit.iterations,
        log_likelihood: Some(fit.log_likelihood),
        warm_start_log_likelihood: Some(fit.warm_start_log_likelihood),
        gradient_inf_norm: Some(fit.gradient_inf_norm),
        lag_loglik_includes_multinomial_coefficient: Some(LAG_LOGLIK_INCLUDES_MULTINOMIAL_COEFFICIENT),
        aliased: model.fit.aliased.clone(),
        excluded_rows: fit.excluded_rows,
        warnings: fit.warnings,
        ..Default::default()
    };
    Ok(EstimateResult::new(Method::M3, theta, diag))
}
