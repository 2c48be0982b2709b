//! Screening-effect estimators: the diluted baseline (Method 0), the
//! standardized-mortality ratio (Method I) and the offset regression
//! (Method II). The full-likelihood Method III lives in [`crate::fullmodel`].

use std::fmt;
use std::str::FromStr;

use log::debug;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apc::{ApcError, ApcSpec, DEFAULT_DF, SCR_LABEL};
use crate::glm::{fit_poisson, predict_mean, GlmError, GlmFit};
use crate::lag::{estimate_lag_survival, LagError, LagHistogram, LagSurvival};
use crate::registry::{apply_lag_offsets, lag_offsets, MortalityCell, MortalityTable, RegistryError, ScreeningGroup};

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error("input error: {0}")]
    Input(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{method} did not converge: {detail}")]
    NonConvergence {
        method: Method,
        detail: String,
        trace: Vec<f64>,
    },
    #[error("invalid start values: {0}")]
    StartValue(String),
    #[error(transparent)]
    Glm(GlmError),
    #[error(transparent)]
    Apc(ApcError),
    #[error(transparent)]
    Lag(#[from] LagError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

impl EstimateError {
    fn from_glm(method: Method, e: GlmError) -> Self {
        match e {
            GlmError::NonConvergence { iterations, trace } => EstimateError::NonConvergence {
                method,
                detail: format!("IRLS stopped after {iterations} iterations"),
                trace,
            },
            other => EstimateError::Glm(other),
        }
    }

    fn from_apc(method: Method, e: ApcError) -> Self {
        match e {
            ApcError::Glm(g) => Self::from_glm(method, g),
            other => EstimateError::Apc(other),
        }
    }

    pub fn is_nonconvergence(&self) -> bool {
        matches!(self, EstimateError::NonConvergence { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    M0,
    M1,
    M2,
    M3,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::M0, Method::M1, Method::M2, Method::M3];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn description(self) -> &'static str {
        match self {
            Method::M0 => "Expected vs. observed post-invitation mortality, all diagnoses",
            Method::M1 => "Expected vs. observed mortality from post-invitation diagnoses",
            Method::M2 => "Poisson regression with lag-based offsets",
            Method::M3 => "Full likelihood of mortality and lag data",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "M{}", self.index())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().trim_start_matches(['m', 'M']) {
            "0" => Ok(Method::M0),
            "1" | "I" => Ok(Method::M1),
            "2" | "II" => Ok(Method::M2),
            "3" | "III" => Ok(Method::M3),
            _ => Err(format!("unknown method `{s}` (expected 0, 1, 2 or 3)")),
        }
    }
}

/// APC knots and regression fit, enough to reproduce predictions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedModel {
    pub spec: ApcSpec,
    pub fit: GlmFit,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observed_deaths: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expected_deaths: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_error_log: Option<f64>,
    pub iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_step_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deviance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_likelihood: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warm_start_log_likelihood: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gradient_inf_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lag_loglik_includes_multinomial_coefficient: Option<bool>,
    pub aliased: Vec<String>,
    pub excluded_rows: usize,
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failed_replicates: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_unreliable: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateResult {
    pub method: Method,
    pub screening_rate_ratio: f64,
    pub log_effect: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub ci_level: Option<f64>,
    pub replicates: Option<usize>,
    pub seed: Option<u64>,
    pub diagnostics: Diagnostics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<FittedModel>,
}

impl EstimateResult {
    pub fn new(method: Method, log_effect: f64, diagnostics: Diagnostics) -> Self {
        Self {
            method,
            screening_rate_ratio: log_effect.exp(),
            log_effect,
            ci_low: None,
            ci_high: None,
            ci_level: None,
            replicates: None,
            seed: None,
            diagnostics,
            model: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("estimate serializes")
    }
}

/// Cells with positive person-years, and optionally positive `prop_target`.
pub(crate) fn usable_rows(cells: &[MortalityCell], need_prop: bool) -> (Vec<&MortalityCell>, Vec<String>) {
    let mut kept = Vec::with_capacity(cells.len());
    let (mut zero_py, mut zero_prop) = (0, 0);
    for c in cells {
        if c.person_years <= 0.0 {
            zero_py += 1;
        } else if need_prop && c.prop_target <= 0.0 {
            zero_prop += 1;
        } else {
            kept.push(c);
        }
    }
    let mut warnings = Vec::new();
    if zero_py > 0 {
        warnings.push(format!("{zero_py} cells with zero person-years excluded"));
    }
    if zero_prop > 0 {
        warnings.push(format!("{zero_prop} cells with prop_target 0 excluded"));
    }
    for w in &warnings {
        debug!("{w}");
    }
    (kept, warnings)
}

fn log_offsets(rows: &[&MortalityCell], with_prop: bool) -> Vec<f64> {
    rows.iter()
        .map(|c| {
            let mut o = c.person_years.ln();
            if with_prop {
                o += c.prop_target.ln();
            }
            o
        })
        .collect()
}

/// Poisson APC fit on never-screened strata, extrapolated to screened pairs.
struct Baseline {
    model: FittedModel,
    /// Expected deaths without screening, one per PostNew cell of the table.
    expected: Vec<(usize, f64)>,
    warnings: Vec<String>,
    excluded: usize,
}

fn baseline(table: &MortalityTable, method: Method) -> Result<Baseline, EstimateError> {
    if !table.has_screened() {
        return Err(EstimateError::Input("table has no screened strata".into()));
    }
    let none: Vec<MortalityCell> = table
        .cells()
        .iter()
        .filter(|c| c.group == ScreeningGroup::NoScreening)
        .cloned()
        .collect();
    let (rows, warnings) = usable_rows(&none, false);
    let excluded = none.len() - rows.len();
    let spec =
        ApcSpec::from_cells(rows.iter().copied(), DEFAULT_DF, false).map_err(|e| EstimateError::from_apc(method, e))?;
    let x = spec
        .design(rows.iter().copied())
        .map_err(|e| EstimateError::from_apc(method, e))?;
    let y: Vec<f64> = rows.iter().map(|c| c.cases).collect();
    let fit = fit_poisson(&x, &y, &log_offsets(&rows, false)).map_err(|e| EstimateError::from_glm(method, e))?;

    let targets: Vec<(usize, &MortalityCell)> = table
        .cells()
        .iter()
        .enumerate()
        .filter(|(_, c)| c.group == ScreeningGroup::PostNew && c.person_years > 0.0)
        .collect();
    let xt = spec
        .design(targets.iter().map(|(_, c)| *c))
        .map_err(|e| EstimateError::from_apc(method, e))?;
    let off: Vec<f64> = targets.iter().map(|(_, c)| c.person_years.ln()).collect();
    let mu = predict_mean(&fit, &xt, &off).map_err(|e| EstimateError::from_glm(method, e))?;
    Ok(Baseline {
        model: FittedModel { spec, fit },
        expected: targets.iter().map(|(i, _)| *i).zip(mu).collect(),
        warnings,
        excluded,
    })
}

fn baseline_diagnostics(b: &Baseline, observed: f64, expected: f64) -> Diagnostics {
    Diagnostics {
        observed_deaths: Some(observed),
        expected_deaths: Some(expected),
        iterations: b.model.fit.iterations,
        final_step_norm: Some(b.model.fit.final_step_norm),
        deviance: Some(b.model.fit.deviance),
        log_likelihood: Some(b.model.fit.log_likelihood),
        aliased: b.model.fit.aliased.clone(),
        excluded_rows: b.excluded,
        warnings: b.warnings.clone(),
        ..Default::default()
    }
}

fn ratio_result(method: Method, observed: f64, expected: f64, b: Baseline) -> Result<EstimateResult, EstimateError> {
    if !(expected > 0.0) {
        return Err(EstimateError::Input(format!(
            "expected post-invitation deaths is {expected}; no post-invitation observation time"
        )));
    }
    if !(observed > 0.0) {
        return Err(EstimateError::Input("no observed post-invitation deaths".into()));
    }
    let diag = baseline_diagnostics(&b, observed, expected);
    let mut r = EstimateResult::new(method, (observed / expected).ln(), diag);
    r.model = Some(b.model);
    Ok(r)
}

/// Observed deaths after invitation, regardless of diagnosis timing, over
/// the expected count from the never-screened APC fit.
pub fn estimate_method0(table: &MortalityTable) -> Result<EstimateResult, EstimateError> {
    let b = baseline(table, Method::M0)?;
    let observed: f64 = table
        .cells()
        .iter()
        .filter(|c| c.group.is_screened())
        .map(|c| c.cases)
        .sum();
    let expected: f64 = b.expected.iter().map(|(_, m)| m).sum();
    ratio_result(Method::M0, observed, expected, b)
}

/// Observed deaths from post-invitation diagnoses over `sum M (1 - rho)`.
pub fn estimate_method1(table: &MortalityTable, lag: &LagSurvival) -> Result<EstimateResult, EstimateError> {
    let b = baseline(table, Method::M1)?;
    let mut expected = 0.0;
    for &(i, m) in &b.expected {
        let c = &table.cells()[i];
        let tsi = c
            .time_since_invitation
            .ok_or_else(|| EstimateError::Input(format!("screened cell {} lacks time_since_invitation", c.key())))?;
        let (_, share) = lag_offsets(lag, c.age(), tsi).map_err(|e| match e {
            LagError::NoBand(age) => EstimateError::Config(format!("age {age} is outside every lag band")),
            other => EstimateError::Lag(other),
        })?;
        expected += m * share;
    }
    method1_finish(table, expected, b)
}

/// Method I with `1 - rho` read from the PostNew cells' `prop_target`.
pub fn estimate_method1_from_offsets(table: &MortalityTable) -> Result<EstimateResult, EstimateError> {
    let b = baseline(table, Method::M1)?;
    let expected = b.expected.iter().map(|&(i, m)| m * table.cells()[i].prop_target).sum();
    method1_finish(table, expected, b)
}

fn method1_finish(table: &MortalityTable, expected: f64, b: Baseline) -> Result<EstimateResult, EstimateError> {
    if !(expected > 0.0) {
        return Err(EstimateError::Input(
            "expected deaths from post-invitation diagnoses is zero (degenerate denominator)".into(),
        ));
    }
    let observed: f64 = table
        .cells()
        .iter()
        .filter(|c| c.group == ScreeningGroup::PostNew)
        .map(|c| c.cases)
        .sum();
    ratio_result(Method::M1, observed, expected, b)
}

/// Joint Poisson fit over all strata with offset `ln(PY) + ln(prop_target)`
/// and a screening indicator.
pub fn estimate_method2(table: &MortalityTable) -> Result<EstimateResult, EstimateError> {
    let (rows, warnings) = usable_rows(table.cells(), true);
    let screened = rows.iter().filter(|c| c.group == ScreeningGroup::PostNew).count();
    if screened == 0 {
        return Err(EstimateError::Input(
            "no post_new cells with positive prop_target; screened data is required".into(),
        ));
    }
    let new_deaths: f64 = rows
        .iter()
        .filter(|c| c.group == ScreeningGroup::PostNew)
        .map(|c| c.cases)
        .sum();
    if !(new_deaths > 0.0) {
        return Err(EstimateError::Input("no deaths from post-invitation diagnoses".into()));
    }
    let m = Method::M2;
    let spec =
        ApcSpec::from_cells(rows.iter().copied(), DEFAULT_DF, true).map_err(|e| EstimateError::from_apc(m, e))?;
    let x = spec
        .design(rows.iter().copied())
        .map_err(|e| EstimateError::from_apc(m, e))?;
    let y: Vec<f64> = rows.iter().map(|c| c.cases).collect();
    let fit = fit_poisson(&x, &y, &log_offsets(&rows, true)).map_err(|e| EstimateError::from_glm(m, e))?;
    let theta = fit
        .coefficient(SCR_LABEL)
        .ok_or_else(|| EstimateError::Input("screening indicator is aliased with the APC terms".into()))?;
    let diag = Diagnostics {
        std_error_log: fit.std_error(SCR_LABEL),
        iterations: fit.iterations,
        final_step_norm: Some(fit.final_step_norm),
        deviance: Some(fit.deviance),
        log_likelihood: Some(fit.log_likelihood),
        aliased: fit.aliased.clone(),
        excluded_rows: table.len() - rows.len(),
        warnings,
        ..Default::default()
    };
    let mut r = EstimateResult::new(m, theta, diag);
    r.model = Some(FittedModel { spec, fit });
    Ok(r)
}

/// Runs one method end to end. With a lag histogram the lag survival is
/// re-estimated and the screened offsets recomputed first.
pub fn estimate(
    method: Method,
    table: &MortalityTable,
    hist: Option<&LagHistogram>,
) -> Result<EstimateResult, EstimateError> {
    let (table, lag) = match hist {
        Some(h) if method != Method::M0 => {
            let lag = estimate_lag_survival(h)?;
            (apply_lag_offsets(table, &lag)?, Some(lag))
        }
        _ => (table.clone(), None),
    };
    match method {
        Method::M0 => estimate_method0(&table),
        Method::M1 => match &lag {
            Some(l) => estimate_method1(&table, l),
            None => estimate_method1_from_offsets(&table),
        },
        Method::M2 => estimate_method2(&table),
        Method::M3 => {
            let hist = hist.ok_or_else(|| EstimateError::Config("method 3 requires a lag histogram".into()))?;
            let warm = estimate_method2(&table)?;
            crate::fullmodel::estimate_method3(&table, hist, &warm)
        }
    }
}
