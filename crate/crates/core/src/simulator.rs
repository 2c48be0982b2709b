//! Synthetic registry generator: stratum deaths drawn from a known
//! age-period-cohort-region rate surface, a known lag distribution and a
//! known screening rate ratio.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, LogNormal};
use thiserror::Error;

use crate::lag::{estimate_lag_survival, multinomial, AgeBand, LagError, LagHistogram, LagParameters};
use crate::registry::{
    split_risk_time, MortalityCell, MortalityTable, RawCell, RawTable, RegistryError, Rollout, RolloutSchedule,
    ScreeningGroup,
};
use crate::spline::{basis_row, knots_from_data, KnotSet, SplineError};

pub const NORDIC_SMALL: &str = include_str!("../scenarios/nordic-small.toml");

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("scenario file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Lag(#[from] LagError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub name: String,
    /// First invitation date; absent for a never-screened region.
    pub rollout: Option<f64>,
    #[serde(default)]
    pub log_rate_offset: f64,
    /// Relative population size.
    #[serde(default = "one")]
    pub population: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagBandSpec {
    pub age_lo: f64,
    pub age_hi: f64,
    pub median_months: f64,
    pub sigma: f64,
}

/// Log-rate surface: intercept plus natural-spline age and period terms
/// (knots from the scenario grid) and a linear cohort trend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSurface {
    pub log_intercept: f64,
    pub age: Vec<f64>,
    pub period: Vec<f64>,
    /// Change in log rate per birth year, centred on the middle cohort.
    #[serde(default)]
    pub cohort_slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub first_year: i32,
    pub last_year: i32,
    pub min_age: i32,
    pub max_age: i32,
    pub invitation_min_age: f64,
    pub invitation_max_age: f64,
    pub true_screening_ratio: f64,
    /// Person-years per (year, age) cell for a region of population 1.
    pub person_years_per_cell: f64,
    /// If set, person-years are rescaled so that expected deaths in screened
    /// strata equal this.
    #[serde(default)]
    pub target_screened_deaths: Option<f64>,
    #[serde(default = "default_df")]
    pub spline_df: usize,
    pub lag_max_months: usize,
    /// Share of never-screened deaths whose lag enters the histogram.
    #[serde(default = "one")]
    pub lag_sample_fraction: f64,
    pub rates: RateSurface,
    pub regions: Vec<RegionSpec>,
    pub lag_bands: Vec<LagBandSpec>,
}

fn default_df() -> usize {
    5
}

/// What the simulation was generated from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Truth {
    pub scenario: String,
    pub seed: Option<u64>,
    pub true_screening_ratio: f64,
    pub person_year_scale: f64,
    pub expected_screened_deaths: f64,
    pub lag_bands: Vec<AgeBand>,
    pub lag_probabilities: Vec<Vec<f64>>,
    pub lag_survival: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    /// Split analysis table with offsets from the simulated histogram.
    pub table: MortalityTable,
    pub raw: RawTable,
    pub schedule: RolloutSchedule,
    pub hist: LagHistogram,
    pub truth: Truth,
}

/// Expected deaths of one (region, year, cohort) stratum.
#[derive(Debug, Clone)]
struct Stratum {
    year: i32,
    cohort: i32,
    region: usize,
    none_py: f64,
    screened_py: f64,
    tsi: Option<f64>,
    none_mean: f64,
    old_mean: f64,
    new_mean: f64,
    /// Survival of the true lag distribution at the stratum's lag.
    l: f64,
    band: usize,
}

impl Scenario {
    pub fn from_toml_str(s: &str) -> Result<Self, SimError> {
        let sc: Scenario = toml::from_str(s)?;
        sc.validate()?;
        Ok(sc)
    }

    /// A built-in scenario by name, or a TOML file path.
    pub fn load(name_or_path: &str) -> Result<Self, SimError> {
        match name_or_path {
            "nordic-small" => Self::from_toml_str(NORDIC_SMALL),
            path => Self::from_toml_str(&std::fs::read_to_string(path)?),
        }
    }

    pub fn nordic_small() -> Self {
        Self::from_toml_str(NORDIC_SMALL).expect("built-in scenario is valid")
    }

    pub fn with_ratio(mut self, ratio: f64) -> Self {
        self.true_screening_ratio = ratio;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.first_year > self.last_year {
            return bad(format!(
                "first_year {} after last_year {}",
                self.first_year, self.last_year
            ));
        }
        if self.min_age > self.max_age {
            return bad(format!("min_age {} above max_age {}", self.min_age, self.max_age));
        }
        if !(self.true_screening_ratio > 0.0 && self.true_screening_ratio.is_finite()) {
            return bad(format!(
                "true_screening_ratio must be positive, got {}",
                self.true_screening_ratio
            ));
        }
        if !(self.person_years_per_cell > 0.0) {
            return bad("person_years_per_cell must be positive".into());
        }
        if let Some(t) = self.target_screened_deaths {
            if !(t > 0.0) {
                return bad("target_screened_deaths must be positive".into());
            }
        }
        if !(self.lag_sample_fraction > 0.0) {
            return bad("lag_sample_fraction must be positive".into());
        }
        if self.rates.age.len() != self.spline_df || self.rates.period.len() != self.spline_df {
            return bad(format!(
                "age and period coefficient lists need {} entries",
                self.spline_df
            ));
        }
        if self.regions.is_empty() {
            return bad("no regions".into());
        }
        for (i, r) in self.regions.iter().enumerate() {
            if self.regions[..i].iter().any(|o| o.name == r.name) {
                return bad(format!("region `{}` listed twice", r.name));
            }
            if !(r.population > 0.0) {
                return bad(format!("region `{}` population must be positive", r.name));
            }
            if let Some(t) = r.rollout {
                if t < self.first_year as f64 {
                    return bad(format!("region `{}` rollout {t} before the study window", r.name));
                }
            }
        }
        if self.lag_bands.is_empty() {
            return bad("no lag bands".into());
        }
        for b in &self.lag_bands {
            AgeBand::new(b.age_lo, b.age_hi)?;
            if !(b.median_months > 0.0 && b.sigma > 0.0) {
                return bad("lag median and sigma must be positive".into());
            }
        }
        let bands = self.bands()?;
        for a in self.min_age..=self.max_age {
            if !bands.iter().any(|b| b.contains(a as f64)) {
                return bad(format!("age {a} is outside every lag band"));
            }
        }
        Ok(())
    }

    fn bands(&self) -> Result<Vec<AgeBand>, SimError> {
        self.lag_bands
            .iter()
            .map(|b| AgeBand::new(b.age_lo, b.age_hi).map_err(SimError::from))
            .collect()
    }

    /// True lag probabilities per band over months `0..=lag_max_months`:
    /// a lognormal discretised to completed months and truncated.
    pub fn lag_parameters(&self) -> Result<LagParameters, SimError> {
        let mut probs = Vec::with_capacity(self.lag_bands.len());
        for b in &self.lag_bands {
            let d = LogNormal::new(b.median_months.ln(), b.sigma)
                .map_err(|e| SimError::Config(format!("lag distribution: {e}")))?;
            let mut p: Vec<f64> = (0..=self.lag_max_months)
                .map(|m| d.cdf(m as f64 + 1.0) - d.cdf(m as f64))
                .collect();
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= s);
            probs.push(p);
        }
        Ok(LagParameters::new(self.bands()?, probs)?)
    }

    pub fn schedule(&self) -> RolloutSchedule {
        let mut s = RolloutSchedule::default();
        for r in &self.regions {
            s.insert(
                &r.name,
                Rollout {
                    first_invitation: r.rollout,
                    min_age: self.invitation_min_age,
                    max_age: self.invitation_max_age,
                },
            )
            .expect("region names are unique");
        }
        s
    }

    fn knots(&self) -> Result<(KnotSet, KnotSet), SimError> {
        let years: Vec<f64> = (self.first_year..=self.last_year).map(f64::from).collect();
        let ages: Vec<f64> = (self.min_age..=self.max_age).map(f64::from).collect();
        Ok((
            knots_from_data(&ages, self.spline_df)?,
            knots_from_data(&years, self.spline_df)?,
        ))
    }

    /// Baseline log rate without screening.
    fn log_rate_fn(&self) -> Result<impl Fn(i32, i32, usize) -> f64 + '_, SimError> {
        let (age_knots, year_knots) = self.knots()?;
        let mid_cohort = 0.5 * ((self.first_year - self.max_age) + (self.last_year - self.min_age)) as f64;
        let df = self.spline_df;
        Ok(move |year: i32, cohort: i32, region: usize| {
            let mut buf = vec![0.0; df];
            let mut v = self.rates.log_intercept + self.regions[region].log_rate_offset;
            basis_row((year - cohort) as f64, &age_knots, &mut buf);
            v += buf.iter().zip(&self.rates.age).map(|(a, b)| a * b).sum::<f64>();
            basis_row(year as f64, &year_knots, &mut buf);
            v += buf.iter().zip(&self.rates.period).map(|(a, b)| a * b).sum::<f64>();
            v + self.rates.cohort_slope * (cohort as f64 - mid_cohort)
        })
    }

    /// Expected deaths for every stratum, before any person-year rescaling.
    fn strata(&self, py_scale: f64) -> Result<Vec<Stratum>, SimError> {
        let lag = self.lag_parameters()?;
        let survival = lag.survival();
        let schedule = self.schedule();
        let log_rate = self.log_rate_fn()?;
        let ratio = self.true_screening_ratio;
        let mut out = Vec::new();
        for (ri, region) in self.regions.iter().enumerate() {
            let rollout = schedule.get(&region.name).expect("schedule covers regions");
            for year in self.first_year..=self.last_year {
                for age in self.min_age..=self.max_age {
                    let cohort = year - age;
                    let py = self.person_years_per_cell * region.population * py_scale;
                    let frac = rollout.screened_fraction(cohort, year);
                    let tsi = (frac > 0.0)
                        .then(|| rollout.time_since_invitation(cohort, year))
                        .flatten();
                    let band = lag.band_index(age as f64)?;
                    let l = tsi.map(|t| survival.rho_at(age as f64, t)).transpose()?.unwrap_or(1.0);
                    let rate = log_rate(year, cohort, ri).exp();
                    let none_py = py * (1.0 - frac);
                    let screened_py = py * frac;
                    out.push(Stratum {
                        year,
                        cohort,
                        region: ri,
                        none_py,
                        screened_py,
                        tsi,
                        none_mean: rate * none_py,
                        old_mean: rate * screened_py * l,
                        new_mean: rate * screened_py * ratio * (1.0 - l),
                        l,
                        band,
                    });
                }
            }
        }
        Ok(out)
    }

    /// Person-year multiplier applied to meet `target_screened_deaths`.
    pub fn person_year_scale(&self) -> Result<f64, SimError> {
        let Some(target) = self.target_screened_deaths else {
            return Ok(1.0);
        };
        let screened: f64 = self.strata(1.0)?.iter().map(|s| s.old_mean + s.new_mean).sum();
        if !(screened > 0.0) {
            return Err(SimError::Config("scenario has no screened strata to scale to".into()));
        }
        Ok(target / screened)
    }

    fn truth(&self, seed: Option<u64>, scale: f64, strata: &[Stratum]) -> Result<Truth, SimError> {
        let lag = self.lag_parameters()?;
        let survival = lag.survival();
        let bands = lag.bands().to_vec();
        Ok(Truth {
            scenario: self.name.clone(),
            seed,
            true_screening_ratio: self.true_screening_ratio,
            person_year_scale: scale,
            expected_screened_deaths: strata.iter().map(|s| s.old_mean + s.new_mean).sum(),
            lag_probabilities: (0..bands.len()).map(|b| lag.probs(b).to_vec()).collect(),
            lag_survival: (0..bands.len()).map(|b| survival.table(b).to_vec()).collect(),
            lag_bands: bands,
        })
    }
}

fn cells_from(strata: &[Stratum], sc: &Scenario, l_as_offset: bool) -> Vec<MortalityCell> {
    let mut cells = Vec::new();
    for s in strata {
        let region = &sc.regions[s.region].name;
        if s.none_py > 0.0 {
            cells.push(MortalityCell::none(s.year, s.cohort, region, s.none_py, s.none_mean));
        }
        if s.screened_py > 0.0 {
            let old = MortalityCell {
                year: s.year,
                cohort: s.cohort,
                region: region.clone(),
                group: ScreeningGroup::PostOld,
                person_years: s.screened_py,
                cases: s.old_mean,
                time_since_invitation: s.tsi,
                prop_target: if l_as_offset { s.l } else { 1.0 },
                scr_indicator: 0,
            };
            let new = MortalityCell {
                group: ScreeningGroup::PostNew,
                cases: s.new_mean,
                prop_target: 1.0 - old.prop_target,
                scr_indicator: 1,
                ..old.clone()
            };
            cells.push(old);
            cells.push(new);
        }
    }
    cells
}

/// Noiseless table: `cases` holds expected deaths and `prop_target` the
/// true lag survival.
pub fn expected_cells(scenario: &Scenario) -> Result<MortalityTable, SimError> {
    let strata = scenario.strata(scenario.person_year_scale()?)?;
    Ok(MortalityTable::from_cells(cells_from(&strata, scenario, true)))
}

/// Histogram with `round(deaths_per_band * p)` deaths in each month.
pub fn expected_lag_histogram(scenario: &Scenario, deaths_per_band: f64) -> Result<LagHistogram, SimError> {
    let lag = scenario.lag_parameters()?;
    let counts = (0..lag.bands().len())
        .map(|b| {
            lag.probs(b)
                .iter()
                .map(|p| (p * deaths_per_band).round() as u64)
                .collect()
        })
        .collect();
    Ok(LagHistogram::new(lag.bands().to_vec(), counts)?)
}

/// Lag histogram of `deaths_per_band` deaths per band drawn from the true
/// lag distribution.
pub fn sample_lag_histogram(scenario: &Scenario, deaths_per_band: u64, seed: u64) -> Result<LagHistogram, SimError> {
    let lag = scenario.lag_parameters()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = (0..lag.bands().len())
        .map(|b| multinomial(deaths_per_band, lag.probs(b), &mut rng))
        .collect();
    Ok(LagHistogram::new(lag.bands().to_vec(), counts)?)
}

fn poisson<R: rand::Rng>(mean: f64, rng: &mut R) -> f64 {
    if mean > 0.0 {
        Poisson::new(mean).expect("positive finite mean").sample(rng)
    } else {
        0.0
    }
}

/// Draws one synthetic registry.
pub fn simulate(scenario: &Scenario, seed: u64) -> Result<SimOutput, SimError> {
    scenario.validate()?;
    let scale = scenario.person_year_scale()?;
    let strata = scenario.strata(scale)?;
    let lag = scenario.lag_parameters()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut raw = RawTable::default();
    let mut none_deaths = vec![0.0; lag.bands().len()];
    for s in &strata {
        let region = &scenario.regions[s.region].name;
        if s.none_py > 0.0 {
            let y = poisson(s.none_mean, &mut rng);
            none_deaths[s.band] += y;
            raw.cells.push(RawCell {
                year: s.year,
                cohort: s.cohort,
                region: region.clone(),
                screened: false,
                person_years: s.none_py,
                cases_pre_dx: y,
                cases_post_dx: 0.0,
            });
        }
        if s.screened_py > 0.0 {
            let old = poisson(s.old_mean, &mut rng);
            let new = poisson(s.new_mean, &mut rng);
            raw.cells.push(RawCell {
                year: s.year,
                cohort: s.cohort,
                region: region.clone(),
                screened: true,
                person_years: s.screened_py,
                cases_pre_dx: old,
                cases_post_dx: new,
            });
        }
    }

    let counts = none_deaths
        .iter()
        .enumerate()
        .map(|(b, &d)| {
            let n = (d * scenario.lag_sample_fraction).round() as u64;
            multinomial(n, lag.probs(b), &mut rng)
        })
        .collect();
    let hist = LagHistogram::new(lag.bands().to_vec(), counts)?;
    let schedule = scenario.schedule();
    let table = split_risk_time(&raw, &schedule, &estimate_lag_survival(&hist)?)?;
    Ok(SimOutput {
        table,
        raw,
        schedule,
        hist,
        truth: scenario.truth(Some(seed), scale, &strata)?,
    })
}

/// Truth record without drawing data.
pub fn truth(scenario: &Scenario) -> Result<Truth, SimError> {
    let scale = scenario.person_year_scale()?;
    let strata = scenario.strata(scale)?;
    scenario.truth(None, scale, &strata)
}
