//! Age-period-cohort-region design matrices.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::glm::{DesignMatrix, GlmError};
use crate::registry::{MortalityCell, ScreeningGroup};
use crate::spline::{basis_row, knots_from_data, KnotSet, SplineError};

/// Spline df used for each of age, period and cohort.
pub const DEFAULT_DF: usize = 5;

pub const SCR_LABEL: &str = "scr";

#[derive(Debug, thiserror::Error)]
pub enum ApcError {
    #[error("{term} spline: {source}")]
    Spline {
        term: &'static str,
        #[source]
        source: SplineError,
    },
    #[error("no rows to derive the model from")]
    Empty,
    #[error("region `{0}` was not seen when the model was specified")]
    UnknownRegion(String),
    #[error(transparent)]
    Glm(#[from] GlmError),
}

/// Knots, region levels and the optional screening column of an APC model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApcSpec {
    pub year_knots: KnotSet,
    pub cohort_knots: KnotSet,
    pub age_knots: KnotSet,
    pub regions: Vec<String>,
    pub screening_column: bool,
}

impl ApcSpec {
    /// Knots at quantiles of the distinct year, cohort and age values of
    /// `cells`; one indicator per region seen.
    pub fn from_cells<'a, I>(cells: I, df: usize, screening_column: bool) -> Result<Self, ApcError>
    where
        I: IntoIterator<Item = &'a MortalityCell>,
    {
        let mut years = Vec::new();
        let mut cohorts = Vec::new();
        let mut ages = Vec::new();
        let mut regions: Vec<String> = Vec::new();
        for c in cells {
            years.push(c.year as f64);
            cohorts.push(c.cohort as f64);
            ages.push(c.age() as f64);
            if !regions.contains(&c.region) {
                regions.push(c.region.clone());
            }
        }
        if years.is_empty() {
            return Err(ApcError::Empty);
        }
        regions.sort();
        let knots =
            |term: &'static str, v: &[f64]| knots_from_data(v, df).map_err(|source| ApcError::Spline { term, source });
        Ok(Self {
            year_knots: knots("year", &years)?,
            cohort_knots: knots("cohort", &cohorts)?,
            age_knots: knots("age", &ages)?,
            regions,
            screening_column,
        })
    }

    pub fn ncols(&self) -> usize {
        self.year_knots.df()
            + self.cohort_knots.df()
            + self.age_knots.df()
            + self.regions.len()
            + usize::from(self.screening_column)
    }

    pub fn labels(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.ncols());
        for (term, k) in [
            ("year", &self.year_knots),
            ("cohort", &self.cohort_knots),
            ("age", &self.age_knots),
        ] {
            for j in 1..=k.df() {
                out.push(format!("ns({term}){j}"));
            }
        }
        for r in &self.regions {
            out.push(format!("region:{r}"));
        }
        if self.screening_column {
            out.push(SCR_LABEL.to_string());
        }
        out
    }

    /// One design row per cell: year, cohort and age bases, region
    /// indicators, then `scr_indicator`.
    pub fn design<'a, I>(&self, cells: I) -> Result<DesignMatrix, ApcError>
    where
        I: IntoIterator<Item = &'a MortalityCell>,
        I::IntoIter: ExactSizeIterator,
    {
        let cells = cells.into_iter();
        let n = cells.len();
        let p = self.ncols();
        let mut x = DMatrix::<f64>::zeros(n, p);
        let mut buf = vec![0.0; p];
        for (i, c) in cells.enumerate() {
            buf.iter_mut().for_each(|v| *v = 0.0);
            let mut off = 0;
            for (v, k) in [
                (c.year as f64, &self.year_knots),
                (c.cohort as f64, &self.cohort_knots),
                (c.age() as f64, &self.age_knots),
            ] {
                basis_row(v, k, &mut buf[off..off + k.df()]);
                off += k.df();
            }
            let r = self
                .regions
                .iter()
                .position(|r| *r == c.region)
                .ok_or_else(|| ApcError::UnknownRegion(c.region.clone()))?;
            buf[off + r] = 1.0;
            off += self.regions.len();
            if self.screening_column {
                buf[off] = if c.group == ScreeningGroup::PostNew { 1.0 } else { 0.0 };
            }
            for (j, v) in buf.iter().enumerate() {
                x[(i, j)] = *v;
            }
        }
        Ok(DesignMatrix::new(x, self.labels())?)
    }
}
