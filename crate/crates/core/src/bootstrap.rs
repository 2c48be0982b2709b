//! Parametric bootstrap: cell counts redrawn as Poisson around the observed
//! counts, lag histograms redrawn as multinomial per band, and the whole
//! estimation pipeline re-run on every replicate.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::estimators::{estimate, EstimateError, EstimateResult, Method};
use crate::lag::LagHistogram;
use crate::registry::MortalityTable;

/// Share of failed replicates above which the interval is flagged.
pub const MAX_FAILURE_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
    pub ci_level: f64,
    pub jobs: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: 1000,
            seed: 0,
            ci_level: 0.95,
            jobs: 1,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<(), EstimateError> {
        if self.replicates < 2 {
            return Err(EstimateError::Config(format!(
                "bootstrap needs at least 2 replicates, got {}",
                self.replicates
            )));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(EstimateError::Config(format!(
                "ci level {} outside (0, 1)",
                self.ci_level
            )));
        }
        if self.jobs == 0 {
            return Err(EstimateError::Config("jobs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replicate {
    pub replicate: usize,
    pub estimate: Option<f64>,
    pub converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct BootstrapOutput {
    pub result: EstimateResult,
    pub replicates: Vec<Replicate>,
}

/// Random stream of replicate `index`, independent of scheduling.
pub fn replicate_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Table with every count redrawn as Poisson with mean equal to it.
pub fn resample_table<R: rand::Rng>(table: &MortalityTable, rng: &mut R) -> MortalityTable {
    let cases: Vec<f64> = table
        .cells()
        .iter()
        .map(|c| {
            if c.cases > 0.0 {
                Poisson::new(c.cases).expect("positive finite mean").sample(rng)
            } else {
                0.0
            }
        })
        .collect();
    table.with_cases(&cases)
}

/// Type-7 quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Point estimate with a percentile interval from `cfg.replicates` redraws.
pub fn bootstrap_estimate(
    method: Method,
    table: &MortalityTable,
    hist: Option<&LagHistogram>,
    cfg: &BootstrapConfig,
) -> Result<BootstrapOutput, EstimateError> {
    cfg.validate()?;
    let mut result = estimate(method, table, hist)?;

    let run = |i: usize| -> Replicate {
        let mut rng = replicate_rng(cfg.seed, i);
        let t = resample_table(table, &mut rng);
        let h = hist.map(|h| h.resample(&mut rng));
        match estimate(method, &t, h.as_ref()) {
            Ok(r) if r.screening_rate_ratio.is_finite() => Replicate {
                replicate: i,
                estimate: Some(r.screening_rate_ratio),
                converged: true,
                error: None,
            },
            Ok(_) => Replicate {
                replicate: i,
                estimate: None,
                converged: false,
                error: Some("non-finite estimate".into()),
            },
            Err(e) => Replicate {
                replicate: i,
                estimate: None,
                converged: false,
                error: Some(e.to_string()),
            },
        }
    };
    let replicates: Vec<Replicate> = if cfg.jobs == 1 {
        (0..cfg.replicates).map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| EstimateError::Config(format!("thread pool: {e}")))?;
        pool.install(|| (0..cfg.replicates).into_par_iter().map(run).collect())
    };

    let mut ok: Vec<f64> = replicates.iter().filter_map(|r| r.estimate).collect();
    ok.sort_by(|a, b| a.partial_cmp(b).expect("finite estimates"));
    let failed = cfg.replicates - ok.len();
    let fraction = failed as f64 / cfg.replicates as f64;
    let alpha = 1.0 - cfg.ci_level;
    if ok.len() >= 2 {
        result.ci_low = Some(quantile(&ok, alpha / 2.0));
        result.ci_high = Some(quantile(&ok, 1.0 - alpha / 2.0));
    }
    result.ci_level = Some(cfg.ci_level);
    result.replicates = Some(cfg.replicates);
    result.seed = Some(cfg.seed);
    result.diagnostics.failed_replicates = Some(failed);
    result.diagnostics.failure_fraction = Some(fraction);
    result.diagnostics.ci_unreliable = Some(fraction > MAX_FAILURE_FRACTION || ok.len() < 2);
    if fraction > MAX_FAILURE_FRACTION {
        let msg = format!("{failed} of {} replicates failed; interval unreliable", cfg.replicates);
        log::warn!("{msg}");
        result.diagnostics.warnings.push(msg);
    }
    Ok(BootstrapOutput { result, replicates })
}

/// `replicate, estimate, converged`, one row per replicate in index order.
pub fn write_replicates<W: Write>(replicates: &[Replicate], writer: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["replicate", "estimate", "converged"])?;
    for r in replicates {
        w.write_record([
            r.replicate.to_string(),
            r.estimate.map(|v| v.to_string()).unwrap_or_default(),
            r.converged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_type7() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert!((quantile(&v, 0.5) - 2.5).abs() < 1e-15);
        assert!((quantile(&v, 0.25) - 1.75).abs() < 1e-15);
    }

    #[test]
    fn replicate_streams_differ_and_repeat() {
        use rand::Rng;
        let a: u64 = replicate_rng(5, 0).random();
        let b: u64 = replicate_rng(5, 1).random();
        let a2: u64 = replicate_rng(5, 0).random();
        assert_ne!(a, b);
        assert_eq!(a, a2);
    }

    #[test]
    fn config_checks() {
        let cfg = BootstrapConfig {
            replicates: 1,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(EstimateError::Config(_))));
        let cfg = BootstrapConfig {
            ci_level: 1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
