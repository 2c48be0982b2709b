//! Lag from diagnosis to cause-specific death in the absence of screening.
//!
//! Lags are recorded in completed months `m = 0..=M`. The survival table
//! `rho[delta]` is the share of deaths whose lag is at least `delta` months,
//! so `rho[0] == 1` and `rho[delta] == 0` for `delta > M`.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The multinomial coefficient is constant in the lag parameters and is
/// left out of [`lag_log_likelihood`].
pub const LAG_LOGLIK_INCLUDES_MULTINOMIAL_COEFFICIENT: bool = false;

#[derive(Debug, Error)]
pub enum LagError {
    #[error("age band {0} has no deaths")]
    EmptyBand(AgeBand),
    #[error("age bands must be ordered and disjoint: {0} then {1}")]
    BandOrder(AgeBand, AgeBand),
    #[error("invalid age band [{0}, {1})")]
    BadBand(f64, f64),
    #[error("band {band}: expected {expected} lag entries, got {got}")]
    Length { band: AgeBand, expected: usize, got: usize },
    #[error("band {band}: probabilities must lie in [0, 1] and sum to 1 (sum = {sum})")]
    NotSimplex { band: AgeBand, sum: f64 },
    #[error("lag histogram and parameters disagree on bands or support")]
    Mismatch,
    #[error("no age band covers age {0}")]
    NoBand(f64),
    #[error("lag csv line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Half-open age interval `[lo, hi)` in years.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgeBand {
    pub lo: f64,
    pub hi: f64,
}

impl AgeBand {
    pub fn new(lo: f64, hi: f64) -> Result<Self, LagError> {
        if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
            return Err(LagError::BadBand(lo, hi));
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, age: f64) -> bool {
        age >= self.lo && age < self.hi
    }

    /// Ten-year bands covering `[lo, hi)`.
    pub fn ten_year(lo: f64, hi: f64) -> Vec<AgeBand> {
        let mut out = Vec::new();
        let mut a = lo;
        while a < hi {
            out.push(AgeBand {
                lo: a,
                hi: (a + 10.0).min(hi),
            });
            a += 10.0;
        }
        out
    }
}

impl fmt::Display for AgeBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.lo, self.hi)
    }
}

fn check_bands(bands: &[AgeBand]) -> Result<(), LagError> {
    for b in bands {
        AgeBand::new(b.lo, b.hi)?;
    }
    for w in bands.windows(2) {
        if w[1].lo < w[0].hi {
            return Err(LagError::BandOrder(w[0], w[1]));
        }
    }
    Ok(())
}

fn find_band(bands: &[AgeBand], age: f64) -> Result<usize, LagError> {
    bands.iter().position(|b| b.contains(age)).ok_or(LagError::NoBand(age))
}

/// Completed months elapsed after `years` years.
pub fn months_elapsed(years: f64) -> usize {
    if years <= 0.0 {
        0
    } else {
        // guard against 0.5 * 12 landing at 5.999999
        (years * 12.0 + 1e-9).floor() as usize
    }
}

/// Draws `n` items over categories with the given nonnegative weights,
/// by sequential conditional binomials.
pub fn multinomial<R: Rng + ?Sized>(n: u64, weights: &[f64], rng: &mut R) -> Vec<u64> {
    let mut remaining = n;
    let mut mass_left: f64 = weights.iter().filter(|w| **w > 0.0).sum();
    let last = weights.iter().rposition(|w| *w > 0.0);
    weights
        .iter()
        .enumerate()
        .map(|(k, &w)| {
            if remaining == 0 || w <= 0.0 {
                return 0;
            }
            if Some(k) == last {
                let all = remaining;
                remaining = 0;
                return all;
            }
            let p = (w / mass_left).min(1.0);
            mass_left -= w;
            let draw = Binomial::new(remaining, p)
                .expect("binomial probability in [0, 1]")
                .sample(rng);
            remaining -= draw;
            draw
        })
        .collect()
}

/// Deaths by completed-month lag, per age band.
#[derive(Debug, Clone, PartialEq)]
pub struct LagHistogram {
    bands: Vec<AgeBand>,
    counts: Vec<Vec<u64>>,
}

impl LagHistogram {
    /// Shorter count vectors are padded with zeros to a common support.
    pub fn new(bands: Vec<AgeBand>, mut counts: Vec<Vec<u64>>) -> Result<Self, LagError> {
        check_bands(&bands)?;
        if counts.len() != bands.len() {
            return Err(LagError::Mismatch);
        }
        let width = counts.iter().map(Vec::len).max().unwrap_or(0).max(1);
        for c in &mut counts {
            c.resize(width, 0);
        }
        Ok(Self { bands, counts })
    }

    pub fn bands(&self) -> &[AgeBand] {
        &self.bands
    }

    pub fn counts(&self, band: usize) -> &[u64] {
        &self.counts[band]
    }

    /// Largest representable lag `M` in months.
    pub fn max_lag(&self) -> usize {
        self.counts[0].len() - 1
    }

    pub fn band_total(&self, band: usize) -> u64 {
        self.counts[band].iter().sum()
    }

    pub fn total(&self) -> u64 {
        (0..self.bands.len()).map(|b| self.band_total(b)).sum()
    }

    pub fn band_index(&self, age: f64) -> Result<usize, LagError> {
        find_band(&self.bands, age)
    }

    /// Multinomial redraw of every band with its observed size and
    /// empirical proportions.
    pub fn resample<R: Rng + ?Sized>(&self, rng: &mut R) -> LagHistogram {
        let counts = self
            .counts
            .iter()
            .map(|band| {
                let total = band.iter().sum::<u64>();
                let weights: Vec<f64> = band.iter().map(|&c| c as f64).collect();
                multinomial(total, &weights, rng)
            })
            .collect();
        LagHistogram {
            bands: self.bands.clone(),
            counts,
        }
    }

    /// Reads the long format `age_lo, age_hi, lag_months, deaths`.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, LagError> {
        #[derive(Deserialize)]
        struct Row {
            age_lo: f64,
            age_hi: f64,
            lag_months: i64,
            deaths: i64,
        }
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut bands: Vec<AgeBand> = Vec::new();
        let mut counts: Vec<Vec<u64>> = Vec::new();
        for (i, rec) in rdr.deserialize::<Row>().enumerate() {
            let line = i + 2;
            let row = rec?;
            if row.lag_months < 0 || row.deaths < 0 {
                return Err(LagError::Parse {
                    line,
                    msg: "lag_months and deaths must be nonnegative".into(),
                });
            }
            let band = AgeBand::new(row.age_lo, row.age_hi)?;
            let idx = match bands.iter().position(|b| *b == band) {
                Some(i) => i,
                None => {
                    bands.push(band);
                    counts.push(Vec::new());
                    bands.len() - 1
                }
            };
            let m = row.lag_months as usize;
            if counts[idx].len() <= m {
                counts[idx].resize(m + 1, 0);
            }
            counts[idx][m] += row.deaths as u64;
        }
        let mut order: Vec<usize> = (0..bands.len()).collect();
        order.sort_by(|&a, &b| bands[a].lo.partial_cmp(&bands[b].lo).unwrap());
        let bands = order.iter().map(|&i| bands[i]).collect();
        let counts = order.iter().map(|&i| std::mem::take(&mut counts[i])).collect();
        Self::new(bands, counts)
    }

    pub fn read_csv_path(path: &Path) -> Result<Self, LagError> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    /// Writes every (band, month) pair, zeros included, so the support
    /// survives a round trip.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), LagError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["age_lo", "age_hi", "lag_months", "deaths"])?;
        for (band, counts) in self.bands.iter().zip(&self.counts) {
            for (m, c) in counts.iter().enumerate() {
                w.write_record([band.lo.to_string(), band.hi.to_string(), m.to_string(), c.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `rho[band][delta]`, the share of deaths with a lag of at least `delta` months.
#[derive(Debug, Clone, PartialEq)]
pub struct LagSurvival {
    bands: Vec<AgeBand>,
    rho: Vec<Vec<f64>>,
}

impl LagSurvival {
    pub fn from_parts(bands: Vec<AgeBand>, rho: Vec<Vec<f64>>) -> Result<Self, LagError> {
        check_bands(&bands)?;
        if rho.len() != bands.len() {
            return Err(LagError::Mismatch);
        }
        Ok(Self { bands, rho })
    }

    pub fn bands(&self) -> &[AgeBand] {
        &self.bands
    }

    pub fn band_index(&self, age: f64) -> Result<usize, LagError> {
        find_band(&self.bands, age)
    }

    pub fn max_delta(&self, band: usize) -> usize {
        self.rho[band].len() - 1
    }

    /// Truncated to 0 beyond the support.
    pub fn rho(&self, band: usize, delta_months: usize) -> f64 {
        self.rho[band].get(delta_months).copied().unwrap_or(0.0)
    }

    /// `rho` for the band containing `age` at `years` since invitation.
    pub fn rho_at(&self, age: f64, years: f64) -> Result<f64, LagError> {
        let b = self.band_index(age)?;
        Ok(self.rho(b, months_elapsed(years)))
    }

    pub fn table(&self, band: usize) -> &[f64] {
        &self.rho[band]
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), LagError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["age_lo", "age_hi", "delta_months", "rho"])?;
        for (band, rho) in self.bands.iter().zip(&self.rho) {
            for (d, r) in rho.iter().enumerate() {
                w.write_record([band.lo.to_string(), band.hi.to_string(), d.to_string(), r.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Lag probabilities per band, indexed by completed month.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagParameters {
    bands: Vec<AgeBand>,
    probs: Vec<Vec<f64>>,
}

impl LagParameters {
    pub fn new(bands: Vec<AgeBand>, probs: Vec<Vec<f64>>) -> Result<Self, LagError> {
        check_bands(&bands)?;
        if probs.len() != bands.len() {
            return Err(LagError::Mismatch);
        }
        for (band, p) in bands.iter().zip(&probs) {
            let sum: f64 = p.iter().sum();
            if p.iter().any(|v| !(0.0..=1.0).contains(v)) || (sum - 1.0).abs() > 1e-10 {
                return Err(LagError::NotSimplex { band: *band, sum });
            }
        }
        Ok(Self { bands, probs })
    }

    pub fn bands(&self) -> &[AgeBand] {
        &self.bands
    }

    pub fn probs(&self, band: usize) -> &[f64] {
        &self.probs[band]
    }

    pub fn band_index(&self, age: f64) -> Result<usize, LagError> {
        find_band(&self.bands, age)
    }

    /// Survival table implied by the parameters, `delta = 0..=M`.
    pub fn survival(&self) -> LagSurvival {
        let rho = (0..self.bands.len())
            .map(|b| {
                (0..self.probs[b].len())
                    .map(|d| survival_from_params(self, d, b))
                    .collect()
            })
            .collect();
        LagSurvival {
            bands: self.bands.clone(),
            rho,
        }
    }
}

/// Empirical survival: `rho[delta] = sum_{m >= delta} n_m / sum_m n_m`.
pub fn estimate_lag_survival(hist: &LagHistogram) -> Result<LagSurvival, LagError> {
    let mut rho = Vec::with_capacity(hist.bands.len());
    for (band, counts) in hist.bands.iter().zip(&hist.counts) {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(LagError::EmptyBand(*band));
        }
        let mut tail = vec![0u64; counts.len()];
        let mut acc = 0u64;
        for m in (0..counts.len()).rev() {
            acc += counts[m];
            tail[m] = acc;
        }
        rho.push(tail.iter().map(|&t| t as f64 / total as f64).collect());
    }
    Ok(LagSurvival {
        bands: hist.bands.clone(),
        rho,
    })
}

/// Probability of a lag of `delta` months or more, `1 - sum_{m < delta} p_m`,
/// for band index `band`. Zero beyond the support.
pub fn survival_from_params(params: &LagParameters, delta: usize, band: usize) -> f64 {
    let p = &params.probs[band];
    if delta > p.len() {
        return 0.0;
    }
    let head: f64 = p[..delta].iter().sum();
    (1.0 - head).clamp(0.0, 1.0)
}

/// Multinomial log-likelihood of the histogram, summed over bands, without
/// the multinomial coefficient. Returns `-inf` when a positive count sits on
/// a zero-probability lag.
pub fn lag_log_likelihood(hist: &LagHistogram, params: &LagParameters) -> Result<f64, LagError> {
    if hist.bands != params.bands || hist.counts.iter().zip(&params.probs).any(|(c, p)| c.len() != p.len()) {
        return Err(LagError::Mismatch);
    }
    let mut ll = 0.0;
    for (counts, probs) in hist.counts.iter().zip(&params.probs) {
        for (&n, &p) in counts.iter().zip(probs) {
            if n == 0 {
                continue;
            }
            if p <= 0.0 {
                return Ok(f64::NEG_INFINITY);
            }
            ll += n as f64 * p.ln();
        }
    }
    Ok(ll)
}

/// Multinomial MLE: empirical proportions per band.
pub fn mle_lag_params(hist: &LagHistogram) -> Result<LagParameters, LagError> {
    let mut probs = Vec::with_capacity(hist.bands.len());
    for (band, counts) in hist.bands.iter().zip(&hist.counts) {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(LagError::EmptyBand(*band));
        }
        probs.push(counts.iter().map(|&c| c as f64 / total as f64).collect());
    }
    LagParameters::new(hist.bands.clone(), probs)
}

impl fmt::Display for LagHistogram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (b, band) in self.bands.iter().enumerate() {
            writeln!(
                f,
                "{band}: {} deaths over lags 0..={}",
                self.band_total(b),
                self.max_lag()
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_band(counts: Vec<u64>) -> LagHistogram {
        LagHistogram::new(vec![AgeBand::new(50.0, 60.0).unwrap()], vec![counts]).unwrap()
    }

    fn params(p: Vec<f64>) -> LagParameters {
        LagParameters::new(vec![AgeBand::new(50.0, 60.0).unwrap()], vec![p]).unwrap()
    }

    #[test]
    fn hand_counted_survival() {
        let mut counts = vec![0; 11];
        counts[2] = 3;
        counts[10] = 1;
        let s = estimate_lag_survival(&one_band(counts)).unwrap();
        assert_eq!(s.rho(0, 6), 0.25);
        assert_eq!(s.rho(0, 0), 1.0);
        assert_eq!(s.rho(0, 2), 1.0);
        assert_eq!(s.rho(0, 3), 0.25);
        // beyond the support
        assert_eq!(s.rho(0, 11), 0.0);
        assert_eq!(s.rho(0, 500), 0.0);
    }

    #[test]
    fn empty_band_is_an_error() {
        let h = LagHistogram::new(
            vec![AgeBand::new(50.0, 60.0).unwrap(), AgeBand::new(60.0, 70.0).unwrap()],
            vec![vec![1, 2], vec![0, 0]],
        )
        .unwrap();
        let err = estimate_lag_survival(&h).unwrap_err();
        assert!(matches!(err, LagError::EmptyBand(b) if b.lo == 60.0));
        assert!(mle_lag_params(&h).is_err());
    }

    #[test]
    fn survival_from_explicit_params() {
        let p = params(vec![0.5, 0.3, 0.2]);
        assert_eq!(survival_from_params(&p, 0, 0), 1.0);
        assert_abs_diff_eq!(survival_from_params(&p, 1, 0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(survival_from_params(&p, 2, 0), 0.2, epsilon = 1e-15);
        assert_eq!(survival_from_params(&p, 3, 0), 0.0);
        assert_eq!(survival_from_params(&p, 4, 0), 0.0);
    }

    #[test]
    fn log_likelihood_cases() {
        let zeros = one_band(vec![0, 0]);
        assert_eq!(lag_log_likelihood(&zeros, &params(vec![0.5, 0.5])).unwrap(), 0.0);

        let h = one_band(vec![2, 1]);
        let ll = lag_log_likelihood(&h, &params(vec![2.0 / 3.0, 1.0 / 3.0])).unwrap();
        assert_abs_diff_eq!(ll, 2.0 * (2.0f64 / 3.0).ln() + (1.0f64 / 3.0).ln(), epsilon = 1e-14);

        let ll = lag_log_likelihood(&h, &params(vec![1.0, 0.0])).unwrap();
        assert_eq!(ll, f64::NEG_INFINITY);

        assert!(lag_log_likelihood(&h, &params(vec![0.2, 0.3, 0.5])).is_err());
    }

    #[test]
    fn mle_examples() {
        let p = mle_lag_params(&one_band(vec![3, 1])).unwrap();
        assert_eq!(p.probs(0), &[0.75, 0.25]);
        let p = mle_lag_params(&one_band(vec![5, 0, 0])).unwrap();
        assert_eq!(p.probs(0), &[1.0, 0.0, 0.0]);
        let p = mle_lag_params(&one_band(vec![2, 2, 2])).unwrap();
        for v in p.probs(0) {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn months_elapsed_floors() {
        assert_eq!(months_elapsed(0.0), 0);
        assert_eq!(months_elapsed(-1.0), 0);
        assert_eq!(months_elapsed(0.5), 6);
        assert_eq!(months_elapsed(1.0 / 12.0 - 1e-6), 0);
        assert_eq!(months_elapsed(14.5), 174);
    }

    #[test]
    fn csv_round_trip_keeps_support() {
        let h = LagHistogram::new(
            vec![AgeBand::new(50.0, 60.0).unwrap(), AgeBand::new(60.0, 70.0).unwrap()],
            vec![vec![0, 4, 1, 0, 0], vec![2, 0, 0, 0, 1]],
        )
        .unwrap();
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let back = LagHistogram::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, h);
    }

    #[test]
    fn overlapping_bands_rejected() {
        let err = LagHistogram::new(
            vec![AgeBand::new(50.0, 60.0).unwrap(), AgeBand::new(55.0, 70.0).unwrap()],
            vec![vec![1], vec![1]],
        )
        .unwrap_err();
        assert!(matches!(err, LagError::BandOrder(..)));
    }

    #[test]
    fn resample_is_seeded_and_preserves_totals() {
        let h = one_band(vec![10, 0, 40, 25, 5]);
        let a = h.resample(&mut ChaCha8Rng::seed_from_u64(3));
        let b = h.resample(&mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert_eq!(a.band_total(0), 80);
        assert_eq!(a.counts(0)[1], 0);
    }

    fn histogram_strategy() -> impl Strategy<Value = LagHistogram> {
        proptest::collection::vec(proptest::collection::vec(0u64..20, 1..30), 1..4)
            .prop_filter("nonempty bands", |bands| {
                bands.iter().all(|b| b.iter().sum::<u64>() > 0)
            })
            .prop_map(|counts| {
                let bands = (0..counts.len())
                    .map(|i| AgeBand::new(50.0 + 10.0 * i as f64, 60.0 + 10.0 * i as f64).unwrap())
                    .collect();
                LagHistogram::new(bands, counts).unwrap()
            })
    }

    proptest! {
        #[test]
        fn bridge_between_empirical_and_parametric_survival(h in histogram_strategy()) {
            let s = estimate_lag_survival(&h).unwrap();
            let p = mle_lag_params(&h).unwrap();
            for b in 0..h.bands().len() {
                for d in 0..=h.max_lag() + 2 {
                    let diff = (survival_from_params(&p, d, b) - s.rho(b, d)).abs();
                    prop_assert!(diff <= 1e-12, "band {} delta {}: {}", b, d, diff);
                }
            }
        }

        #[test]
        fn survival_is_monotone(h in histogram_strategy()) {
            let s = estimate_lag_survival(&h).unwrap();
            for b in 0..h.bands().len() {
                prop_assert_eq!(s.rho(b, 0), 1.0);
                for w in s.table(b).windows(2) {
                    prop_assert!(w[1] <= w[0]);
                }
            }
        }

        #[test]
        fn mle_is_normalised(h in histogram_strategy()) {
            let p = mle_lag_params(&h).unwrap();
            for b in 0..h.bands().len() {
                let sum: f64 = p.probs(b).iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn mle_beats_random_probability_vectors() {
        let h = one_band(vec![4, 9, 0, 3, 12, 1, 7]);
        let best = lag_log_likelihood(&h, &mle_lag_params(&h).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let raw: Vec<f64> = (0..7).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            let p = params(raw.iter().map(|v| v / s).collect());
            assert!(lag_log_likelihood(&h, &p).unwrap() <= best);
        }
    }
}
