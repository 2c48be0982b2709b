use std::collections::HashMap;

use refmort::lag::estimate_lag_survival;
use refmort::registry::{validate, ScreeningGroup};
use refmort::simulator::{expected_cells, sample_lag_histogram, simulate, truth, Scenario};

#[test]
fn simulated_totals_match_poisson_moments() {
    let sc = Scenario::nordic_small();
    let expected = expected_cells(&sc).unwrap();
    let mean: f64 = expected.total_cases();
    let mut totals = Vec::new();
    for seed in 0..20 {
        let out = simulate(&sc, seed).unwrap();
        let t = out.raw.total_cases();
        assert!((t - mean).abs() < 4.0 * mean.sqrt(), "seed {seed}: {t} vs {mean}");
        assert_eq!(out.table.total_cases(), t);
        totals.push(t);
    }
    let avg = totals.iter().sum::<f64>() / totals.len() as f64;
    assert!((avg - mean).abs() < 4.0 * (mean / totals.len() as f64).sqrt());
}

#[test]
fn screened_deaths_scaled_to_target() {
    let sc = Scenario::nordic_small();
    let t = expected_cells(&sc).unwrap();
    let screened: f64 = t
        .cells()
        .iter()
        .filter(|c| c.group.is_screened())
        .map(|c| c.cases)
        .sum();
    assert!((screened - sc.target_screened_deaths.unwrap()).abs() < 1e-6);
}

#[test]
fn lag_histogram_estimates_the_true_survival() {
    let sc = Scenario::nordic_small();
    let tr = truth(&sc).unwrap();
    let per_band = 40_000;
    let hist = sample_lag_histogram(&sc, per_band, 3).unwrap();
    assert!(hist.total() >= 100_000);
    let est = estimate_lag_survival(&hist).unwrap();
    for (b, true_rho) in tr.lag_survival.iter().enumerate() {
        let sup = true_rho
            .iter()
            .enumerate()
            .map(|(d, r)| (est.rho(b, d) - r).abs())
            .fold(0.0, f64::max);
        assert!(sup < 0.02, "band {b}: sup-norm error {sup}");
    }
}

#[test]
fn null_split_preserves_the_unscreened_rate() {
    let sc = Scenario::nordic_small().with_ratio(1.0);
    let t = expected_cells(&sc).unwrap();
    let none: HashMap<(i32, i32, &str), (f64, f64)> = t
        .cells()
        .iter()
        .filter(|c| c.group == ScreeningGroup::NoScreening)
        .map(|c| ((c.year, c.cohort, c.region.as_str()), (c.cases, c.person_years)))
        .collect();
    let mut checked = 0;
    for old in t.cells().iter().filter(|c| c.group == ScreeningGroup::PostOld) {
        let new = t
            .cells()
            .iter()
            .find(|c| {
                c.group == ScreeningGroup::PostNew
                    && c.year == old.year
                    && c.cohort == old.cohort
                    && c.region == old.region
            })
            .unwrap();
        if let Some(&(d, py)) = none.get(&(old.year, old.cohort, old.region.as_str())) {
            if py > 0.0 {
                let rate = (old.cases + new.cases) / old.person_years;
                assert!((rate / (d / py) - 1.0).abs() < 1e-12);
                checked += 1;
            }
        }
    }
    assert!(checked > 50);
}

#[test]
fn simulation_is_bit_reproducible() {
    let sc = Scenario::nordic_small();
    let bytes = |seed| {
        let out = simulate(&sc, seed).unwrap();
        let mut a = Vec::new();
        out.table.write_csv(&mut a).unwrap();
        out.raw.write_csv(&mut a).unwrap();
        out.hist.write_csv(&mut a).unwrap();
        a
    };
    assert_eq!(bytes(21), bytes(21));
    assert_ne!(bytes(21), bytes(22));
}

#[test]
fn simulated_tables_validate_on_many_seeds() {
    let sc = Scenario::nordic_small();
    for seed in 100..110 {
        let out = simulate(&sc, seed).unwrap();
        assert!(validate(&out.table).is_empty());
        assert_eq!(out.hist.bands().len(), sc.lag_bands.len());
    }
}
