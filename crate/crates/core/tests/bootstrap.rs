use refmort::bootstrap::{bootstrap_estimate, write_replicates, BootstrapConfig};
use refmort::estimators::Method;
use refmort::registry::{MortalityCell, MortalityTable, ScreeningGroup};
use refmort::simulator::{simulate, Scenario};

fn cfg(replicates: usize, seed: u64, jobs: usize) -> BootstrapConfig {
    BootstrapConfig {
        replicates,
        seed,
        ci_level: 0.95,
        jobs,
    }
}

#[test]
fn replicates_do_not_depend_on_worker_count() {
    let out = simulate(&Scenario::nordic_small(), 6).unwrap();
    for m in [Method::M1, Method::M2] {
        let a = bootstrap_estimate(m, &out.table, Some(&out.hist), &cfg(24, 9, 1)).unwrap();
        let b = bootstrap_estimate(m, &out.table, Some(&out.hist), &cfg(24, 9, 4)).unwrap();
        assert_eq!(a.replicates, b.replicates);
        assert_eq!(a.result.ci_low, b.result.ci_low);
        assert_eq!(a.result.ci_high, b.result.ci_high);
        let (mut da, mut db) = (Vec::new(), Vec::new());
        write_replicates(&a.replicates, &mut da).unwrap();
        write_replicates(&b.replicates, &mut db).unwrap();
        assert_eq!(da, db);
    }
}

#[test]
fn two_replicates_twice_are_identical() {
    let out = simulate(&Scenario::nordic_small(), 6).unwrap();
    let a = bootstrap_estimate(Method::M2, &out.table, Some(&out.hist), &cfg(2, 1, 1)).unwrap();
    let b = bootstrap_estimate(Method::M2, &out.table, Some(&out.hist), &cfg(2, 1, 1)).unwrap();
    assert_eq!(a.result.ci_low, b.result.ci_low);
    assert_eq!(a.result.ci_high, b.result.ci_high);
    let c = bootstrap_estimate(Method::M2, &out.table, Some(&out.hist), &cfg(2, 2, 1)).unwrap();
    assert_ne!(a.result.ci_low, c.result.ci_low);
}

#[test]
fn intervals_are_ordered_and_positive() {
    let out = simulate(&Scenario::nordic_small(), 13).unwrap();
    for m in Method::ALL {
        let b = bootstrap_estimate(m, &out.table, Some(&out.hist), &cfg(30, 4, 1)).unwrap();
        let (lo, hi) = (b.result.ci_low.unwrap(), b.result.ci_high.unwrap());
        assert!(0.0 < lo && lo <= hi, "{m}: ({lo}, {hi})");
        assert_eq!(b.result.replicates, Some(30));
        assert_eq!(b.result.seed, Some(4));
        assert_eq!(b.result.diagnostics.failed_replicates, Some(0));
        assert_eq!(b.result.diagnostics.ci_unreliable, Some(false));
        assert_eq!(b.replicates.len(), 30);
        assert!(b
            .replicates
            .iter()
            .enumerate()
            .all(|(i, r)| r.replicate == i && r.converged));
    }
}

#[test]
fn more_information_gives_narrower_intervals() {
    let base = Scenario::nordic_small();
    let mut big = base.clone();
    big.target_screened_deaths = base.target_screened_deaths.map(|t| 4.0 * t);
    let width = |sc: &Scenario| {
        let mut w: Vec<f64> = (0..5)
            .map(|seed| {
                let out = simulate(sc, 40 + seed).unwrap();
                let b = bootstrap_estimate(Method::M2, &out.table, Some(&out.hist), &cfg(60, seed, 1)).unwrap();
                b.result.ci_high.unwrap() - b.result.ci_low.unwrap()
            })
            .collect();
        w.sort_by(f64::total_cmp);
        w[2]
    };
    let (w1, w4) = (width(&base), width(&big));
    assert!(w4 < w1, "width with 4x data {w4} vs {w1}");
}

#[test]
fn frequent_failures_flag_the_interval() {
    // a single post-invitation death: about a third of redraws have none
    let out = simulate(&Scenario::nordic_small(), 2).unwrap();
    let mut seen = false;
    let cells: Vec<MortalityCell> = out
        .table
        .cells()
        .iter()
        .map(|c| {
            let mut c = c.clone();
            if c.group == ScreeningGroup::PostNew {
                c.cases = if !seen && c.cases > 0.0 { 1.0 } else { 0.0 };
                seen |= c.cases > 0.0;
            }
            c
        })
        .collect();
    let table = MortalityTable::from_cells(cells);
    let b = bootstrap_estimate(Method::M1, &table, Some(&out.hist), &cfg(40, 3, 1)).unwrap();
    let d = &b.result.diagnostics;
    assert!(d.failed_replicates.unwrap() > 4);
    assert_eq!(d.ci_unreliable, Some(true));
    assert!(b
        .replicates
        .iter()
        .any(|r| !r.converged && r.estimate.is_none() && r.error.is_some()));
    assert!(d.warnings.iter().any(|w| w.contains("unreliable")));
}

#[test]
fn point_estimate_errors_propagate() {
    let out = simulate(&Scenario::nordic_small(), 2).unwrap();
    let cells: Vec<MortalityCell> = out
        .table
        .cells()
        .iter()
        .map(|c| MortalityCell {
            cases: if c.group.is_screened() { 0.0 } else { c.cases },
            ..c.clone()
        })
        .collect();
    let table = MortalityTable::from_cells(cells);
    assert!(bootstrap_estimate(Method::M2, &table, Some(&out.hist), &cfg(10, 0, 1)).is_err());
    assert!(bootstrap_estimate(Method::M2, &out.table, Some(&out.hist), &cfg(1, 0, 1)).is_err());
}
