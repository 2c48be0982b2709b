use proptest::prelude::*;
use refmort::lag::{estimate_lag_survival, AgeBand, LagHistogram};
use refmort::registry::{
    split_risk_time, validate, CsvSchema, MortalityCell, MortalityTable, RawCell, RawTable, RegistryError, Rollout,
    RolloutSchedule, ScreeningGroup,
};

fn cell_strategy() -> impl Strategy<Value = Vec<MortalityCell>> {
    // (year, age, region, py, none cases, screened?, tsi, rho, old cases, new cases)
    let row = (
        1980i32..2010,
        40i32..80,
        prop::sample::select(vec!["a", "b", "north-east"]),
        0.0f64..1e5,
        0u32..500,
        any::<bool>(),
        0.0f64..20.0,
        0.0f64..=1.0,
        0u32..50,
        0u32..50,
    );
    prop::collection::vec(row, 1..40).prop_map(|rows| {
        let mut seen = std::collections::HashSet::new();
        let mut cells = Vec::new();
        for (year, age, region, py, n, screened, tsi, rho, old, new) in rows {
            if !seen.insert((year, age, region)) {
                continue;
            }
            let cohort = year - age;
            if screened {
                let base = MortalityCell {
                    year,
                    cohort,
                    region: region.to_string(),
                    group: ScreeningGroup::PostOld,
                    person_years: py,
                    cases: old as f64,
                    time_since_invitation: Some(tsi),
                    prop_target: rho,
                    scr_indicator: 0,
                };
                cells.push(MortalityCell {
                    group: ScreeningGroup::PostNew,
                    cases: new as f64,
                    prop_target: 1.0 - rho,
                    scr_indicator: 1,
                    ..base.clone()
                });
                cells.push(base);
            } else {
                cells.push(MortalityCell::none(year, cohort, region, py, n as f64));
            }
        }
        cells
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_round_trip_is_identity(cells in cell_strategy()) {
        let table = MortalityTable::from_cells(cells);
        prop_assert!(validate(&table).is_empty());
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let back = MortalityTable::read_csv(buf.as_slice(), &CsvSchema::default()).unwrap();
        prop_assert_eq!(&back, &table);
        let mut again = Vec::new();
        back.write_csv(&mut again).unwrap();
        prop_assert_eq!(again, buf);
    }
}

fn bands() -> Vec<AgeBand> {
    vec![AgeBand::new(40.0, 60.0).unwrap(), AgeBand::new(60.0, 80.0).unwrap()]
}

fn raw_strategy() -> impl Strategy<Value = (RawTable, RolloutSchedule, LagHistogram)> {
    let counts = prop::collection::vec(prop::collection::vec(0u64..20, 60), 2)
        .prop_filter("every band needs deaths", |c| {
            c.iter().all(|b| b.iter().sum::<u64>() > 0)
        });
    let rollouts = (1990.0f64..2000.0, 1990.0f64..2000.0);
    let rows = prop::collection::vec(
        (1985i32..2005, 50i32..70, 0usize..2, 1.0f64..1e4, 0u32..30, 0u32..30),
        1..60,
    );
    (counts, rollouts, rows).prop_map(|(counts, (ra, rb), rows)| {
        let hist = LagHistogram::new(bands(), counts).unwrap();
        let mut schedule = RolloutSchedule::default();
        let regions = ["a", "b"];
        for (r, first) in regions.iter().zip([ra, rb]) {
            schedule
                .insert(
                    r,
                    Rollout {
                        first_invitation: Some(first),
                        min_age: 50.0,
                        max_age: 69.0,
                    },
                )
                .unwrap();
        }
        let mut seen = std::collections::HashSet::new();
        let mut cells = Vec::new();
        for (year, age, region, py, pre, post) in rows {
            let cohort = year - age;
            if !seen.insert((year, cohort, region)) {
                continue;
            }
            let rollout = schedule.get(regions[region]).unwrap();
            let f = rollout.screened_fraction(cohort, year);
            if f < 1.0 {
                cells.push(RawCell {
                    year,
                    cohort,
                    region: regions[region].into(),
                    screened: false,
                    person_years: py * (1.0 - f),
                    cases_pre_dx: pre as f64,
                    cases_post_dx: 0.0,
                });
            }
            if f > 0.0 {
                cells.push(RawCell {
                    year,
                    cohort,
                    region: regions[region].into(),
                    screened: true,
                    person_years: py * f,
                    cases_pre_dx: pre as f64,
                    cases_post_dx: post as f64,
                });
            }
        }
        (RawTable { cells }, schedule, hist)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_pairs_sum_to_one_and_totals_are_conserved((raw, schedule, hist) in raw_strategy()) {
        let lag = estimate_lag_survival(&hist).unwrap();
        let table = split_risk_time(&raw, &schedule, &lag).unwrap();
        prop_assert!(validate(&table).is_empty());

        let cells = table.cells();
        for c in cells.iter().filter(|c| c.group == ScreeningGroup::PostOld) {
            let partner = cells
                .iter()
                .find(|d| d.group == ScreeningGroup::PostNew && d.year == c.year && d.cohort == c.cohort && d.region == c.region)
                .expect("every post_old row has a post_new partner");
            prop_assert!((c.prop_target + partner.prop_target - 1.0).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&c.prop_target));
            prop_assert_eq!(c.person_years, partner.person_years);
        }

        let deaths: f64 = raw.cells.iter().map(|c| c.cases_pre_dx + c.cases_post_dx).sum();
        prop_assert!((table.total_cases() - deaths).abs() <= 1e-9 * deaths.max(1.0));
        let py: f64 = raw.cells.iter().map(|c| c.person_years).sum();
        prop_assert!((table.total_person_years() - py).abs() <= 1e-9 * py.max(1.0));
    }

    #[test]
    fn split_tables_are_not_split_again((raw, schedule, hist) in raw_strategy()) {
        let lag = estimate_lag_survival(&hist).unwrap();
        let table = split_risk_time(&raw, &schedule, &lag).unwrap();
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        prop_assert!(matches!(RawTable::read_csv(buf.as_slice()), Err(RegistryError::AlreadySplit)));
    }
}

#[test]
fn raw_csv_round_trip() {
    let raw = RawTable {
        cells: vec![
            RawCell {
                year: 1996,
                cohort: 1940,
                region: "a".into(),
                screened: true,
                person_years: 812.5,
                cases_pre_dx: 3.0,
                cases_post_dx: 1.0,
            },
            RawCell {
                year: 1996,
                cohort: 1940,
                region: "a".into(),
                screened: false,
                person_years: 187.5,
                cases_pre_dx: 2.0,
                cases_post_dx: 0.0,
            },
        ],
    };
    let mut buf = Vec::new();
    raw.write_csv(&mut buf).unwrap();
    assert_eq!(RawTable::read_csv(buf.as_slice()).unwrap(), raw);
}

#[test]
fn figure_style_table_validates() {
    let csv = "year,cohort,region,screening_group,person_years,cases,time_since_invitation,prop_target,scr_indicator
1988,1933,x,No screening,2297,3,,1.00,0
1991,1936,x,Pre,201,1,0.2,0.92,0
1991,1936,x,Post,201,0,0.2,0.08,1
";
    let t = MortalityTable::read_csv(csv.as_bytes(), &CsvSchema::default()).unwrap();
    assert!(validate(&t).is_empty());
    let new = t.cells().iter().find(|c| c.group == ScreeningGroup::PostNew).unwrap();
    assert_eq!(new.person_years, 201.0);
    assert_eq!(new.prop_target, 0.08);
}
