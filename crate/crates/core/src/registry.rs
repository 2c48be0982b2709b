//! Stratum-level mortality data: cells, tables, CSV I/O, validation and
//! risk-time splitting around the first screening invitation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lag::{months_elapsed, LagError, LagSurvival};

/// Tolerance for the PostOld/PostNew `prop_target` pair summing to one.
pub const PAIR_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("validation failed:\n{0}")]
    Validation(ValidationReport),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("table is already split into post_old/post_new rows; refusing to split again")]
    AlreadySplit,
    #[error(transparent)]
    Lag(#[from] LagError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScreeningGroup {
    NoScreening,
    PostOld,
    PostNew,
}

impl ScreeningGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ScreeningGroup::NoScreening => "none",
            ScreeningGroup::PostOld => "post_old",
            ScreeningGroup::PostNew => "post_new",
        }
    }

    /// Accepts the canonical names and the `No screening` / `Pre` / `Post`
    /// spelling used in registry extracts.
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "no screening" | "no_screening" => Some(ScreeningGroup::NoScreening),
            "post_old" | "pre" => Some(ScreeningGroup::PostOld),
            "post_new" | "post" => Some(ScreeningGroup::PostNew),
            _ => None,
        }
    }

    pub fn is_screened(self) -> bool {
        self != ScreeningGroup::NoScreening
    }
}

impl fmt::Display for ScreeningGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One Lexis stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MortalityCell {
    pub year: i32,
    pub cohort: i32,
    pub region: String,
    pub group: ScreeningGroup,
    pub person_years: f64,
    /// Deaths. Real-valued so that expected-count tables can be stored too.
    pub cases: f64,
    pub time_since_invitation: Option<f64>,
    pub prop_target: f64,
    pub scr_indicator: u8,
}

impl MortalityCell {
    pub fn age(&self) -> i32 {
        self.year - self.cohort
    }

    pub fn key(&self) -> CellKey {
        CellKey {
            year: self.year,
            cohort: self.cohort,
            region: self.region.clone(),
            group: self.group,
        }
    }

    pub fn none(year: i32, cohort: i32, region: &str, person_years: f64, cases: f64) -> Self {
        Self {
            year,
            cohort,
            region: region.to_string(),
            group: ScreeningGroup::NoScreening,
            person_years,
            cases,
            time_since_invitation: None,
            prop_target: 1.0,
            scr_indicator: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub year: i32,
    pub cohort: i32,
    pub region: String,
    pub group: ScreeningGroup,
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(year {}, cohort {}, region {}, {})",
            self.year, self.cohort, self.region, self.group
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MortalityTable {
    cells: Vec<MortalityCell>,
    age_range: (i32, i32),
    study_window: (i32, i32),
}

impl MortalityTable {
    /// Table with explicit age range and study window. Not validated.
    pub fn new(cells: Vec<MortalityCell>, age_range: (i32, i32), study_window: (i32, i32)) -> Self {
        Self {
            cells,
            age_range,
            study_window,
        }
    }

    /// Age range and window taken from the cells themselves.
    pub fn from_cells(cells: Vec<MortalityCell>) -> Self {
        let age_range = span(cells.iter().map(|c| c.age()));
        let study_window = span(cells.iter().map(|c| c.year));
        Self::new(cells, age_range, study_window)
    }

    pub fn cells(&self) -> &[MortalityCell] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn age_range(&self) -> (i32, i32) {
        self.age_range
    }

    pub fn study_window(&self) -> (i32, i32) {
        self.study_window
    }

    /// Same table with every cell's `cases` replaced.
    pub fn with_cases(&self, cases: &[f64]) -> Self {
        assert_eq!(cases.len(), self.cells.len());
        let cells = self
            .cells
            .iter()
            .zip(cases)
            .map(|(c, &y)| MortalityCell { cases: y, ..c.clone() })
            .collect();
        Self { cells, ..self.clone() }
    }

    pub fn total_cases(&self) -> f64 {
        self.cells.iter().map(|c| c.cases).sum()
    }

    /// Person-years with each PostOld/PostNew pair counted once.
    pub fn total_person_years(&self) -> f64 {
        self.cells
            .iter()
            .filter(|c| c.group != ScreeningGroup::PostOld)
            .map(|c| c.person_years)
            .sum()
    }

    pub fn has_screened(&self) -> bool {
        self.cells.iter().any(|c| c.group.is_screened())
    }

    /// Distinct regions in sorted order.
    pub fn regions(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.cells.iter().map(|c| c.region.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Self, RegistryError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| schema.index(&headers, name);
        let idx = [
            col("year")?,
            col("cohort")?,
            col("region")?,
            col("screening_group")?,
            col("person_years")?,
            col("cases")?,
            col("time_since_invitation")?,
            col("prop_target")?,
            col("scr_indicator")?,
        ];
        let mut cells = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec?;
            let field = |k: usize| rec.get(idx[k]).unwrap_or("");
            let group = ScreeningGroup::parse(field(3)).ok_or_else(|| RegistryError::Parse {
                line,
                msg: format!("unknown screening_group `{}`", field(3)),
            })?;
            let tsi = field(6);
            cells.push(MortalityCell {
                year: parse_int(field(0), "year", line)?,
                cohort: parse_int(field(1), "cohort", line)?,
                region: field(2).to_string(),
                group,
                person_years: parse_real(field(4), "person_years", line)?,
                cases: parse_real(field(5), "cases", line)?,
                time_since_invitation: if tsi.is_empty() {
                    None
                } else {
                    Some(parse_real(tsi, "time_since_invitation", line)?)
                },
                prop_target: parse_real(field(7), "prop_target", line)?,
                scr_indicator: match field(8) {
                    "0" => 0,
                    "1" => 1,
                    other => {
                        return Err(RegistryError::Parse {
                            line,
                            msg: format!("scr_indicator must be 0 or 1, got `{other}`"),
                        })
                    }
                },
            });
        }
        let table = Self::from_cells(cells);
        let report = validate(&table);
        if report.is_empty() {
            Ok(table)
        } else {
            Err(RegistryError::Validation(report))
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), RegistryError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(SPLIT_COLUMNS)?;
        for c in &self.cells {
            w.write_record([
                c.year.to_string(),
                c.cohort.to_string(),
                c.region.clone(),
                c.group.as_str().to_string(),
                c.person_years.to_string(),
                c.cases.to_string(),
                c.time_since_invitation.map(|t| t.to_string()).unwrap_or_default(),
                c.prop_target.to_string(),
                c.scr_indicator.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Parses a split mortality table from `path`.
pub fn parse_mortality_csv(path: &Path, schema: &CsvSchema) -> Result<MortalityTable, RegistryError> {
    MortalityTable::read_csv(std::fs::File::open(path)?, schema)
}

pub const SPLIT_COLUMNS: [&str; 9] = [
    "year",
    "cohort",
    "region",
    "screening_group",
    "person_years",
    "cases",
    "time_since_invitation",
    "prop_target",
    "scr_indicator",
];

pub const RAW_COLUMNS: [&str; 7] = [
    "year",
    "cohort",
    "region",
    "screening_group",
    "person_years",
    "cases_pre_dx",
    "cases_post_dx",
];

/// Maps canonical column names to the headers used in a file.
#[derive(Debug, Clone, Default)]
pub struct CsvSchema {
    rename: HashMap<String, String>,
}

impl CsvSchema {
    pub fn with(mut self, canonical: &str, header: &str) -> Self {
        self.rename.insert(canonical.to_string(), header.to_string());
        self
    }

    pub fn header<'a>(&'a self, canonical: &'a str) -> &'a str {
        self.rename.get(canonical).map(String::as_str).unwrap_or(canonical)
    }

    fn index(&self, headers: &csv::StringRecord, canonical: &str) -> Result<usize, RegistryError> {
        let name = self.header(canonical);
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| RegistryError::MissingColumn(name.to_string()))
    }
}

fn span(values: impl Iterator<Item = i32>) -> (i32, i32) {
    values
        .fold(None, |acc: Option<(i32, i32)>, v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
        .unwrap_or((0, 0))
}

fn parse_int(s: &str, name: &str, line: usize) -> Result<i32, RegistryError> {
    s.parse::<i32>().map_err(|_| RegistryError::Parse {
        line,
        msg: format!("{name}: expected an integer, got `{s}`"),
    })
}

fn parse_real(s: &str, name: &str, line: usize) -> Result<f64, RegistryError> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(RegistryError::Parse {
            line,
            msg: format!("{name}: expected a finite number, got `{s}`"),
        }),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Issue {
    /// 1-based data row (header excluded).
    pub row: usize,
    pub key: CellKey,
    pub message: String,
}

/// Every invariant violation found in a table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    fn push(&mut self, row: usize, cell: &MortalityCell, message: impl Into<String>) {
        self.issues.push(Issue {
            row,
            key: cell.key(),
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in &self.issues {
            writeln!(f, "  row {} {}: {}", i.row, i.key, i.message)?;
        }
        Ok(())
    }
}

/// Checks every cell and pair invariant.
pub fn validate(table: &MortalityTable) -> ValidationReport {
    let mut report = ValidationReport::default();
    let (amin, amax) = table.age_range;
    let (ymin, ymax) = table.study_window;
    let mut seen: HashMap<CellKey, usize> = HashMap::new();
    for (i, c) in table.cells.iter().enumerate() {
        let row = i + 1;
        if !(c.person_years >= 0.0) || !c.person_years.is_finite() {
            report.push(
                row,
                c,
                format!("person_years {} is negative or not finite", c.person_years),
            );
        }
        if !(c.cases >= 0.0) || !c.cases.is_finite() {
            report.push(row, c, format!("cases {} is negative or not finite", c.cases));
        }
        if (c.scr_indicator == 1) != (c.group == ScreeningGroup::PostNew) {
            report.push(row, c, "scr_indicator must be 1 exactly on post_new rows");
        }
        match c.group {
            ScreeningGroup::NoScreening => {
                if c.prop_target != 1.0 {
                    report.push(row, c, format!("prop_target {} must be 1 on none rows", c.prop_target));
                }
                if c.time_since_invitation.is_some() {
                    report.push(row, c, "time_since_invitation must be empty on none rows");
                }
            }
            _ => {
                if !(0.0..=1.0).contains(&c.prop_target) {
                    report.push(row, c, format!("prop_target {} outside [0, 1]", c.prop_target));
                }
                match c.time_since_invitation {
                    Some(t) if t >= 0.0 => {}
                    Some(t) => report.push(row, c, format!("time_since_invitation {t} is negative")),
                    None => report.push(row, c, "time_since_invitation missing on screened row"),
                }
            }
        }
        let age = c.age();
        if age < amin || age > amax {
            report.push(row, c, format!("age {age} outside [{amin}, {amax}]"));
        }
        if c.year < ymin || c.year > ymax {
            report.push(row, c, format!("year outside [{ymin}, {ymax}]"));
        }
        if let Some(first) = seen.insert(c.key(), row) {
            report.push(row, c, format!("duplicate of row {first}"));
        }
    }

    let mut pairs: BTreeMap<(i32, i32, &str), [Option<usize>; 2]> = BTreeMap::new();
    for (i, c) in table.cells.iter().enumerate() {
        let slot = match c.group {
            ScreeningGroup::PostOld => 0,
            ScreeningGroup::PostNew => 1,
            ScreeningGroup::NoScreening => continue,
        };
        pairs.entry((c.year, c.cohort, c.region.as_str())).or_default()[slot] = Some(i);
    }
    for slots in pairs.values() {
        match *slots {
            [Some(o), Some(n)] => {
                let (old, new) = (&table.cells[o], &table.cells[n]);
                if old.person_years != new.person_years {
                    report.push(n + 1, new, "post_old and post_new person_years differ");
                }
                let sum = old.prop_target + new.prop_target;
                if (sum - 1.0).abs() > PAIR_SUM_TOL {
                    report.push(n + 1, new, format!("post_old + post_new prop_target = {sum}, not 1"));
                }
                if old.time_since_invitation != new.time_since_invitation {
                    report.push(n + 1, new, "post_old and post_new time_since_invitation differ");
                }
            }
            [Some(o), None] => report.push(o + 1, &table.cells[o], "post_old row without post_new partner"),
            [None, Some(n)] => report.push(n + 1, &table.cells[n], "post_new row without post_old partner"),
            [None, None] => {}
        }
    }
    report
}

/// Per-region rollout: first invitation date and the invited age interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    /// Fractional calendar year; `None` for a never-screened region.
    pub first_invitation: Option<f64>,
    pub min_age: f64,
    pub max_age: f64,
}

impl Rollout {
    /// Date cohort `cohort` is first invited, if it ever is.
    pub fn invitation_time(&self, cohort: i32) -> Option<f64> {
        let r = self.first_invitation?;
        let c = cohort as f64;
        if r < c + self.max_age + 1.0 {
            Some(r.max(c + self.min_age))
        } else {
            None
        }
    }

    /// Share of calendar year `year` that cohort `cohort` spends after invitation.
    pub fn screened_fraction(&self, cohort: i32, year: i32) -> f64 {
        match self.invitation_time(cohort) {
            Some(t) => (year as f64 + 1.0 - t).clamp(0.0, 1.0),
            None => 0.0,
        }
    }

    /// Midpoint of the post-invitation part of `year`, minus the invitation date.
    pub fn time_since_invitation(&self, cohort: i32, year: i32) -> Option<f64> {
        let t = self.invitation_time(cohort)?;
        let p = year as f64;
        if t >= p + 1.0 {
            return None;
        }
        Some(0.5 * (p.max(t) + p + 1.0) - t)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutSchedule {
    regions: BTreeMap<String, Rollout>,
}

impl RolloutSchedule {
    pub fn insert(&mut self, region: &str, rollout: Rollout) -> Result<(), RegistryError> {
        if self.regions.contains_key(region) {
            return Err(RegistryError::Config(format!(
                "region `{region}` listed twice in schedule"
            )));
        }
        self.regions.insert(region.to_string(), rollout);
        Ok(())
    }

    pub fn get(&self, region: &str) -> Option<&Rollout> {
        self.regions.get(region)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Rollout)> {
        self.regions.iter()
    }

    /// Reads `region, first_invitation_year, min_age, max_age`; an empty
    /// invitation year marks a never-screened region.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, RegistryError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let schema = CsvSchema::default();
        let idx = [
            schema.index(&headers, "region")?,
            schema.index(&headers, "first_invitation_year")?,
            schema.index(&headers, "min_age")?,
            schema.index(&headers, "max_age")?,
        ];
        let mut out = Self::default();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec?;
            let field = |k: usize| rec.get(idx[k]).unwrap_or("");
            let first = match field(1) {
                "" => None,
                s => Some(parse_real(s, "first_invitation_year", line)?),
            };
            let min_age = parse_real(field(2), "min_age", line)?;
            let max_age = parse_real(field(3), "max_age", line)?;
            if min_age > max_age {
                return Err(RegistryError::Parse {
                    line,
                    msg: format!("min_age {min_age} exceeds max_age {max_age}"),
                });
            }
            out.insert(
                field(0),
                Rollout {
                    first_invitation: first,
                    min_age,
                    max_age,
                },
            )?;
        }
        Ok(out)
    }

    pub fn read_csv_path(path: &Path) -> Result<Self, RegistryError> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), RegistryError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["region", "first_invitation_year", "min_age", "max_age"])?;
        for (name, r) in &self.regions {
            w.write_record([
                name.clone(),
                r.first_invitation.map(|t| t.to_string()).unwrap_or_default(),
                r.min_age.to_string(),
                r.max_age.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Study-window check: every invitation date inside `[start, end + 1)`.
    pub fn check_window(&self, window: (i32, i32)) -> Result<(), RegistryError> {
        for (name, r) in &self.regions {
            if let Some(t) = r.first_invitation {
                if !(t >= window.0 as f64 && t < window.1 as f64 + 1.0) {
                    return Err(RegistryError::Config(format!(
                        "region `{name}` first invitation {t} outside study window {}-{}",
                        window.0, window.1
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Stratum before splitting: screened rows carry deaths by diagnosis timing.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCell {
    pub year: i32,
    pub cohort: i32,
    pub region: String,
    pub screened: bool,
    pub person_years: f64,
    pub cases_pre_dx: f64,
    pub cases_post_dx: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawTable {
    pub cells: Vec<RawCell>,
}

impl RawTable {
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, RegistryError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().any(|h| h == "prop_target" || h == "scr_indicator") {
            return Err(RegistryError::AlreadySplit);
        }
        let schema = CsvSchema::default();
        let mut idx = [0usize; 7];
        for (k, name) in RAW_COLUMNS.iter().enumerate() {
            idx[k] = schema.index(&headers, name)?;
        }
        let mut cells = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec?;
            let field = |k: usize| rec.get(idx[k]).unwrap_or("");
            let screened = match field(3).to_ascii_lowercase().as_str() {
                "none" => false,
                "screened" => true,
                "post_old" | "post_new" => return Err(RegistryError::AlreadySplit),
                other => {
                    return Err(RegistryError::Parse {
                        line,
                        msg: format!("screening_group must be none or screened, got `{other}`"),
                    })
                }
            };
            let post = field(6);
            let cell = RawCell {
                year: parse_int(field(0), "year", line)?,
                cohort: parse_int(field(1), "cohort", line)?,
                region: field(2).to_string(),
                screened,
                person_years: parse_real(field(4), "person_years", line)?,
                cases_pre_dx: parse_real(field(5), "cases_pre_dx", line)?,
                cases_post_dx: if post.is_empty() {
                    0.0
                } else {
                    parse_real(post, "cases_post_dx", line)?
                },
            };
            if cell.person_years < 0.0 || cell.cases_pre_dx < 0.0 || cell.cases_post_dx < 0.0 {
                return Err(RegistryError::Parse {
                    line,
                    msg: "person_years and counts must be nonnegative".into(),
                });
            }
            if !screened && cell.cases_post_dx != 0.0 {
                return Err(RegistryError::Parse {
                    line,
                    msg: "a none row cannot have post-invitation diagnoses".into(),
                });
            }
            cells.push(cell);
        }
        Ok(Self { cells })
    }

    pub fn read_csv_path(path: &Path) -> Result<Self, RegistryError> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), RegistryError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(RAW_COLUMNS)?;
        for c in &self.cells {
            w.write_record([
                c.year.to_string(),
                c.cohort.to_string(),
                c.region.clone(),
                if c.screened { "screened" } else { "none" }.to_string(),
                c.person_years.to_string(),
                c.cases_pre_dx.to_string(),
                c.cases_post_dx.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn total_cases(&self) -> f64 {
        self.cells.iter().map(|c| c.cases_pre_dx + c.cases_post_dx).sum()
    }

    pub fn total_person_years(&self) -> f64 {
        self.cells.iter().map(|c| c.person_years).sum()
    }
}

/// `(prop_target for post_old, prop_target for post_new)` of a screened stratum.
pub fn lag_offsets(lag: &LagSurvival, age: i32, time_since_invitation: f64) -> Result<(f64, f64), LagError> {
    let band = lag.band_index(age as f64)?;
    let rho = lag.rho(band, months_elapsed(time_since_invitation));
    Ok((rho, 1.0 - rho))
}

/// Splits screened strata into PostOld/PostNew cells with lag-based offsets.
pub fn split_risk_time(
    raw: &RawTable,
    schedule: &RolloutSchedule,
    lag: &LagSurvival,
) -> Result<MortalityTable, RegistryError> {
    let mut cells = Vec::with_capacity(raw.cells.len() * 2);
    let mut report = ValidationReport::default();
    for (i, r) in raw.cells.iter().enumerate() {
        let row = i + 1;
        if !r.screened {
            let cell = MortalityCell::none(r.year, r.cohort, &r.region, r.person_years, r.cases_pre_dx);
            if let Some(rollout) = schedule.get(&r.region) {
                if rollout.screened_fraction(r.cohort, r.year) >= 1.0 {
                    report.push(row, &cell, "none row in a year entirely after invitation");
                }
            }
            cells.push(cell);
            continue;
        }
        let rollout = schedule
            .get(&r.region)
            .ok_or_else(|| RegistryError::Config(format!("region `{}` has no schedule entry", r.region)))?;
        let mut old = MortalityCell {
            year: r.year,
            cohort: r.cohort,
            region: r.region.clone(),
            group: ScreeningGroup::PostOld,
            person_years: r.person_years,
            cases: r.cases_pre_dx,
            time_since_invitation: None,
            prop_target: 1.0,
            scr_indicator: 0,
        };
        let Some(tsi) = rollout.time_since_invitation(r.cohort, r.year) else {
            report.push(row, &old, "screened row for a stratum that is not yet invited");
            continue;
        };
        let (p_old, p_new) = lag_offsets(lag, old.age(), tsi).map_err(|e| match e {
            LagError::NoBand(age) => RegistryError::Config(format!("age {age} is outside every lag band")),
            other => RegistryError::Lag(other),
        })?;
        old.time_since_invitation = Some(tsi);
        old.prop_target = p_old;
        let new = MortalityCell {
            group: ScreeningGroup::PostNew,
            cases: r.cases_post_dx,
            prop_target: p_new,
            scr_indicator: 1,
            ..old.clone()
        };
        cells.push(old);
        cells.push(new);
    }
    if !report.is_empty() {
        return Err(RegistryError::Validation(report));
    }
    let table = MortalityTable::from_cells(cells);
    let report = validate(&table);
    if report.is_empty() {
        Ok(table)
    } else {
        Err(RegistryError::Validation(report))
    }
}

/// Recomputes `prop_target` of every screened cell from `lag`.
pub fn apply_lag_offsets(table: &MortalityTable, lag: &LagSurvival) -> Result<MortalityTable, RegistryError> {
    let mut cells = table.cells.clone();
    for c in cells.iter_mut().filter(|c| c.group.is_screened()) {
        let tsi = c
            .time_since_invitation
            .ok_or_else(|| RegistryError::Config(format!("screened cell {} lacks time_since_invitation", c.key())))?;
        let (p_old, p_new) = lag_offsets(lag, c.age(), tsi).map_err(|e| match e {
            LagError::NoBand(age) => RegistryError::Config(format!("age {age} is outside every lag band")),
            other => RegistryError::Lag(other),
        })?;
        c.prop_target = if c.group == ScreeningGroup::PostOld {
            p_old
        } else {
            p_new
        };
    }
    Ok(MortalityTable { cells, ..table.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lag::AgeBand;

    const HEADER: &str =
        "year,cohort,region,screening_group,person_years,cases,time_since_invitation,prop_target,scr_indicator\n";

    fn parse(body: &str) -> Result<MortalityTable, RegistryError> {
        MortalityTable::read_csv(format!("{HEADER}{body}").as_bytes(), &CsvSchema::default())
    }

    #[test]
    fn figure_style_rows() {
        let t = parse(
            "1988,1933,cph,No screening,2297,3,,1.00,0\n\
             1991,1936,cph,Post,201,0,0.2,0.08,1\n\
             1991,1936,cph,Pre,201,0,0.2,0.92,0\n",
        )
        .unwrap();
        let c = &t.cells()[0];
        assert_eq!(c.group, ScreeningGroup::NoScreening);
        assert_eq!(c.prop_target, 1.0);
        let n = &t.cells()[1];
        assert_eq!(n.group, ScreeningGroup::PostNew);
        assert_eq!(n.person_years, 201.0);
        assert_eq!(n.prop_target, 0.08);
        assert_eq!(n.time_since_invitation, Some(0.2));
    }

    #[test]
    fn empty_table() {
        let t = parse("").unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn missing_column_is_named() {
        let err = MortalityTable::read_csv("year,cohort\n".as_bytes(), &CsvSchema::default()).unwrap_err();
        assert!(matches!(err, RegistryError::MissingColumn(c) if c == "region"));
    }

    #[test]
    fn schema_renames_columns() {
        let body =
            "yr,cohort,region,screening_group,person_years,cases,time_since_invitation,prop_target,scr_indicator\n\
                    1990,1930,a,none,10,1,,1,0\n";
        let t = MortalityTable::read_csv(body.as_bytes(), &CsvSchema::default().with("year", "yr")).unwrap();
        assert_eq!(t.cells()[0].year, 1990);
    }

    #[test]
    fn negative_and_duplicate_rows_rejected() {
        let err = parse("1990,1930,a,none,-1,1,,1,0\n").unwrap_err();
        match err {
            RegistryError::Validation(r) => assert_eq!(r.issues[0].row, 1),
            e => panic!("{e}"),
        }
        let err = parse("1990,1930,a,none,1,1,,1,0\n1990,1930,a,none,2,1,,1,0\n").unwrap_err();
        assert!(matches!(err, RegistryError::Validation(r) if r.issues[0].message.contains("duplicate")));
    }

    #[test]
    fn report_flags_bad_pair_sum() {
        let mut cells = vec![MortalityCell {
            year: 1995,
            cohort: 1940,
            region: "a".into(),
            group: ScreeningGroup::PostOld,
            person_years: 50.0,
            cases: 1.0,
            time_since_invitation: Some(0.5),
            prop_target: 0.9,
            scr_indicator: 0,
        }];
        cells.push(MortalityCell {
            group: ScreeningGroup::PostNew,
            prop_target: 0.07,
            scr_indicator: 1,
            ..cells[0].clone()
        });
        let r = validate(&MortalityTable::from_cells(cells.clone()));
        assert_eq!(r.issues.len(), 1);
        assert!(r.issues[0].message.contains("prop_target"));
        cells[1].prop_target = 0.1;
        assert!(validate(&MortalityTable::from_cells(cells)).is_empty());
    }

    fn lag_table() -> LagSurvival {
        LagSurvival::from_parts(
            vec![AgeBand::new(50.0, 60.0).unwrap()],
            vec![vec![1.0, 0.98, 0.95, 0.92, 0.9, 0.85, 0.8]],
        )
        .unwrap()
    }

    fn schedule() -> RolloutSchedule {
        let mut s = RolloutSchedule::default();
        s.insert(
            "a",
            Rollout {
                first_invitation: Some(1991.0),
                min_age: 50.0,
                max_age: 69.0,
            },
        )
        .unwrap();
        s
    }

    #[test]
    fn split_assigns_offsets() {
        let raw = RawTable {
            cells: vec![
                RawCell {
                    year: 1990,
                    cohort: 1935,
                    region: "a".into(),
                    screened: false,
                    person_years: 1000.0,
                    cases_pre_dx: 4.0,
                    cases_post_dx: 0.0,
                },
                RawCell {
                    year: 1991,
                    cohort: 1935,
                    region: "a".into(),
                    screened: true,
                    person_years: 1000.0,
                    cases_pre_dx: 3.0,
                    cases_post_dx: 1.0,
                },
            ],
        };
        let t = split_risk_time(&raw, &schedule(), &lag_table()).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.cells()[0].prop_target, 1.0);
        // midpoint 0.5 years = 6 months
        assert_eq!(t.cells()[1].time_since_invitation, Some(0.5));
        assert_eq!(t.cells()[1].prop_target, 0.8);
        assert!((t.cells()[2].prop_target - 0.2).abs() < 1e-15);
        assert_eq!(t.total_cases(), raw.total_cases());
        assert_eq!(t.total_person_years(), raw.total_person_years());
    }

    #[test]
    fn split_at_invitation_date() {
        let mut s = RolloutSchedule::default();
        s.insert(
            "a",
            Rollout {
                first_invitation: Some(1991.99),
                min_age: 50.0,
                max_age: 69.0,
            },
        )
        .unwrap();
        let raw = RawTable {
            cells: vec![RawCell {
                year: 1991,
                cohort: 1935,
                region: "a".into(),
                screened: true,
                person_years: 10.0,
                cases_pre_dx: 0.0,
                cases_post_dx: 0.0,
            }],
        };
        let t = split_risk_time(&raw, &s, &lag_table()).unwrap();
        assert_eq!(t.cells()[0].prop_target, 1.0);
        assert_eq!(t.cells()[1].prop_target, 0.0);
    }

    #[test]
    fn split_requires_schedule_entry() {
        let raw = RawTable {
            cells: vec![RawCell {
                year: 1991,
                cohort: 1935,
                region: "zz".into(),
                screened: true,
                person_years: 10.0,
                cases_pre_dx: 0.0,
                cases_post_dx: 0.0,
            }],
        };
        assert!(matches!(
            split_risk_time(&raw, &schedule(), &lag_table()),
            Err(RegistryError::Config(_))
        ));
    }

    #[test]
    fn raw_reader_refuses_split_input() {
        let err = RawTable::read_csv(HEADER.as_bytes()).unwrap_err();
        assert!(matches!(err, RegistryError::AlreadySplit));
        let body =
            "year,cohort,region,screening_group,person_years,cases_pre_dx,cases_post_dx\n1991,1935,a,post_new,1,0,0\n";
        assert!(matches!(
            RawTable::read_csv(body.as_bytes()),
            Err(RegistryError::AlreadySplit)
        ));
    }

    #[test]
    fn invitation_rules() {
        let r = Rollout {
            first_invitation: Some(1995.5),
            min_age: 50.0,
            max_age: 69.0,
        };
        // already 60 at rollout
        assert_eq!(r.invitation_time(1935), Some(1995.5));
        // turns 50 later
        assert_eq!(r.invitation_time(1950), Some(2000.0));
        // 70 at rollout, never invited
        assert_eq!(r.invitation_time(1925), None);
        assert_eq!(r.screened_fraction(1935, 1995), 0.5);
        assert_eq!(r.screened_fraction(1935, 1994), 0.0);
        assert_eq!(r.time_since_invitation(1935, 1995), Some(0.25));
        assert_eq!(r.time_since_invitation(1935, 1997), Some(2.0));
    }

    #[test]
    fn schedule_csv_round_trip() {
        let s = schedule();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert_eq!(RolloutSchedule::read_csv(buf.as_slice()).unwrap(), s);
        let dup = "region,first_invitation_year,min_age,max_age\na,1991,50,69\na,1992,50,69\n";
        assert!(matches!(
            RolloutSchedule::read_csv(dup.as_bytes()),
            Err(RegistryError::Config(_))
        ));
    }
}
