//! Command-line front end: `simulate`, `estimate`, `bootstrap` and `report`.
//!
//! Exit codes: 0 success, 2 input or validation error, 3 nonconvergence,
//! 4 configuration error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use log::warn;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bootstrap::{bootstrap_estimate, write_replicates, BootstrapConfig};
use crate::estimators::{estimate, EstimateError, EstimateResult, Method};
use crate::glm::predict_mean;
use crate::lag::{estimate_lag_survival, LagError, LagHistogram};
use crate::registry::{
    parse_mortality_csv, split_risk_time, CsvSchema, MortalityTable, RawTable, RegistryError, RolloutSchedule,
    ScreeningGroup,
};
use crate::simulator::{simulate, Scenario, SimError, NORDIC_SMALL};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    NonConvergence(String),
    #[error("{0}")]
    Config(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::NonConvergence(_) => 3,
            CliError::Config(_) => 4,
        }
    }

    fn context(self, what: impl fmt::Display) -> Self {
        match self {
            CliError::Input(m) => CliError::Input(format!("{what}: {m}")),
            CliError::NonConvergence(m) => CliError::NonConvergence(format!("{what}: {m}")),
            CliError::Config(m) => CliError::Config(format!("{what}: {m}")),
        }
    }
}

impl From<RegistryError> for CliError {
    fn from(e: RegistryError) -> Self {
        match e {
            RegistryError::Config(_) | RegistryError::AlreadySplit => CliError::Config(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<LagError> for CliError {
    fn from(e: LagError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Registry(r) => r.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<EstimateError> for CliError {
    fn from(e: EstimateError) -> Self {
        match e {
            EstimateError::NonConvergence { .. } | EstimateError::StartValue(_) => {
                CliError::NonConvergence(e.to_string())
            }
            EstimateError::Config(_) => CliError::Config(e.to_string()),
            EstimateError::Registry(r) => r.into(),
            other => CliError::Input(other.to_string()),
        }
    }
}

fn write_err(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Config(format!("cannot write {}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(
    name = "refmort",
    version,
    about = "Screening-effect estimation on refined mortality data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic registry, lag histogram and truth file.
    Simulate(SimulateArgs),
    /// Point estimates for one or all methods.
    Estimate(EstimateArgs),
    /// Point estimates with percentile bootstrap intervals.
    Bootstrap(BootstrapArgs),
    /// Observed and fitted mortality trends with an SVG chart.
    Report(ReportArgs),
}

/// A single method or all four.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodSelection {
    One(Method),
    All,
}

impl MethodSelection {
    fn methods(self) -> Vec<Method> {
        match self {
            MethodSelection::One(m) => vec![m],
            MethodSelection::All => Method::ALL.to_vec(),
        }
    }
}

impl FromStr for MethodSelection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("all") {
            Ok(MethodSelection::All)
        } else {
            s.parse::<Method>().map(MethodSelection::One).map_err(|e| e.to_string())
        }
    }
}

impl fmt::Display for MethodSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MethodSelection::One(m) => write!(f, "{}", m.index()),
            MethodSelection::All => f.write_str("all"),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Built-in scenario name or path to a scenario TOML file.
    #[arg(long, default_value = "nordic-small")]
    pub scenario: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Split registry CSV, or raw CSV with `cases_pre_dx, cases_post_dx`.
    #[arg(long)]
    pub input: PathBuf,
    /// Lag histogram CSV (`age_lo, age_hi, lag_months, deaths`).
    #[arg(long)]
    pub lag: Option<PathBuf>,
    /// Rollout schedule CSV, needed for raw input.
    #[arg(long)]
    pub schedule: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// 0, 1, 2, 3 or all.
    #[arg(long, default_value = "all")]
    pub method: MethodSelection,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct BootstrapArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "2")]
    pub method: MethodSelection,
    /// Number of replicates.
    #[arg(short = 'B', long = "replicates", default_value_t = 1000)]
    pub replicates: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long = "ci-level", default_value_t = 0.95)]
    pub ci_level: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first), runs, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 4 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Simulate(a) => run_simulate(a),
        Command::Estimate(a) => run_estimate(a),
        Command::Bootstrap(a) => run_bootstrap(a),
        Command::Report(a) => run_report(a),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

impl FileHash {
    fn of(path: &str, bytes: &[u8]) -> Self {
        let digest = Sha256::digest(bytes);
        Self {
            path: path.to_string(),
            sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
            bytes: bytes.len(),
        }
    }
}

/// `manifest.json`: everything needed to rerun and check a run.
#[derive(Debug, Serialize)]
struct Manifest {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    seed: Option<u64>,
    config: serde_json::Value,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
}

/// Collects output files so the manifest can list their hashes.
struct OutDir {
    dir: PathBuf,
    written: Vec<FileHash>,
}

impl OutDir {
    fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| write_err(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: Vec<u8>) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, &bytes).map_err(|e| write_err(&path, e))?;
        self.written.push(FileHash::of(name, &bytes));
        Ok(())
    }

    fn finish(
        mut self,
        command: &'static str,
        seed: Option<u64>,
        config: serde_json::Value,
        inputs: Vec<FileHash>,
    ) -> Result<(), CliError> {
        self.written.sort_by(|a, b| a.path.cmp(&b.path));
        let m = Manifest {
            tool: "refmort",
            version: VERSION,
            command,
            seed,
            config,
            inputs,
            outputs: std::mem::take(&mut self.written),
        };
        let mut text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        text.push('\n');
        let path = self.dir.join("manifest.json");
        fs::write(&path, text).map_err(|e| write_err(&path, e))
    }
}

fn csv_bytes<E: fmt::Display>(f: impl FnOnce(&mut Vec<u8>) -> Result<(), E>) -> Vec<u8> {
    let mut buf = Vec::new();
    if let Err(e) = f(&mut buf) {
        panic!("writing to memory failed: {e}");
    }
    buf
}

fn read_input(path: &Path) -> Result<Vec<u8>, CliError> {
    if !path.exists() {
        return Err(CliError::Config(format!(
            "input file {} does not exist",
            path.display()
        )));
    }
    fs::read(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))
}

fn run_simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let (text, source) = if a.scenario == "nordic-small" {
        (NORDIC_SMALL.to_string(), "builtin:nordic-small".to_string())
    } else {
        let bytes = read_input(Path::new(&a.scenario))?;
        let text = String::from_utf8(bytes).map_err(|_| CliError::Config(format!("{} is not UTF-8", a.scenario)))?;
        (text, a.scenario.clone())
    };
    let inputs = vec![FileHash::of(&source, text.as_bytes())];
    let scenario = Scenario::from_toml_str(&text).map_err(|e| CliError::from(e).context(&source))?;
    let sim = simulate(&scenario, a.seed)?;

    let mut out = OutDir::create(&a.out)?;
    out.write("registry.csv", csv_bytes(|b| sim.table.write_csv(b)))?;
    out.write("raw.csv", csv_bytes(|b| sim.raw.write_csv(b)))?;
    out.write("schedule.csv", csv_bytes(|b| sim.schedule.write_csv(b)))?;
    out.write("lag.csv", csv_bytes(|b| sim.hist.write_csv(b)))?;
    let mut truth = serde_json::to_string_pretty(&sim.truth).expect("truth serializes");
    truth.push('\n');
    out.write("truth.json", truth.into_bytes())?;
    let config = json!({
        "scenario": a.scenario,
        "seed": a.seed,
        "out": a.out.display().to_string(),
    });
    out.finish("simulate", Some(a.seed), config, inputs)
}

/// Analysis table plus optional lag histogram, with input hashes.
struct Loaded {
    table: MortalityTable,
    hist: Option<LagHistogram>,
    inputs: Vec<FileHash>,
}

fn data_config(d: &DataArgs) -> serde_json::Value {
    json!({
        "input": d.input.display().to_string(),
        "lag": d.lag.as_ref().map(|p| p.display().to_string()),
        "schedule": d.schedule.as_ref().map(|p| p.display().to_string()),
    })
}

fn load(d: &DataArgs) -> Result<Loaded, CliError> {
    let mut inputs = Vec::new();
    let input = read_input(&d.input)?;
    inputs.push(FileHash::of(&d.input.display().to_string(), &input));

    let hist = match &d.lag {
        Some(p) => {
            let bytes = read_input(p)?;
            inputs.push(FileHash::of(&p.display().to_string(), &bytes));
            Some(LagHistogram::read_csv(bytes.as_slice()).map_err(|e| CliError::from(e).context(p.display()))?)
        }
        None => None,
    };
    let schedule = match &d.schedule {
        Some(p) => {
            let bytes = read_input(p)?;
            inputs.push(FileHash::of(&p.display().to_string(), &bytes));
            Some(RolloutSchedule::read_csv(bytes.as_slice()).map_err(|e| CliError::from(e).context(p.display()))?)
        }
        None => None,
    };

    let header = input.split(|&b| b == b'\n').next().unwrap_or_default();
    let is_raw = String::from_utf8_lossy(header)
        .split(',')
        .any(|h| h.trim() == "cases_pre_dx");
    let ctx = d.input.display();
    let table = if is_raw {
        let schedule = schedule.ok_or_else(|| {
            CliError::Config(format!(
                "{ctx} is a raw (unsplit) table; --schedule is required to split it"
            ))
        })?;
        let hist = hist.as_ref().ok_or_else(|| {
            CliError::Config(format!("{ctx} is a raw (unsplit) table; --lag is required to split it"))
        })?;
        let raw = RawTable::read_csv(input.as_slice()).map_err(|e| CliError::from(e).context(&ctx))?;
        let lag = estimate_lag_survival(hist).map_err(|e| CliError::from(e).context("lag histogram"))?;
        split_risk_time(&raw, &schedule, &lag).map_err(|e| CliError::from(e).context(&ctx))?
    } else {
        if schedule.is_some() {
            warn!("{ctx} is already split; --schedule is ignored");
        }
        parse_mortality_csv(&d.input, &CsvSchema::default()).map_err(|e| CliError::from(e).context(&ctx))?
    };
    Ok(Loaded { table, hist, inputs })
}

/// Methods to run; method 3 without a histogram is dropped from `all`
/// and refused when asked for alone.
fn methods_for(sel: MethodSelection, has_lag: bool) -> Result<(Vec<Method>, Vec<String>), CliError> {
    let mut notes = Vec::new();
    let mut methods = sel.methods();
    if !has_lag && methods.contains(&Method::M3) {
        if sel == MethodSelection::One(Method::M3) {
            return Err(CliError::Config(
                "method 3 requires a lag histogram; pass --lag <lag.csv>".into(),
            ));
        }
        methods.retain(|m| *m != Method::M3);
        let msg = "M3 skipped: no --lag histogram given".to_string();
        warn!("{msg}");
        notes.push(msg);
    }
    Ok((methods, notes))
}

enum Outcome {
    Done(Box<EstimateResult>),
    Failed(CliError),
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn comparison_csv(rows: &[(Method, &Outcome)]) -> Vec<u8> {
    csv_bytes(|buf| -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record([
            "method",
            "description",
            "rate_ratio",
            "log_effect",
            "ci_low",
            "ci_high",
            "std_error_log",
            "observed_deaths",
            "expected_deaths",
            "status",
        ])?;
        for (m, o) in rows {
            let mut rec = vec![m.to_string(), m.description().to_string()];
            match o {
                Outcome::Done(r) => rec.extend([
                    r.screening_rate_ratio.to_string(),
                    r.log_effect.to_string(),
                    fmt_opt(r.ci_low),
                    fmt_opt(r.ci_high),
                    fmt_opt(r.diagnostics.std_error_log),
                    fmt_opt(r.diagnostics.observed_deaths),
                    fmt_opt(r.diagnostics.expected_deaths),
                    "ok".into(),
                ]),
                Outcome::Failed(e) => {
                    rec.extend(std::iter::repeat_n(String::new(), 7));
                    rec.push(format!("error: {e}"));
                }
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    })
}

fn roman(m: Method) -> &'static str {
    ["0", "I", "II", "III"][m.index()]
}

fn comparison_text(rows: &[(Method, &Outcome)]) -> Vec<u8> {
    let width = rows
        .iter()
        .map(|(m, _)| m.description().len())
        .max()
        .unwrap_or(0)
        .max(17);
    let mut s = format!(
        "{:<4}{:<width$}  {:>10}  {}\n",
        "No", "Estimation method", "Rate ratio", "95% CI"
    );
    for (m, o) in rows {
        let (ratio, ci) = match o {
            Outcome::Done(r) => (
                format!("{:.3}", r.screening_rate_ratio),
                match (r.ci_low, r.ci_high) {
                    (Some(lo), Some(hi)) => format!("({lo:.3}, {hi:.3})"),
                    _ => String::new(),
                },
            ),
            Outcome::Failed(e) => ("failed".into(), format!("exit {}", e.exit_code())),
        };
        s.push_str(&format!(
            "{:<4}{:<width$}  {:>10}  {}\n",
            roman(*m),
            m.description(),
            ratio,
            ci
        ));
    }
    s.into_bytes()
}

fn report_warnings(m: Method, r: &EstimateResult) {
    for w in &r.diagnostics.warnings {
        warn!("{m}: {w}");
    }
}

fn json_bytes(r: &EstimateResult) -> Vec<u8> {
    let mut s = r.to_json();
    s.push('\n');
    s.into_bytes()
}

/// Writes the comparison files and returns the first failure, if any.
fn finish_methods(
    out: &mut OutDir,
    results: &[(Method, Outcome)],
    notes: &[String],
) -> Result<Option<CliError>, CliError> {
    let rows: Vec<(Method, &Outcome)> = results.iter().map(|(m, o)| (*m, o)).collect();
    out.write("comparison.csv", comparison_csv(&rows))?;
    let mut text = comparison_text(&rows);
    for n in notes {
        text.extend_from_slice(format!("note: {n}\n").as_bytes());
    }
    out.write("comparison.txt", text)?;
    let first = results.iter().find_map(|(m, o)| match o {
        Outcome::Failed(e) => Some(e.clone().context(m)),
        Outcome::Done(_) => None,
    });
    Ok(first)
}

fn run_estimate(a: &EstimateArgs) -> Result<(), CliError> {
    let (methods, notes) = methods_for(a.method, a.data.lag.is_some())?;
    let data = load(&a.data)?;
    let mut out = OutDir::create(&a.out)?;
    let mut results = Vec::new();
    for m in methods {
        let outcome = match estimate(m, &data.table, data.hist.as_ref()) {
            Ok(r) => {
                report_warnings(m, &r);
                out.write(&format!("estimate_m{}.json", m.index()), json_bytes(&r))?;
                Outcome::Done(Box::new(r))
            }
            Err(e) => {
                let e = CliError::from(e);
                eprintln!("error: {m}: {e}");
                Outcome::Failed(e)
            }
        };
        results.push((m, outcome));
    }
    let failure = finish_methods(&mut out, &results, &notes)?;
    let config = json!({
        "data": data_config(&a.data),
        "method": a.method.to_string(),
        "out": a.out.display().to_string(),
    });
    out.finish("estimate", None, config, data.inputs)?;
    failure.map_or(Ok(()), Err)
}

fn run_bootstrap(a: &BootstrapArgs) -> Result<(), CliError> {
    let cfg = BootstrapConfig {
        replicates: a.replicates,
        seed: a.seed,
        ci_level: a.ci_level,
        jobs: a.jobs,
    };
    cfg.validate()?;
    let (methods, notes) = methods_for(a.method, a.data.lag.is_some())?;
    let data = load(&a.data)?;
    let mut out = OutDir::create(&a.out)?;
    let mut results = Vec::new();
    for m in methods {
        let outcome = match bootstrap_estimate(m, &data.table, data.hist.as_ref(), &cfg) {
            Ok(b) => {
                report_warnings(m, &b.result);
                out.write(&format!("bootstrap_m{}.json", m.index()), json_bytes(&b.result))?;
                out.write(
                    &format!("replicates_m{}.csv", m.index()),
                    csv_bytes(|buf| write_replicates(&b.replicates, buf)),
                )?;
                Outcome::Done(Box::new(b.result))
            }
            Err(e) => {
                let e = CliError::from(e);
                eprintln!("error: {m}: {e}");
                Outcome::Failed(e)
            }
        };
        results.push((m, outcome));
    }
    let failure = finish_methods(&mut out, &results, &notes)?;
    let config = json!({
        "data": data_config(&a.data),
        "method": a.method.to_string(),
        "replicates": a.replicates,
        "seed": a.seed,
        "jobs": a.jobs,
        "ci_level": a.ci_level,
        "out": a.out.display().to_string(),
    });
    out.finish("bootstrap", Some(a.seed), config, data.inputs)?;
    failure.map_or(Ok(()), Err)
}

/// Observed and fitted deaths of one (year, group) pair.
#[derive(Debug, Clone, Default)]
struct TrendPoint {
    person_years: f64,
    observed: f64,
    fitted: f64,
}

const RATE_SCALE: f64 = 1e5;

fn run_report(a: &ReportArgs) -> Result<(), CliError> {
    let data = load(&a.data)?;
    let r = estimate(Method::M2, &data.table, data.hist.as_ref())?;
    let model = r.model.as_ref().expect("method II returns its model");

    // offsets as used by the fit, recomputed from the histogram if given
    let table = match &data.hist {
        Some(h) => {
            let lag = estimate_lag_survival(h)?;
            crate::registry::apply_lag_offsets(&data.table, &lag)?
        }
        None => data.table.clone(),
    };
    let rows: Vec<_> = table
        .cells()
        .iter()
        .filter(|c| c.person_years > 0.0 && c.prop_target > 0.0)
        .collect();
    let x = model
        .spec
        .design(rows.iter().copied())
        .map_err(|e| CliError::Input(e.to_string()))?;
    let off: Vec<f64> = rows.iter().map(|c| c.person_years.ln() + c.prop_target.ln()).collect();
    let mu = predict_mean(&model.fit, &x, &off).map_err(|e| CliError::Input(e.to_string()))?;

    let mut trend: BTreeMap<(i32, ScreeningGroup), TrendPoint> = BTreeMap::new();
    for c in table.cells() {
        let p = trend.entry((c.year, c.group)).or_default();
        p.person_years += c.person_years;
        p.observed += c.cases;
    }
    for (c, m) in rows.iter().zip(&mu) {
        trend.get_mut(&(c.year, c.group)).expect("entry exists").fitted += m;
    }

    let mut out = OutDir::create(&a.out)?;
    out.write(
        "trend.csv",
        csv_bytes(|buf| -> Result<(), csv::Error> {
            let mut w = csv::Writer::from_writer(buf);
            w.write_record([
                "year",
                "screening_group",
                "person_years",
                "observed_deaths",
                "fitted_deaths",
                "observed_rate_per_100k",
                "fitted_rate_per_100k",
            ])?;
            for ((year, g), p) in &trend {
                let rate = |d: f64| {
                    if p.person_years > 0.0 {
                        d / p.person_years * RATE_SCALE
                    } else {
                        0.0
                    }
                };
                w.write_record([
                    year.to_string(),
                    g.as_str().to_string(),
                    p.person_years.to_string(),
                    p.observed.to_string(),
                    p.fitted.to_string(),
                    rate(p.observed).to_string(),
                    rate(p.fitted).to_string(),
                ])?;
            }
            w.flush()?;
            Ok(())
        }),
    )?;
    let mut model_json = serde_json::to_string_pretty(&json!({
        "method": r.method,
        "screening_rate_ratio": r.screening_rate_ratio,
        "log_effect": r.log_effect,
        "model": model,
    }))
    .expect("model serializes");
    model_json.push('\n');
    out.write("model.json", model_json.into_bytes())?;
    out.write("trend.svg", trend_svg(&trend).into_bytes())?;

    let config = json!({
        "data": data_config(&a.data),
        "method": "2",
        "out": a.out.display().to_string(),
    });
    out.finish("report", None, config, data.inputs)
}

fn group_color(g: ScreeningGroup) -> &'static str {
    match g {
        ScreeningGroup::NoScreening => "#1f77b4",
        ScreeningGroup::PostOld => "#ff7f0e",
        ScreeningGroup::PostNew => "#2ca02c",
    }
}

fn group_label(g: ScreeningGroup) -> &'static str {
    match g {
        ScreeningGroup::NoScreening => "not invited",
        ScreeningGroup::PostOld => "invited, diagnosed before invitation",
        ScreeningGroup::PostNew => "invited, diagnosed after invitation",
    }
}

/// Rates per 100,000 person-years by year: observed as dots, fitted as lines.
fn trend_svg(trend: &BTreeMap<(i32, ScreeningGroup), TrendPoint>) -> String {
    let (w, h) = (760.0, 460.0);
    let (left, right, top, bottom) = (70.0, 20.0, 30.0, 110.0);
    let rate = |p: &TrendPoint, d: f64| {
        if p.person_years > 0.0 {
            d / p.person_years * RATE_SCALE
        } else {
            0.0
        }
    };
    let years: Vec<i32> = trend.keys().map(|k| k.0).collect();
    let (y0, y1) = (
        years.iter().copied().min().unwrap_or(0) as f64,
        years.iter().copied().max().unwrap_or(1) as f64,
    );
    let y1 = if y1 > y0 { y1 } else { y0 + 1.0 };
    let rmax = trend
        .values()
        .flat_map(|p| [rate(p, p.observed), rate(p, p.fitted)])
        .fold(0.0f64, f64::max);
    let step = nice_step(rmax / 5.0);
    let rtop = (rmax / step).ceil().max(1.0) * step;
    let px = |year: f64| left + (year - y0) / (y1 - y0) * (w - left - right);
    let py = |r: f64| top + (1.0 - r / rtop) * (h - top - bottom);

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    s.push_str(&format!("<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"));
    let mut tick = 0.0;
    while tick <= rtop + 1e-9 * rtop {
        let y = py(tick);
        s.push_str(&format!(
            "<line x1=\"{left}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\n<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            w - right,
            left - 6.0,
            y + 4.0,
            fmt_tick(tick)
        ));
        tick += step;
    }
    let ystep = ((y1 - y0) / 8.0).ceil().max(1.0) as i32;
    let mut yr = y0 as i32;
    while yr as f64 <= y1 {
        let x = px(yr as f64);
        s.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{yr}</text>\n",
            h - bottom + 18.0
        ));
        yr += ystep;
    }
    s.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        h - bottom,
        w - right,
        h - bottom,
        h - bottom
    ));
    s.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" transform=\"rotate(-90 16 {:.1})\" text-anchor=\"middle\">deaths per 100,000 person-years</text>\n",
        (top + h - bottom) / 2.0,
        (top + h - bottom) / 2.0
    ));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">year</text>\n",
        (left + w - right) / 2.0,
        h - bottom + 36.0
    ));

    for (k, g) in [
        ScreeningGroup::NoScreening,
        ScreeningGroup::PostOld,
        ScreeningGroup::PostNew,
    ]
    .into_iter()
    .enumerate()
    {
        let pts: Vec<(i32, &TrendPoint)> = trend
            .iter()
            .filter(|((_, gg), p)| *gg == g && p.person_years > 0.0)
            .map(|((y, _), p)| (*y, p))
            .collect();
        let color = group_color(g);
        if !pts.is_empty() {
            let line: Vec<String> = pts
                .iter()
                .map(|(y, p)| format!("{:.1},{:.1}", px(*y as f64), py(rate(p, p.fitted))))
                .collect();
            s.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
                line.join(" ")
            ));
            for (y, p) in &pts {
                s.push_str(&format!(
                    "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>\n",
                    px(*y as f64),
                    py(rate(p, p.observed))
                ));
            }
        }
        let ly = h - bottom + 58.0 + 16.0 * k as f64;
        s.push_str(&format!(
            "<line x1=\"{left}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n<circle cx=\"{:.1}\" cy=\"{ly:.1}\" r=\"3\" fill=\"{color}\"/>\n<text x=\"{:.1}\" y=\"{:.1}\">{} (dots observed, line fitted)</text>\n",
            left + 30.0,
            left + 15.0,
            left + 38.0,
            ly + 4.0,
            group_label(g)
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn nice_step(raw: f64) -> f64 {
    if !(raw > 0.0) || !raw.is_finite() {
        return 1.0;
    }
    let mag = 10f64.powf(raw.log10().floor());
    let f = raw / mag;
    let nice = if f <= 1.0 {
        1.0
    } else if f <= 2.0 {
        2.0
    } else if f <= 5.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn fmt_tick(v: f64) -> String {
    if v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_selection_parses() {
        assert_eq!("all".parse::<MethodSelection>().unwrap(), MethodSelection::All);
        assert_eq!(
            "3".parse::<MethodSelection>().unwrap(),
            MethodSelection::One(Method::M3)
        );
        assert!("7".parse::<MethodSelection>().is_err());
    }

    #[test]
    fn method_three_needs_lag() {
        let e = methods_for(MethodSelection::One(Method::M3), false).unwrap_err();
        assert_eq!(e.exit_code(), 4);
        assert!(e.to_string().contains("--lag"));
        let (m, notes) = methods_for(MethodSelection::All, false).unwrap();
        assert_eq!(m, vec![Method::M0, Method::M1, Method::M2]);
        assert_eq!(notes.len(), 1);
    }

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(
            FileHash::of("x", b"").sha256,
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn nice_steps() {
        assert_eq!(nice_step(0.7), 1.0);
        assert_eq!(nice_step(13.0), 20.0);
        assert_eq!(nice_step(4.1), 5.0);
    }
}
