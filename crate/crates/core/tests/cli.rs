use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn refmort(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_refmort"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulated(dir: &TempDir, seed: u64) -> PathBuf {
    let out = dir.path().join(format!("sim{seed}"));
    let o = refmort(&["simulate", "--seed", &seed.to_string(), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn column(csv: &str, name: &str) -> Vec<String> {
    let mut r = csv::Reader::from_reader(csv.as_bytes());
    let i = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[i].to_string()).collect()
}

#[test]
fn simulate_writes_files_and_manifest() {
    let dir = TempDir::new().unwrap();
    let sim = simulated(&dir, 7);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(sim.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["command"], "simulate");
    let outputs = manifest["outputs"].as_array().unwrap();
    let names: Vec<&str> = outputs.iter().map(|o| o["path"].as_str().unwrap()).collect();
    assert_eq!(
        names,
        ["lag.csv", "raw.csv", "registry.csv", "schedule.csv", "truth.json"]
    );
    for o in outputs {
        let bytes = fs::read(sim.join(o["path"].as_str().unwrap())).unwrap();
        assert_eq!(o["sha256"].as_str().unwrap(), hex(&bytes));
        assert_eq!(o["bytes"].as_u64().unwrap() as usize, bytes.len());
    }
    let text = fs::read_to_string(sim.join("manifest.json")).unwrap();
    assert!(!text.contains("time") && !text.contains("date"));

    let again = dir.path().join("again");
    assert!(refmort(&["simulate", "--seed", "7", "--out", p(&again)])
        .status
        .success());
    for f in names {
        assert_eq!(fs::read(sim.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn estimate_all_methods() {
    let dir = TempDir::new().unwrap();
    let sim = simulated(&dir, 3);
    let out = dir.path().join("est");
    let o = refmort(&[
        "estimate",
        "--input",
        p(&sim.join("registry.csv")),
        "--lag",
        p(&sim.join("lag.csv")),
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert_eq!(column(&csv, "method"), ["M0", "M1", "M2", "M3"]);
    assert!(column(&csv, "status").iter().all(|s| s == "ok"));
    for r in column(&csv, "rate_ratio") {
        let v: f64 = r.parse().unwrap();
        assert!(v > 0.0 && v < 1.2);
    }
    for k in 0..4 {
        let v: serde_json::Value =
            serde_json::from_slice(&fs::read(out.join(format!("estimate_m{k}.json"))).unwrap()).unwrap();
        assert!(v["screening_rate_ratio"].as_f64().unwrap() > 0.0);
    }
    let table = fs::read_to_string(out.join("comparison.txt")).unwrap();
    assert!(table.contains("III"));
}

#[test]
fn method_three_without_lag_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let sim = simulated(&dir, 1);
    let o = refmort(&[
        "estimate",
        "--input",
        p(&sim.join("registry.csv")),
        "--method",
        "3",
        "--out",
        p(&dir.path().join("e")),
    ]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--lag"));
}

#[test]
fn missing_input_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let o = refmort(&[
        "estimate",
        "--input",
        p(&dir.path().join("nope.csv")),
        "--out",
        p(&dir.path().join("e")),
    ]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn negative_person_years_is_an_input_error_with_row_context() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("bad.csv");
    fs::write(
        &input,
        "year,cohort,region,screening_group,person_years,cases,time_since_invitation,prop_target,scr_indicator
1990,1930,x,none,1000,3,,1,0
1990,1931,x,none,-5,1,,1,0
",
    )
    .unwrap();
    let o = refmort(&[
        "estimate",
        "--input",
        p(&input),
        "--method",
        "2",
        "--out",
        p(&dir.path().join("e")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("row 2"), "{err}");
    assert!(err.contains("person_years"), "{err}");
}

#[test]
fn usage_errors_exit_with_config_code() {
    assert_eq!(refmort(&["estimate"]).status.code(), Some(4));
    assert_eq!(refmort(&["frobnicate"]).status.code(), Some(4));
    assert_eq!(refmort(&["--help"]).status.code(), Some(0));
}

#[test]
fn bootstrap_runs_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let sim = simulated(&dir, 2);
    let run = |name: &str, jobs: &str| {
        let out = dir.path().join(name);
        let o = refmort(&[
            "bootstrap",
            "--input",
            p(&sim.join("registry.csv")),
            "--lag",
            p(&sim.join("lag.csv")),
            "--method",
            "2",
            "-B",
            "200",
            "--seed",
            "1",
            "--jobs",
            jobs,
            "--out",
            p(&out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let (a, b, c) = (run("b1", "1"), run("b2", "1"), run("b3", "3"));
    for f in ["bootstrap_m2.json", "replicates_m2.csv", "comparison.csv"] {
        let x = fs::read(a.join(f)).unwrap();
        assert_eq!(x, fs::read(b.join(f)).unwrap(), "{f}");
        assert_eq!(x, fs::read(c.join(f)).unwrap(), "{f}");
    }
    let v: serde_json::Value = serde_json::from_slice(&fs::read(a.join("bootstrap_m2.json")).unwrap()).unwrap();
    let (lo, hi) = (v["ci_low"].as_f64().unwrap(), v["ci_high"].as_f64().unwrap());
    let est = v["screening_rate_ratio"].as_f64().unwrap();
    assert!(lo < est && est < hi);
    assert_eq!(v["replicates"], 200);
    assert_eq!(
        column(&fs::read_to_string(a.join("replicates_m2.csv")).unwrap(), "replicate").len(),
        200
    );
}

#[test]
fn raw_and_split_inputs_agree() {
    let dir = TempDir::new().unwrap();
    let sim = simulated(&dir, 5);
    let est = |input: &str, extra: &[&str], name: &str| {
        let out = dir.path().join(name);
        let lag = sim.join("lag.csv");
        let mut args = vec!["estimate", "--input", input, "--lag", p(&lag), "--method", "2"];
        args.extend_from_slice(extra);
        args.extend_from_slice(&["--out", p(&out)]);
        let o = refmort(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let v: serde_json::Value = serde_json::from_slice(&fs::read(out.join("estimate_m2.json")).unwrap()).unwrap();
        v["screening_rate_ratio"].as_f64().unwrap()
    };
    let split = est(p(&sim.join("registry.csv")), &[], "split");
    let raw = est(
        p(&sim.join("raw.csv")),
        &["--schedule", p(&sim.join("schedule.csv"))],
        "raw",
    );
    assert!((split - raw).abs() < 1e-9, "{split} vs {raw}");

    let o = refmort(&[
        "estimate",
        "--input",
        p(&sim.join("raw.csv")),
        "--lag",
        p(&sim.join("lag.csv")),
        "--out",
        p(&dir.path().join("x")),
    ]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn report_writes_trend_and_model() {
    let dir = TempDir::new().unwrap();
    let sim = simulated(&dir, 4);
    let out = dir.path().join("rep");
    let o = refmort(&[
        "report",
        "--input",
        p(&sim.join("registry.csv")),
        "--lag",
        p(&sim.join("lag.csv")),
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trend = fs::read_to_string(out.join("trend.csv")).unwrap();
    let observed: f64 = column(&trend, "observed_deaths")
        .iter()
        .map(|v| v.parse::<f64>().unwrap())
        .sum();
    let fitted: f64 = column(&trend, "fitted_deaths")
        .iter()
        .map(|v| v.parse::<f64>().unwrap())
        .sum();
    // Poisson fits with an intercept reproduce the total count
    assert!((observed - fitted).abs() < 1e-6 * observed);
    assert!(fs::read_to_string(out.join("trend.svg")).unwrap().starts_with("<svg"));
    let model: serde_json::Value = serde_json::from_slice(&fs::read(out.join("model.json")).unwrap()).unwrap();
    assert_eq!(model["method"], "M2");
}
