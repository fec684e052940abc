use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rrdr_core::param_map::inverse;
use rrdr_core::TargetMeasure;
use serde_json::Value;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_rrdr");
const TERMS: &str = "year,nulli,arrest,breech,breech:arrest,arrest:nulli,breech:nulli,arrest:breech:nulli";

fn rrdr(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RRDR_WORKERS", "1").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = rrdr(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn error_of(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let json: Value = serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("{e}: {text}"));
    json["error"].clone()
}

fn read_table(path: &Path) -> Vec<csv::StringRecord> {
    let text = fs::read_to_string(path).unwrap();
    assert!(text.starts_with("# rrdr "), "missing metadata header in {}", path.display());
    assert!(text.lines().any(|l| l.starts_with("# config_sha256: ")));
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let mut rows = vec![r.headers().unwrap().clone()];
    rows.extend(r.records().map(Result::unwrap));
    rows
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Four binary-and-continuous confounders with heterogeneous effects across
/// the binary subgroups, mirroring an obstetric cohort.
fn synthetic_cohort(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::from("cs,efm,year,nulli,arrest,breech\n");
    for _ in 0..n {
        let year = rng.random_range(0..6) as f64;
        let nulli = f64::from(rng.random_bool(0.45));
        let arrest = f64::from(rng.random_bool(0.2));
        let breech = f64::from(rng.random_bool(0.15));
        let e = 1.0 / (1.0 + (-(-0.6 + 0.15 * year + 0.3 * nulli + 0.2 * arrest)).exp());
        let efm = f64::from(rng.random::<f64>() < e);
        let theta = 0.1 - 0.02 * year + 0.3 * arrest - 0.4 * breech + 0.1 * nulli;
        let phi = -3.0 + 0.05 * year + 0.8 * nulli + 1.5 * arrest + 2.0 * breech;
        let (p0, p1) = inverse(theta, phi, TargetMeasure::Rr).unwrap();
        let p = if efm == 1.0 { p1 } else { p0 };
        let cs = f64::from(rng.random::<f64>() < p);
        text.push_str(&format!("{cs},{efm},{year},{nulli},{arrest},{breech}\n"));
    }
    let path = dir.join("cohort.csv");
    fs::write(&path, text).unwrap();
    path
}

fn fit_args<'a>(data: &'a str, out: &'a str, estimator: &'a str, variance: &'a str) -> Vec<&'a str> {
    vec![
        "fit", "--data", data, "--y", "cs", "--a", "efm", "--w-terms", TERMS, "--x-terms", TERMS, "--estimator",
        estimator, "--variance", variance, "--out", out,
    ]
}

#[test]
fn cohort_analysis_runs_for_every_estimator() {
    let dir = TempDir::new().unwrap();
    let data = synthetic_cohort(dir.path(), 4000, 7);
    let data = data.to_str().unwrap();
    for (est, var) in [("mle", "fisher"), ("drw", "sandwich"), ("dru", "sandwich"), ("dr-p0", "sandwich")] {
        let out = dir.path().join(est);
        ok(&fit_args(data, out.to_str().unwrap(), est, var));
        let rows = read_table(&out.join("coefficients.csv"));
        assert_eq!(&rows[0].iter().collect::<Vec<_>>(), &["name", "estimate", "se", "ci_low", "ci_high", "p_value"]);
        let expected = if est == "mle" { 18 } else { 9 };
        assert_eq!(rows.len() - 1, expected, "{est}");
        for r in &rows[1..] {
            let se: f64 = r[2].parse().unwrap();
            assert!(se.is_finite() && se > 0.0, "{est} {}: se {se}", &r[0]);
        }
        let fit = json(&out.join("fit.json"));
        assert_eq!(fit["estimator"], est);
        assert_eq!(fit["metadata"]["command"], "fit");
        assert_eq!(fit["alpha"]["values"].as_array().unwrap().len(), 9);
        assert_eq!(fit["alpha"]["names"][8], "arrest:breech:nulli");
        if est == "dr-p0" {
            assert_eq!(fit["dr"]["plug_in"], "linear_p0");
            assert_eq!(fit["dr"]["weight_kind"], "naive");
        }
        if est == "mle" {
            assert!(fit["nuisance"]["loglik"].as_f64().unwrap() < 0.0);
            assert!(fit["nuisance"]["converged"].as_bool().unwrap());
        }
    }
}

#[test]
fn subgroup_prediction_with_bootstrap_interval() {
    let dir = TempDir::new().unwrap();
    let data = synthetic_cohort(dir.path(), 3000, 8);
    let out = dir.path().join("boot");
    let mut args = fit_args(data.to_str().unwrap(), out.to_str().unwrap(), "mle", "bootstrap");
    args.extend(["--boot-reps", "60", "--seed", "11"]);
    ok(&args);
    let fit = json(&out.join("fit.json"));
    let reps = fit["bootstrap"]["alpha_replicates"].as_array().unwrap();
    assert_eq!(reps.len() + fit["bootstrap"]["failed"].as_u64().unwrap() as usize, 60);

    let new = dir.path().join("subgroup.csv");
    fs::write(&new, "year,nulli,arrest,breech\n0,0,0,0\n3,1,1,1\n").unwrap();
    let pred_dir = dir.path().join("pred");
    ok(&["predict", "--fit", out.join("fit.json").to_str().unwrap(), "--data", new.to_str().unwrap(), "--out", pred_dir.to_str().unwrap()]);
    let rows = read_table(&pred_dir.join("predictions.csv"));
    let header: Vec<&str> = rows[0].iter().collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let first = &rows[1];
    let alpha0 = fit["alpha"]["values"][0].as_f64().unwrap();
    let theta: f64 = first[col("theta")].parse().unwrap();
    let effect: f64 = first[col("effect")].parse().unwrap();
    assert!((theta - alpha0).abs() < 1e-12);
    assert!((effect - alpha0.exp()).abs() < 1e-12);
    assert_eq!(&first[col("ci_method")], "bootstrap-percentile");

    // Percentile oracle from the saved replicate intercepts.
    let mut draws: Vec<f64> = reps.iter().map(|r| r[0].as_f64().unwrap()).collect();
    draws.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = (draws.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(draws.len() - 1);
        draws[lo] + (h - lo as f64) * (draws[hi] - draws[lo])
    };
    let lo: f64 = first[col("effect_ci_low")].parse().unwrap();
    let hi: f64 = first[col("effect_ci_high")].parse().unwrap();
    assert!((lo - q(0.025).exp()).abs() < 1e-12 && (hi - q(0.975).exp()).abs() < 1e-12);
    assert!(lo < effect && effect < hi);
}

#[test]
fn wald_prediction_uses_delta_method() {
    let dir = TempDir::new().unwrap();
    let data = synthetic_cohort(dir.path(), 3000, 9);
    let out = dir.path().join("fit");
    ok(&fit_args(data.to_str().unwrap(), out.to_str().unwrap(), "drw", "sandwich"));
    let fit = json(&out.join("fit.json"));
    let new = dir.path().join("rows.csv");
    fs::write(&new, "year,nulli,arrest,breech\n2,1,0,1\n").unwrap();
    ok(&["predict", "--fit", out.join("fit.json").to_str().unwrap(), "--data", new.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let rows = read_table(&out.join("predictions.csv"));
    let w = [1.0, 2.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0];
    let cov = fit["alpha_covariance"].as_array().unwrap();
    let mut var = 0.0;
    for i in 0..9 {
        for j in 0..9 {
            var += w[i] * w[j] * cov[i][j].as_f64().unwrap();
        }
    }
    let se: f64 = rows[1][2].parse().unwrap();
    assert!((se - var.sqrt()).abs() < 1e-10, "{se} vs {}", var.sqrt());
    assert_eq!(&rows[1][10], "wald");
}

#[test]
fn null_intercept_fit_predicts_constants() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("d.csv");
    let mut text = String::from("y,a,x\n");
    for i in 0..200 {
        text.push_str(&format!("{},{},{}\n", i % 2, (i / 2) % 2, i % 7));
    }
    fs::write(&data, text).unwrap();
    let out = dir.path().join("o");
    ok(&["fit", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    ok(&["predict", "--fit", out.join("fit.json").to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let rows = read_table(&out.join("predictions.csv"));
    for r in &rows[1..] {
        let theta: f64 = r[1].parse().unwrap();
        assert!(theta.abs() < 1e-10);
        assert!((r[5].parse::<f64>().unwrap() - 0.5).abs() < 1e-10);
    }
}

#[test]
fn simulate_is_deterministic_and_flags_fast_mode() {
    let dir = TempDir::new().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&["simulate", "--fast", "--reps", "12", "--n", "200", "--seed", "5", "--out", out.to_str().unwrap()]);
        out
    };
    let (a, b) = (run("a"), run("b"));
    let csv_a = fs::read(a.join("study.csv")).unwrap();
    assert_eq!(csv_a, fs::read(b.join("study.csv")).unwrap());
    assert_eq!(fs::read(a.join("study.json")).unwrap(), fs::read(b.join("study.json")).unwrap());
    let text = String::from_utf8(csv_a).unwrap();
    assert!(text.contains("# fast: true") && text.contains("# seed: 5"));
    let rows = read_table(&a.join("study.csv"));
    assert_eq!(rows.len() - 1, 4 * 3 * 2);
    let study = json(&a.join("study.json"));
    assert_eq!(study["config"]["reps"], 12);
    assert_eq!(study["cells"].as_array().unwrap().len(), 12);
}

#[test]
fn simulate_reads_json_config_with_flag_overrides() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("study.json");
    fs::write(
        &cfg,
        r#"{"truth": "linear_p0", "measure": "rd", "n": 150, "reps": 50, "nuisance": "linear_p0",
            "scenarios": ["bth"], "estimators": ["mle", "drw"], "seed": 3}"#,
    )
    .unwrap();
    let out = dir.path().join("o");
    ok(&["simulate", "--config", cfg.to_str().unwrap(), "--reps", "6", "--out", out.to_str().unwrap()]);
    let study = json(&out.join("study.json"));
    assert_eq!(study["config"]["reps"], 6);
    assert_eq!(study["config"]["design"]["n"], 150);
    assert_eq!(study["config"]["nuisance_form"], "linear_p0");
    assert_eq!(study["metadata"]["fast"], false);
    let rows = read_table(&out.join("study.csv"));
    assert_eq!(rows.len() - 1, 2 * 2);
    assert!(rows[1..].iter().all(|r| &r[0] == "rd" && &r[1] == "linear_p0"));
}

#[test]
fn curves_default_grid() {
    let dir = TempDir::new().unwrap();
    ok(&["curves", "--out", dir.path().to_str().unwrap()]);
    let rows = read_table(&dir.path().join("curves.csv"));
    assert_eq!(rows.len() - 1, 5 * 81);
    for r in &rows[1..] {
        let p0: f64 = r[2].parse().unwrap();
        let p1: f64 = r[3].parse().unwrap();
        assert!(p0 > 0.0 && p0 < 1.0 && p1 > 0.0 && p1 < 1.0);
    }
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();

    let missing = rrdr(&["fit", "--data", "/nonexistent/d.csv", "--out", out]);
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(error_of(&missing)["category"], "io");

    let data = synthetic_cohort(dir.path(), 300, 1);
    let data = data.to_str().unwrap();
    let no_x = rrdr(&["fit", "--data", data, "--y", "cs", "--a", "efm", "--estimator", "drw", "--out", out]);
    assert_eq!(no_x.status.code(), Some(3));
    assert_eq!(error_of(&no_x)["category"], "spec");

    let bad_combo = rrdr(&["fit", "--data", data, "--y", "cs", "--a", "efm", "--variance", "sandwich", "--out", out]);
    assert_eq!(bad_combo.status.code(), Some(3));

    let bad_flag = rrdr(&["fit", "--measure", "or"]);
    assert_eq!(bad_flag.status.code(), Some(3));

    let dup = rrdr(&["fit", "--data", data, "--y", "cs", "--a", "efm", "--w-terms", "nulli", "--z-terms", "nulli,nulli", "--out", out]);
    assert_eq!(dup.status.code(), Some(5), "{}", String::from_utf8_lossy(&dup.stderr));
    assert_eq!(error_of(&dup)["category"], "singularity");

    let workers = Command::new(BIN).args(["curves", "--out", out]).env("RRDR_WORKERS", "zero").output().unwrap();
    assert_eq!(workers.status.code(), Some(3));

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"unknown_key": 1}"#).unwrap();
    let unknown = rrdr(&["curves", "--config", cfg.to_str().unwrap(), "--out", out]);
    assert_eq!(unknown.status.code(), Some(3));
}
