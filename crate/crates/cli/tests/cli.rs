use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mlmi(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlmi"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = mlmi(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SLOPE_SPEC: &str = r#"{
  "n_groups": 40,
  "group_size": 12,
  "responses": ["y"],
  "covariates": ["x"],
  "random_slopes": ["x"],
  "beta": [[1.0], [0.5]],
  "psi": [[0.5, 0.0], [0.0, 0.6]],
  "sigma": [[1.0]],
  "seed": 17
}"#;

fn slope_data(dir: &Path) {
    fs::write(dir.join("spec.json"), SLOPE_SPEC).unwrap();
    ok(dir, &["synth", "two-level", "--config", "spec.json", "--ampute", "y=0.2", "--out", "d.csv"]);
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mlmi(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(mlmi(dir.path(), &["patterns", "--bogus"]).status.code(), Some(1));
    assert_eq!(mlmi(dir.path(), &["--help"]).status.code(), Some(0));
    let help = mlmi(dir.path(), &["impute", "--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("--burnin"));
    let missing = mlmi(dir.path(), &["patterns", "--data", "nope.csv", "--group", "g"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn patterns_and_correlations_report() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "pirls", "--seed", "3", "--out", "p.csv"]);
    assert!(dir.path().join("p.truth.json").exists());
    let text = ok(dir.path(), &["patterns", "--data", "p.csv", "--group", "ID", "--cumulative", "90"]);
    assert!(text.starts_with("Pattern"), "{text}");
    let json = ok(dir.path(), &["patterns", "--data", "p.csv", "--group", "ID", "--format", "json"]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["n_rows"], 8767);
    let corr = ok(dir.path(), &["correlate", "--data", "p.csv", "--group", "ID", "--format", "json"]);
    assert!(corr.contains("MA"));
}

#[test]
fn impute_refuses_incomplete_predictor() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("d.csv"), "g,y,x\n1,1.0,0.5\n1,,0.1\n2,2.0,\n2,1.5,0.3\n").unwrap();
    let out = mlmi(
        dir.path(),
        &["impute", "--data", "d.csv", "--group", "g", "--formula", "y ~ 1 + x + (1|g)", "--seed", "1", "--out", "run"],
    );
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("'x'") && err.contains("row 3"), "{err}");
    assert!(!dir.path().join("run").exists());
}

#[test]
fn flags_override_config_and_echo_is_reusable() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(p, &["synth", "two-level", "--icc", "0.3", "--groups", "15", "--size", "6", "--seed", "2", "--ampute", "y=0.25", "--out", "d.csv"]);
    fs::write(
        p.join("cfg.json"),
        r#"{"data": "d.csv", "group": "group", "formula": "y ~ 1 + (1|group)",
            "n_burn": 50, "n_between": 10, "m": 3, "seed": 1}"#,
    )
    .unwrap();
    ok(p, &["impute", "--config", "cfg.json", "--seed", "9", "--out", "a"]);
    let echo: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("a/spec.json")).unwrap()).unwrap();
    assert_eq!(echo["seed"], 9);
    assert_eq!(echo["m"], 3);
    assert_eq!(echo["trace_stride"], 10);

    ok(p, &["impute", "--config", "a/spec.json", "--out", "b"]);
    for f in ["imp_001.csv", "imp_003.csv", "chain.csv", "spec.json"] {
        assert_eq!(fs::read(p.join("a").join(f)).unwrap(), fs::read(p.join("b").join(f)).unwrap(), "{f}");
    }
    let bad = mlmi(p, &["impute", "--config", "cfg.json", "--out", "c", "--m", "0"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn rerun_with_fewer_imputations_removes_stale_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(p, &["synth", "two-level", "--icc", "0.2", "--groups", "10", "--size", "5", "--seed", "4", "--ampute", "y=0.2", "--out", "d.csv"]);
    let base = ["impute", "--data", "d.csv", "--group", "group", "--formula", "y ~ 1 + (1|group)", "--burnin", "20", "--between", "5", "--seed", "1", "--out", "run"];
    let mut four = base.to_vec();
    four.extend(["--m", "4"]);
    ok(p, &four);
    let mut two = base.to_vec();
    two.extend(["--m", "2"]);
    ok(p, &two);
    assert_eq!(mlmi_cli::list_numbered(&p.join("run"), "imp", "csv").unwrap().len(), 2);
}

#[test]
fn complete_data_pools_to_zero_fmi() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(p, &["synth", "two-level", "--icc", "0.2", "--groups", "20", "--size", "8", "--seed", "5", "--out", "d.csv"]);
    ok(p, &["impute", "--data", "d.csv", "--group", "group", "--formula", "y ~ 1 + (1|group)", "--burnin", "20", "--between", "5", "--m", "3", "--seed", "1", "--out", "run"]);
    ok(p, &["analyze", "--imputations", "run", "--group", "group", "--formula", "y ~ 1 + (1|group)", "--jobs", "2", "--out", "run/fits"]);
    let json = ok(p, &["pool", "estimates", "--fits", "run/fits", "--format", "json"]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    for par in v["parameters"].as_array().unwrap() {
        assert_eq!(par["fmi"].as_f64().unwrap(), 0.0, "{par}");
        assert_eq!(par["df"], "Inf");
    }
}

#[test]
fn transform_directory_then_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    slope_data(p);
    ok(p, &["impute", "--data", "d.csv", "--group", "group", "--formula", "y ~ 1 + x + (1 + x|group)", "--burnin", "50", "--between", "10", "--m", "3", "--seed", "2", "--out", "run"]);
    ok(p, &["transform", "--input", "run", "--group", "group", "--script", "groupmean(x -> x.mean); cwc(x -> x.cwc)", "--out", "tr"]);
    let head = fs::read_to_string(p.join("tr/imp_002.csv")).unwrap();
    assert!(head.lines().next().unwrap().ends_with("x.mean,x.cwc"), "{head}");
    ok(p, &["analyze", "--imputations", "tr", "--group", "group", "--formula", "y ~ 1 + x.cwc + x.mean + (1|group)", "--out", "fits"]);
    let text = ok(p, &["pool", "constraints", "--fits", "fits", "--constraint", "x.mean - x.cwc"]);
    assert!(text.contains("D1"), "{text}");

    // the same via analyze --transform
    ok(p, &["analyze", "--imputations", "run", "--group", "group", "--formula", "y ~ 1 + x.cwc + x.mean + (1|group)", "--transform", "groupmean(x -> x.mean); cwc(x -> x.cwc)", "--out", "fits2"]);
    for f in ["fit_001.json", "fit_003.json"] {
        assert_eq!(fs::read(p.join("fits").join(f)).unwrap(), fs::read(p.join("fits2").join(f)).unwrap());
    }
}

#[test]
fn compare_models_with_d2_and_d3() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    slope_data(p);
    ok(p, &["impute", "--data", "d.csv", "--group", "group", "--formula", "y ~ 1 + x + (1 + x|group)", "--burnin", "200", "--between", "20", "--m", "5", "--seed", "3", "--out", "run"]);
    ok(p, &["analyze", "--imputations", "run", "--group", "group", "--formula", "y ~ 1 + x + (1 + x|group)", "--method", "ml", "--out", "full"]);
    ok(p, &["analyze", "--imputations", "run", "--group", "group", "--formula", "y ~ 1 + x + (1|group)", "--method", "ml", "--out", "null"]);
    let d3: serde_json::Value = serde_json::from_str(&ok(p, &["pool", "compare", "--full", "full", "--null", "null", "--format", "json"])).unwrap();
    assert_eq!(d3["procedure"], "D3");
    assert_eq!(d3["df1"], 2.0);
    assert!(d3["p_value"].as_f64().unwrap() < 0.05, "{d3}");
    let d2: serde_json::Value = serde_json::from_str(&ok(p, &["pool", "compare", "--full", "full", "--null", "null", "--method", "d2", "--format", "json"])).unwrap();
    assert_eq!(d2["procedure"], "D2");
    let same: serde_json::Value = serde_json::from_str(&ok(p, &["pool", "compare", "--full", "full", "--null", "full", "--format", "json"])).unwrap();
    assert_eq!(same["f_value"], 0.0);
    assert_eq!(same["p_value"], 1.0);

    // REML fits are refused for likelihood-ratio pooling
    ok(p, &["analyze", "--imputations", "run", "--group", "group", "--formula", "y ~ 1 + x + (1|group)", "--out", "reml"]);
    let out = mlmi(p, &["pool", "compare", "--full", "full", "--null", "reml"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn diagnose_writes_plots() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(p, &["synth", "two-level", "--icc", "0.2", "--groups", "10", "--size", "5", "--seed", "4", "--ampute", "y=0.2", "--out", "d.csv"]);
    ok(p, &["impute", "--data", "d.csv", "--group", "group", "--formula", "y ~ 1 + (1|group)", "--burnin", "100", "--between", "20", "--m", "5", "--seed", "1", "--stride", "1", "--out", "run"]);
    let text = ok(p, &["diagnose", "--chain", "run", "--plot", "Beta[1,1]", "--kind", "trace,acf"]);
    assert!(text.contains("Potential scale reduction"));
    assert!(p.join("run/plots/Beta_1_1_trace.svg").exists());
    assert!(p.join("run/plots/Beta_1_1_acf.csv").exists());
    assert!(!p.join("run/plots/Beta_1_1_posterior.csv").exists());
    let json = ok(p, &["diagnose", "--chain", "run/chain.csv", "--format", "json"]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["iterations_used"], 100);
    let bad = mlmi(p, &["diagnose", "--chain", "run", "--plot", "Nope[1,1]"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn numerical_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(p, &["synth", "two-level", "--icc", "0.2", "--groups", "10", "--size", "5", "--seed", "4", "--ampute", "y=0.2", "--out", "d.csv"]);
    ok(p, &["impute", "--data", "d.csv", "--group", "group", "--formula", "y ~ 1 + (1|group)", "--burnin", "20", "--between", "5", "--m", "3", "--seed", "1", "--out", "run"]);
    ok(p, &["analyze", "--imputations", "run", "--group", "group", "--formula", "y ~ 1 + (1|group)", "--out", "fits"]);
    let out = mlmi(p, &["pool", "constraints", "--fits", "fits", "--constraint", "Intercept", "--constraint", "2*Intercept"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
