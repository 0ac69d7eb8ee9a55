use std::process::{Command, Output};

use serde_json::Value;

fn rmab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rmab")).args(args).output().expect("binary runs")
}

fn json(args: &[&str]) -> Value {
    let out = rmab(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn fixed_point_direct_and_decomposed_agree() {
    let direct = json(&["solve-fixed-point", "yan:6"]);
    let split = json(&["solve-fixed-point", "yan:6", "--decomposed"]);
    let g = direct["fixed_point"]["gain"].as_f64().unwrap();
    assert!((g - split["fixed_point"]["gain"].as_f64().unwrap()).abs() < 1e-6);
}

#[test]
fn weakly_coupled_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.json");
    // Two one-state arms, one pull between them, reward 1 per pull.
    std::fs::write(
        &path,
        r#"{"actions": 2, "budgets": [0.5],
            "arms": [{"states": 1, "P0": [[1.0]], "P1": [[1.0]], "r0": [0.0], "r1": [1.0]},
                     {"states": 1, "P": [[[1.0]], [[1.0]]], "r": [[0.0], [1.0]]}],
            "costs": [[[[0.0, 1.0]]], [[[0.0, 1.0]]]]}"#,
    )
    .unwrap();
    let p = path.to_str().unwrap();
    let v = json(&["solve-fixed-point", p, "--wmdp"]);
    assert!((v["fixed_point"]["gain"].as_f64().unwrap() - 0.5).abs() < 1e-9, "{v}");
}

#[test]
fn plan_from_a_state() {
    let v = json(&["plan", "yan:4", "--tau", "2", "--state", "0,1,2,0"]);
    assert_eq!(v["plan"]["tau"], 2);
    assert_eq!(v["plan"]["flows"].as_array().unwrap().len(), 4);
    let bad = rmab(&["plan", "yan:4", "--tau", "2", "--state", "0,1"]);
    assert!(!bad.status.success());
    assert!(!bad.stderr.is_empty());
}

#[test]
fn simulate_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = rmab(&["--seed", "3", "--replicates", "2", "--out", d, "simulate", "yan:6", "--horizon", "20"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("simulate.csv")).unwrap();
    assert!(csv.starts_with("scenario,policy,N,alpha,tau,seed,t,avg_reward,normalized_reward"));
    assert_eq!(csv.lines().count(), 1 + 2 * 20);
    let summary: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("simulate_summary.json")).unwrap()).unwrap();
    assert!(summary.to_string().contains("lp-update-4"));
}

#[test]
fn analyze_reports_coefficients_and_optimum() {
    let v = json(&["analyze", "yan:3", "--rho-k", "2", "--brute-force"]);
    let rho = v["ergodicity"]["entries"][0]["rho"].as_f64().unwrap();
    assert!((rho - 16.0 / 111.0).abs() < 1e-12);
    assert!(v["brute_force"]["value"].as_f64().unwrap() > 0.0);
    assert!(!rmab(&["analyze", "yan:3", "--rho-k", "9"]).status.success());
}

#[test]
fn experiment_and_scenario_listing() {
    let listing = rmab(&["list-scenarios"]);
    let text = String::from_utf8(listing.stdout).unwrap();
    assert_eq!(text.lines().count(), 9);

    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("tiny.toml");
    std::fs::write(
        &spec,
        "scenario = \"tiny\"\ninstance = \"mixed\"\nnum_arms = [6]\ntau = [2]\npolicies = [\"lp-update\", \"lp-priority\"]\nhorizon = 10\nreplicates = 2\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = rmab(&[
        "--out",
        out_dir.to_str().unwrap(),
        "experiment",
        "--scenario",
        spec.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("tiny.csv").exists());
    assert!(out_dir.join("tiny_summary.json").exists());
}

#[test]
fn unknown_instance_is_an_error() {
    let out = rmab(&["solve-fixed-point", "/no/such/file.json"]);
    assert!(!out.status.success());
}
