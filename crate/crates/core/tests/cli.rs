//! End-to-end runs of every CLI command against the bundled model documents.

use std::path::{Path, PathBuf};

use imr::cli::{cmd_app, cmd_enumerate, cmd_simulate, cmd_verify, AppChoice};

fn model_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../models")
        .join(name)
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name))
        .unwrap_or_else(|e| panic!("missing {name}: {e}"))
}

#[test]
fn enumerate_bernoulli_model() {
    let out = tempfile::tempdir().unwrap();
    let passed = cmd_enumerate(&model_path("bernoulli_delete.json"), out.path()).unwrap();
    assert!(passed);

    let paths = read(out.path(), "paths.csv");
    let lines: Vec<&str> = paths.lines().collect();
    assert_eq!(lines[0], "path_id,probability,events,t_in_1,t_del_1,mark_1");
    assert_eq!(lines.len(), 4, "three paths plus header");
    // probabilities column sums to 1
    let total: f64 = lines[1..]
        .iter()
        .map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((total - 1.0).abs() < 1e-12);

    let states = read(out.path(), "states.csv");
    assert!(states.starts_with("path_id,t,side,active_set,marks\n"));
    // the deleted path still shows the mark on the left side of t_2
    assert!(states.contains("2,left,1,a"));

    let manifest = read(out.path(), "manifest.json");
    assert!(manifest.contains("\"command\": \"enumerate\""));
}

#[test]
fn verify_payoff_and_process_targets() {
    let out = tempfile::tempdir().unwrap();
    let model = model_path("bernoulli_delete.json");
    for target in ["xi:mark_a", "xi:weighted", "process:occupancy", "process:occupancy_forward"] {
        let passed = cmd_verify(&model, out.path(), target, 1e-10).unwrap();
        assert!(passed, "target {target}");
        let report = read(out.path(), "representation_report.csv");
        assert!(report.starts_with("path_id,t,lhs,drift,if_integral,ib_integral,residual\n"));
    }
    // unknown target is a hard error
    assert!(cmd_verify(&model, out.path(), "xi:nope", 1e-10).is_err());
    assert!(cmd_verify(&model, out.path(), "garbage", 1e-10).is_err());
}

#[test]
fn verify_constant_payoff_zero_residual() {
    // a constant payoff has an identically zero ledger
    let out = tempfile::tempdir().unwrap();
    let doc = r#"{
        "grid": [0.0, 1.0],
        "marks": ["a"],
        "pieces": 1,
        "transitions": [{"history": [], "next": {"+1:a": 0.5, "": 0.5}}],
        "payoffs": {"c": {"const": 3.0}}
    }"#;
    let file = out.path().join("model.json");
    std::fs::write(&file, doc).unwrap();
    assert!(cmd_verify(&file, out.path(), "xi:c", 1e-10).unwrap());
    let report = read(out.path(), "representation_report.csv");
    for line in report.lines().skip(1) {
        let residual: f64 = line.split(',').next_back().unwrap().parse().unwrap();
        assert_eq!(residual, 0.0);
    }
}

#[test]
fn simulate_is_deterministic_per_seed() {
    let out_a = tempfile::tempdir().unwrap();
    let out_b = tempfile::tempdir().unwrap();
    let model = model_path("bernoulli_delete.json");
    assert!(cmd_simulate(&model, out_a.path(), 42, 2000, 2, None, 1e-10).unwrap());
    assert!(cmd_simulate(&model, out_b.path(), 42, 2000, 2, None, 1e-10).unwrap());
    for name in ["estimates.csv", "diagnostics.csv", "diagnostics_backward.csv"] {
        assert_eq!(read(out_a.path(), name), read(out_b.path(), name), "{name}");
    }
    // a different seed moves the estimates
    let out_c = tempfile::tempdir().unwrap();
    assert!(cmd_simulate(&model, out_c.path(), 43, 2000, 2, None, 1e-10).unwrap());
    assert_ne!(
        read(out_a.path(), "estimates.csv"),
        read(out_c.path(), "estimates.csv")
    );

    let estimates = read(out_a.path(), "estimates.csv");
    assert!(estimates.starts_with("t,state_key,estimate,stderr,n_cell\n"));
    let diagnostics = read(out_a.path(), "diagnostics.csv");
    assert!(diagnostics.starts_with("level,mesh,sum\n"));
}

#[test]
fn simulate_flags_absent_cells() {
    let out = tempfile::tempdir().unwrap();
    let model = model_path("bernoulli_delete.json");
    // a single draw cannot visit all cells; absent rows carry empty estimates
    assert!(cmd_simulate(&model, out.path(), 7, 1, 1, Some("mark_a"), 1e-10).unwrap());
    let estimates = read(out.path(), "estimates.csv");
    assert!(
        estimates.lines().any(|l| l.ends_with(",,,0")),
        "expected absent cells in:\n{estimates}"
    );
}

#[test]
fn thiele_app_ledger() {
    let out = tempfile::tempdir().unwrap();
    let passed = cmd_app(
        &model_path("thiele_erasure.json"),
        out.path(),
        AppChoice::Thiele,
        1e-9,
    )
    .unwrap();
    assert!(passed);
    let reserve = read(out.path(), "thiele_reserve.csv");
    assert!(reserve.starts_with(
        "path_id,t,reserve,delta_b,interest_drift,if_increment,ib_increment,residual\n"
    ));
    // terminal reserve is zero on every path
    for line in reserve.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields[1] == "3" {
            assert_eq!(fields[2], "0");
        }
    }
    let risk = read(out.path(), "thiele_sum_at_risk.csv");
    assert!(risk.starts_with("path_id,t,index_set,marks,value\n"));
    assert!(risk.lines().count() > 1);
}

#[test]
fn markov_app_reports_positive_gap() {
    let out = tempfile::tempdir().unwrap();
    let passed = cmd_app(
        &model_path("markov_duration.json"),
        out.path(),
        AppChoice::Markov,
        1e-9,
    )
    .unwrap();
    assert!(passed);
    let gap_csv = read(out.path(), "markov_gap.csv");
    assert!(gap_csv
        .starts_with("path_id,t,proj_full_history,proj_state,gap,ib_increment,ib_running_abs\n"));
    let max_gap = gap_csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(4).unwrap().parse::<f64>().unwrap().abs())
        .fold(0.0f64, f64::max);
    assert!(max_gap > 1e-3, "duration dependence must show up: {max_gap}");
}

#[test]
fn location_app_sweep_decreases_with_retention() {
    let out = tempfile::tempdir().unwrap();
    let passed = cmd_app(
        &model_path("location_autodelete.json"),
        out.path(),
        AppChoice::Location,
        1e-9,
    )
    .unwrap();
    assert!(passed);
    let sweep = read(out.path(), "location_delta_sweep.csv");
    let rows: Vec<Vec<f64>> = sweep
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 4);
    // retention at the horizon wipes out the averaging effect
    let shortest = rows.first().unwrap();
    let longest = rows.last().unwrap();
    assert!(longest[2] < 1e-12, "full retention ib: {}", longest[2]);
    assert!(shortest[2] > 1e-4, "short retention ib: {}", shortest[2]);
}

#[test]
fn verify_monotone_model_has_zero_backward_column() {
    // a model without deletions where the state determines the history:
    // the ib_integral column must be identically zero
    let doc = r#"{
        "meta": {"implicit_no_event": true},
        "grid": [0.0, 1.0, 2.0, 3.0],
        "marks": ["a", "b"],
        "pieces": 2,
        "transitions": [
            {"history": [], "next": {"+1:a": 0.3, "+1:b": 0.3, "": 0.4}},
            {"history": ["+1:a"], "next": {"+2:a": 0.5, "": 0.5}},
            {"history": ["+1:b"], "next": {"+2:b": 0.6, "": 0.4}},
            {"history": [""], "next": {"+2:a": 0.2, "": 0.8}}
        ],
        "payoffs": {"target": {"add": [
            {"mark_is": {"piece": 1, "mark": "a"}},
            {"mul": [{"const": 0.5}, {"occurs": {"index": 3}}]}
        ]}}
    }"#;
    let out = tempfile::tempdir().unwrap();
    let file = out.path().join("monotone.json");
    std::fs::write(&file, doc).unwrap();
    // pieces are tied to their innovation step here, so the state reveals the
    // full history and nothing is ever forgotten
    assert!(cmd_verify(&file, out.path(), "xi:target", 1e-10).unwrap());
    let report = read(out.path(), "representation_report.csv");
    for line in report.lines().skip(1) {
        let ib: f64 = line.split(',').nth(5).unwrap().parse().unwrap();
        assert_eq!(ib, 0.0, "backward column must vanish: {line}");
    }
}
