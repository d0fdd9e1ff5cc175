use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};
use sidthe_core::{simulate, ControlInput, ControlSchedule, MassRepair, Params, State};

const SUBGRID: &str = r#""scenarios": {"perturbed": [true, false, false, true, true, false]}"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sidthe-smpc"));
    c.env_remove("SIDTHE_SMPC_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, body).unwrap();
    p
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn zero_day_simulation_writes_only_the_initial_state() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = run(&["simulate", "--days", "0", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = read_csv(&out.join("trajectory.csv"));
    assert_eq!(header, ["day", "S", "I", "D", "T", "H", "E", "u", "status"]);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][7], "");
}

#[test]
fn uncontrolled_simulation_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = run(&["simulate", "--days", "200", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (_, rows) = read_csv(&out.join("trajectory.csv"));
    let x0 = State::outbreak(MassRepair::Susceptible);
    let tr = simulate(
        &x0,
        &ControlSchedule::constant(ControlInput::NONE, 200),
        &Params::nominal(),
        200,
    )
    .unwrap();
    assert_eq!(rows.len(), 201);
    for (row, x) in rows.iter().zip(&tr.states) {
        for k in 0..6 {
            let v: f64 = row[1 + k].parse().unwrap();
            assert_eq!(v, x.as_array()[k]);
        }
    }
    assert!(rows[..200]
        .iter()
        .all(|r| r[7].parse::<f64>().unwrap() == 0.0));
}

#[test]
fn open_loop_blocks_hold_the_last_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"experiment": {"days": 10, "open_loop": {"block_days": 3, "controls": [0.1, 0.4]}}}"#,
    );
    let out = dir.path().join("o");
    let o = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "simulate",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (_, rows) = read_csv(&out.join("trajectory.csv"));
    let u: Vec<String> = rows.iter().map(|r| r[7].clone()).collect();
    assert_eq!(&u[..3], ["1e-1"; 3]);
    assert!(u[3..10].iter().all(|v| v == "4e-1"));
    assert_eq!(u[10], "");
}

#[test]
fn configuration_errors_exit_with_1_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"ocp": {"horizon_blockz": 3}}"#);
    let o = run(&["--config", cfg.to_str().unwrap(), "simulate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("horizon_blockz"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), r#"{"experiment": {"days": -3}}"#);
    let o = run(&["--config", cfg.to_str().unwrap(), "simulate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("experiment.days"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), "{ not json");
    assert_eq!(
        run(&["--config", cfg.to_str().unwrap(), "simulate"])
            .status
            .code(),
        Some(1)
    );

    let cfg = write_config(
        dir.path(),
        r#"{"model": {"x0": [0.9, -0.1, 0.0, 0.0, 0.0, 0.0]}}"#,
    );
    let o = run(&["--config", cfg.to_str().unwrap(), "simulate"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));

    assert_eq!(run(&["--plants", "file", "mpc"]).status.code(), Some(1));
    assert_eq!(
        run(&["--horizon-blocks", "0", "mpc"]).status.code(),
        Some(1)
    );
}

#[test]
fn usage_errors_exit_with_1_and_help_with_0() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--mode", "bogus", "mpc"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn invalid_thread_count_is_a_configuration_error() {
    let o = bin()
        .env("SIDTHE_SMPC_THREADS", "zero")
        .args(["scenarios"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("SIDTHE_SMPC_THREADS"));
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let out = blocker.join("sub");
    let o = run(&["simulate", "--days", "3", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

fn invariant_json(dir: &Path, body: &str) -> Value {
    let cfg = write_config(dir, body);
    let out = dir.join("o");
    let o = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "invariant-set",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let printed: Value = serde_json::from_slice(&o.stdout).unwrap();
    let written: Value =
        serde_json::from_slice(&std::fs::read(out.join("invariant_set.json")).unwrap()).unwrap();
    assert_eq!(printed, written);
    written
}

#[test]
fn invariant_boxes_from_hand_computed_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let v = invariant_json(dir.path(), "{}");
    let (sigma, tau, delta, gamma, lambda) = (0.015, 0.01, 2e-3, 0.1, 0.09);
    let d = (sigma + tau) * 2e-3 / delta;
    let i = (delta + lambda) * d / gamma;
    let nominal = &v["nominal"];
    assert!((nominal["t_max"].as_f64().unwrap() - 2e-3).abs() < 1e-15);
    assert!((nominal["d_max"].as_f64().unwrap() - d).abs() < 1e-12);
    assert!((nominal["i_max"].as_f64().unwrap() - i).abs() < 1e-12);
    assert_eq!(nominal["s_max"].as_f64().unwrap(), 1.0);
    // Each rate occurrence takes its least favourable end of the ±5% band.
    let (lo, hi) = (0.95, 1.05);
    let d_rob = (sigma + tau) * lo * 2e-3 / (delta * hi);
    let i_rob = (delta * lo + lambda * lo) * (sigma + tau) * lo * 2e-3 / (gamma * hi * delta * hi);
    let robust = &v["robust"];
    assert!((robust["d_max"].as_f64().unwrap() - d_rob).abs() < 1e-12);
    assert!((robust["i_max"].as_f64().unwrap() - i_rob).abs() < 1e-12);

    // A single grid level collapses the interval to the nominal point.
    let v = invariant_json(dir.path(), r#"{"scenarios": {"levels": 1}}"#);
    assert_eq!(v["robust"], v["nominal"]);
    assert_eq!(v["lower"], v["upper"]);

    let v2 = invariant_json(
        dir.path(),
        r#"{"ocp": {"state_bounds": [{"compartment": "T", "max": 0.004}]}}"#,
    );
    let base = invariant_json(dir.path(), "{}");
    for k in ["i_max", "d_max", "t_max"] {
        let ratio = v2["robust"][k].as_f64().unwrap() / base["robust"][k].as_f64().unwrap();
        assert!((ratio - 2.0).abs() < 1e-12, "{k}: {ratio}");
    }
}

#[test]
fn scenario_export_lists_the_full_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = run(&["scenarios", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value =
        serde_json::from_slice(&std::fs::read(out.join("scenarios.json")).unwrap()).unwrap();
    let list = v.as_array().unwrap();
    assert_eq!(list.len(), 729);
    let total: f64 = list.iter().map(|s| s["p"].as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert_eq!(list[0]["theta"].as_array().unwrap().len(), 6);
}

fn mpc(dir: &Path, body: &str, args: &[&str]) -> PathBuf {
    let cfg = write_config(dir, body);
    let out = dir.join("o");
    let mut all = vec![
        "--config",
        cfg.to_str().unwrap(),
        "mpc",
        "--out",
        out.to_str().unwrap(),
    ];
    all.extend_from_slice(args);
    let o = run(&all);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

#[test]
fn nominal_controller_on_the_adverse_plant_reports_violations() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(r#"{{{SUBGRID}, "experiment": {{"days": 84, "snapshot_days": []}}}}"#);
    let out = mpc(
        dir.path(),
        &body,
        &["--mode", "nominal", "--plants", "adverse"],
    );
    let (header, rows) = read_csv(&out.join("violations.csv"));
    assert_eq!(header, ["plant", "day", "compartment", "value", "bound"]);
    assert!(!rows.is_empty());
    for r in &rows {
        assert_eq!(r[2], "T");
        assert!(r[3].parse::<f64>().unwrap() > r[4].parse::<f64>().unwrap());
    }
    let (sh, summary) = read_csv(&out.join("summary.csv"));
    let col = sh.iter().position(|h| h == "violation_days").unwrap();
    assert_eq!(summary[0][col].parse::<usize>().unwrap(), rows.len());
}

#[test]
fn safe_set_runs_stay_in_the_box() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(r#"{{{SUBGRID}, "experiment": {{"days": 56, "snapshot_days": [14]}}}}"#);
    let out = mpc(dir.path(), &body, &["--mode", "safe-set"]);
    let (header, rows) = read_csv(&out.join("runs/plant_0000.csv"));
    assert_eq!(header.last().unwrap(), "in_safe_set");
    assert_eq!(rows.len(), 57);
    assert!(rows.iter().all(|r| r.last().unwrap() == "true"));
    let (sh, snap) = read_csv(&out.join("figures/snapshot_day014.csv"));
    assert_eq!(sh[..2], ["scenario", "day"]);
    let scenarios: std::collections::BTreeSet<&str> = snap.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(scenarios.len(), 14);
    assert!(snap.iter().all(|r| r[1].parse::<usize>().unwrap() >= 14));
}

fn checksums(out: &Path) -> Vec<(String, String)> {
    let m: Value =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    m["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| {
            (
                a["path"].as_str().unwrap().to_string(),
                a["sha256"].as_str().unwrap().to_string(),
            )
        })
        .collect()
}

#[test]
fn manifest_checksums_match_and_reruns_reproduce_them() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(r#"{{{SUBGRID}, "experiment": {{"days": 28, "snapshot_days": [0]}}}}"#);
    let out = mpc(dir.path(), &body, &["--plants", "grid", "--mode", "robust"]);
    let sums = checksums(&out);
    assert_eq!(sums.len(), 27 * 2 + 5);
    assert!(sums
        .iter()
        .all(|(p, _)| p != "timings.json" && p != "manifest.json"));
    for (p, h) in &sums {
        assert_eq!(
            &hex::encode(Sha256::digest(std::fs::read(out.join(p)).unwrap())),
            h,
            "{p}"
        );
    }
    let manifest: Value =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "mpc");
    assert_eq!(manifest["resolved_config"]["experiment"]["mode"], "robust");

    let again = dir.path().join("again");
    let o = run(&[
        "--config",
        out.join("config.resolved.json").to_str().unwrap(),
        "mpc",
        "--out",
        again.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(checksums(&again), sums);
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"scenarios": {"perturbed": [true, false, false, true, true, false]}, "experiment": {"days": 28, "snapshot_days": []}}"#,
    );
    let mut sums = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("t{threads}"));
        let o = bin()
            .env("SIDTHE_SMPC_THREADS", threads)
            .args([
                "--config",
                cfg.to_str().unwrap(),
                "--plants",
                "grid",
                "mpc",
                "--out",
                out.to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        sums.push(checksums(&out));
    }
    assert_eq!(sums[0], sums[1]);
}
