mod common;

use std::process::Command;

use common::csv_digest;
use flexarm::export::{position_error, read_csv, write_csv};
use flexarm::scenario::{Scenario, ScenarioFile};
use flexarm::sim::{run, Record, TransitionCause};

const GOLDEN: &str = include_str!("golden/mixed_first_record.csv");

fn builtin(name: &str) -> Scenario {
    Scenario::builtin(name).unwrap()
}

#[test]
fn log_schema_matches_golden_file() {
    let sc = ScenarioFile::parse("").unwrap().into_scenario().unwrap();
    let mut short = sc.clone();
    short.duration = 0.025;
    let log = run(&short).unwrap();
    let mut buf = Vec::new();
    write_csv(&log, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    let mut golden = GOLDEN.lines();
    assert_eq!(lines.next(), golden.next(), "header changed");

    let row: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    let expected: Vec<f64> = golden.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(row.len(), expected.len());
    for (i, (a, b)) in row.iter().zip(&expected).enumerate() {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "column {i}: {a} vs {b}");
    }
}

#[test]
fn same_seed_gives_identical_logs() {
    for name in ["mixed", "position"] {
        let sc = builtin(name);
        assert_eq!(csv_digest(&run(&sc).unwrap()), csv_digest(&run(&sc).unwrap()), "{name}");
    }
    let mut other = builtin("mixed");
    other.seed += 1;
    other.duration = 10.0;
    let mut base = builtin("mixed");
    base.duration = 10.0;
    assert_ne!(csv_digest(&run(&base).unwrap()), csv_digest(&run(&other).unwrap()));
}

#[test]
fn csv_round_trips_exactly() {
    let mut sc = builtin("mixed");
    sc.duration = 8.0;
    let log = run(&sc).unwrap();
    let mut buf = Vec::new();
    write_csv(&log, &mut buf).unwrap();
    let back = read_csv(buf.as_slice(), log.n, log.m).unwrap();
    assert_eq!(back, log.records);
}

fn end_state(r: &Record) -> Vec<f64> {
    let mut v: Vec<f64> = r.gamma.iter().chain(r.delta.iter()).copied().collect();
    v.extend(r.q_r.iter().chain(r.xi.iter()).chain(r.theta_hat.iter()));
    v.extend([r.p.x, r.p.y, r.alpha, r.f_true.x, r.f_true.y, r.ke_hat_top, r.ke_hat_perp]);
    v
}

#[test]
fn halving_the_plant_step_leaves_the_run_unchanged() {
    for name in ["mixed", "position"] {
        let mut sc = builtin(name);
        sc.duration = 20.0;
        sc.fidelity.noise_enabled = false;
        sc.fidelity.quantization_enabled = false;
        sc.fidelity.rate_enabled = true;
        let coarse = run(&sc).unwrap();
        sc.fidelity.plant_dt /= 2.0;
        let fine = run(&sc).unwrap();
        assert_eq!(coarse.records.len(), fine.records.len());
        let a = end_state(coarse.records.last().unwrap());
        let b = end_state(fine.records.last().unwrap());
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "{name}: end states differ by {diff:e}");
    }
}

#[test]
fn free_space_regulation_reaches_the_waypoint() {
    let mut sc = builtin("position");
    sc.fidelity.set_all(false);
    let log = run(&sc).unwrap();
    assert!(log.monitors_passed());
    let t_end = log.records.last().unwrap().t;
    let tail: Vec<f64> = log.records.iter().filter(|r| r.t > t_end - 5.0).map(position_error).collect();
    let worst = tail.iter().copied().fold(0.0, f64::max);
    assert!(worst < 1e-3, "steady-state error {worst:e} m");

    // with the encoders quantized the arm hunts around the waypoint; the
    // end-of-run error still has to be under a millimetre
    let log = run(&builtin("position")).unwrap();
    let last = position_error(log.records.last().unwrap());
    assert!(last < 1e-3, "final error {last:e} m");
}

#[test]
fn mixed_mission_visits_every_phase_in_order() {
    let log = run(&builtin("mixed")).unwrap();
    assert!(log.monitors_passed());
    let phases: Vec<usize> = log.transitions.iter().map(|t| t.phase).collect();
    assert_eq!(phases, vec![1, 2]);
    assert!(log.transitions.iter().all(|t| t.cause == TransitionCause::Converged));
    assert!(log.records.windows(2).all(|w| w[1].t > w[0].t && w[1].phase >= w[0].phase));
    // contact only ever happens around the force phase
    let first_contact = log.records.iter().position(|r| r.contact).unwrap();
    assert!(log.records[first_contact].phase >= 1);
}

#[test]
fn frozen_reference_out_of_contact() {
    let log = run(&builtin("mixed")).unwrap();
    let mut frozen = 0;
    for r in &log.records {
        if !r.contact && r.eta == nalgebra::Vector2::zeros() {
            assert!(r.q_r_dot.iter().all(|v| *v == 0.0), "t = {}: {:?}", r.t, r.q_r_dot);
            frozen += 1;
        }
    }
    assert!(frozen > 1000);
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flexarm"))
}

#[test]
fn cli_exit_codes_follow_the_run_outcome() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ok");
    let status = cli()
        .args(["simulate", "position", "--duration", "2", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(status.status.success());
    for f in ["run.csv", "summary.json", "force_adaptive.svg", "pose.svg", "theta_hat.svg", "report.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let report: serde_json::Value = serde_json::from_slice(&status.stdout).unwrap();
    assert_eq!(report["status"], "ok");
    assert!(report["summary"]["timing"]["p99_us"].is_number());

    // moduli in the thousands on a tilted interface: the determinant identity
    // loses more than its absolute tolerance to rounding
    let monitor_fails = r#"{"duration_s": 3.0,
        "contact": {"n": [0.6, -0.8], "p_s_cm": [40.0, 40.0], "ke_top": 40.0, "ke_perp": 20.0},
        "adaptation": {"bounds": {"k_m": 1000.0, "k_M": 3000.0, "beta": 0.4},
                       "bounds_perp": {"k_m": 100.0, "k_M": 300.0, "beta": 0.4}}}"#;
    // a very stiff interface far inside the start pose: no static equilibrium
    let aborts = r#"{"duration_s": 1.0,
        "contact": {"n": [0.0, -1.0], "p_s_cm": [33.0, 20.0], "ke_top": 5000.0, "ke_perp": 2000.0}}"#;
    for (name, cfg, code, status) in [("monitor", monitor_fails, 1, "failed"), ("abort", aborts, 3, "aborted")] {
        let path = dir.path().join(format!("{name}.json"));
        std::fs::write(&path, cfg).unwrap();
        let run = cli()
            .arg("simulate")
            .arg(&path)
            .arg("--out")
            .arg(dir.path().join(name))
            .output()
            .unwrap();
        assert_eq!(run.status.code(), Some(code), "{name}");
        let report: serde_json::Value = serde_json::from_slice(&run.stdout).unwrap();
        assert_eq!(report["status"], status);
        assert!(dir.path().join(name).join("report.json").is_file());
    }

    let status = cli().args(["simulate", "no-such-scenario.json"]).output().unwrap();
    assert_eq!(status.status.code(), Some(4));
    let report: serde_json::Value = serde_json::from_slice(&status.stdout).unwrap();
    assert_eq!(report["status"], "error");
}

#[test]
fn cli_export_rebuilds_artifacts_from_a_log() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    assert!(cli()
        .args(["simulate", "force", "--duration", "1", "--out"])
        .arg(&run_dir)
        .status()
        .unwrap()
        .success());
    let out = dir.path().join("export");
    let status = cli()
        .arg("export")
        .arg(run_dir.join("run.csv"))
        .args(["--config", "force", "--format", "csv,svg", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(
        std::fs::read(run_dir.join("run.csv")).unwrap(),
        std::fs::read(out.join("run.csv")).unwrap()
    );
    assert!(out.join("pose.svg").is_file());
}
