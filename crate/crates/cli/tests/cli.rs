use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bumpmpc"))
}

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn check_accepts_bundled_scenarios() {
    for name in ["reference.cfg", "human-behavior.cfg", "high-speed.cfg", "infeasible.cfg"] {
        let o = bin().arg("check").arg(scenario(name)).output().unwrap();
        assert_eq!(o.status.code(), Some(0), "{name}: {}", stdout(&o));
    }
}

#[test]
fn check_reports_violations() {
    let o = bin().arg("check").arg(scenario("bad-bump.cfg")).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("bump_end"));
}

#[test]
fn parse_error_names_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.cfg");
    let text = fs::read_to_string(scenario("reference.cfg")).unwrap().replace("v_turn = 0.1", "v_turn = fast");
    fs::write(&path, text).unwrap();
    let o = bin().arg("run").arg(&path).arg("-o").arg(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(3));
    let msg = stderr(&o);
    assert!(msg.contains("v_turn") && msg.contains("line"), "{msg}");
    assert!(!dir.path().join("trajectory.csv").exists());
}

#[test]
fn invalid_scenario_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin().arg("run").arg(scenario("bad-bump.cfg")).arg("-o").arg(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("bump_end"));
}

#[test]
fn missing_file_exits_3() {
    let o = bin().args(["check", "/nonexistent/scenario.cfg"]).output().unwrap();
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn infeasible_start_exits_2_with_step() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin().arg("run").arg(scenario("infeasible.cfg")).arg("-o").arg(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("step 0"), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    let rows: Vec<_> = csv.lines().collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].contains(",infeasible,"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["exit_code"], 2);
    assert_eq!(report["failed_step"], 0);
}

#[test]
fn short_run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .arg("run")
        .arg(scenario("reference.cfg"))
        .args(["--sim-steps", "15", "--horizon", "20", "--trace", "-o"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("override: sim_steps = 15"));
    assert!(stderr(&o).contains("override: horizon_n = 20"));
    assert!(stdout(&o).starts_with("PASS"));

    let csv = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 16);
    for line in csv.lines() {
        assert_eq!(line.split(',').count(), 20);
    }
    let plot = fs::read_to_string(dir.path().join("plot_data.dat")).unwrap();
    assert_eq!(plot.lines().count(), 16);
    assert_eq!(plot.lines().nth(1).unwrap().split_whitespace().count(), 9);
    let trace = fs::read_to_string(dir.path().join("trace.log")).unwrap();
    assert!(trace.lines().any(|l| l.starts_with("step=0 node=")));

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["steps"], 15);
    assert_eq!(report["passed"], true);
    assert!(report["solve_time_s"]["p50"].is_null());
    assert_eq!(report["scenario"]["horizon_n"], 20);
}

#[test]
fn oracle_compare_short() {
    let o = bin()
        .arg("oracle-compare")
        .arg(scenario("reference.cfg"))
        .args(["--trials", "4", "--seed", "7"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("# oracle comparison: seed=7 horizon=2 binaries=9 trials=4"), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("trial ")).count(), 4);
    assert!(text.contains("max relative gap"));
}

#[test]
fn oracle_compare_zero_trials_warns() {
    let o = bin().arg("oracle-compare").arg(scenario("reference.cfg")).args(["--trials", "0"]).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("warning"));
}

#[test]
fn oracle_compare_rejects_long_horizon() {
    let o = bin()
        .arg("oracle-compare")
        .arg(scenario("reference.cfg"))
        .args(["--horizon", "8", "--trials", "1"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("binaries"));
}
