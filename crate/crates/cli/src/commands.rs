//! Subcommand implementations. Each returns its process exit code; all
//! console output goes through the supplied writers.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use bumpmpc_core::bnb::{enumerate_oracle, relative_gap, solve_miqp, BnbConfig, MiqpStatus, ORACLE_CAP};
use bumpmpc_core::dynamics::VehicleState;
use bumpmpc_core::miqp::assemble;
use bumpmpc_core::mpc::{check_trajectory, run_mpc, Trajectory};
use bumpmpc_core::qp::KktResiduals;
use bumpmpc_core::scenario::{parse_scenario, parse_unvalidated, Scenario};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::output::{plot_data, trace_log, trajectory_csv, ReportDocument};

pub const EXIT_OK: i32 = 0;
pub const EXIT_COMPLIANCE: i32 = 1;
pub const EXIT_SOLVER: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

pub const DEFAULT_SEED: u64 = 42;
pub const ORACLE_GAP_TOL: f64 = 1e-6;

/// Flags that override scenario-file keys.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub human_behavior: bool,
    pub strict_indicators: bool,
    pub horizon: Option<usize>,
    pub sim_steps: Option<usize>,
}

impl Overrides {
    /// Applies the overrides, logging each change to `log`.
    pub fn apply(&self, scenario: &mut Scenario, log: &mut dyn Write) {
        if self.human_behavior && !scenario.human_behavior_mode {
            let _ = writeln!(log, "override: human_behavior_mode = true (file: false)");
            scenario.human_behavior_mode = true;
        }
        if self.strict_indicators && !scenario.strict_indicators {
            let _ = writeln!(log, "override: strict_indicators = true (file: false)");
            scenario.strict_indicators = true;
        }
        if let Some(n) = self.horizon {
            let _ = writeln!(log, "override: horizon_n = {n} (file: {})", scenario.horizon_n);
            scenario.horizon_n = n;
        }
        if let Some(n) = self.sim_steps {
            let _ = writeln!(log, "override: sim_steps = {n} (file: {})", scenario.sim_steps);
            scenario.sim_steps = n;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    pub overrides: Overrides,
    /// Write the per-node branch-and-bound trace.
    pub trace: bool,
    /// Include wall-clock solve times in the CSV and report.
    pub timing: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub trajectory_csv: Option<PathBuf>,
    pub report_json: Option<PathBuf>,
    pub plot_data: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub exit_code: i32,
}

impl RunArtifacts {
    fn failed(exit_code: i32) -> Self {
        RunArtifacts {
            trajectory_csv: None,
            report_json: None,
            plot_data: None,
            trace: None,
            exit_code,
        }
    }
}

/// Reads, parses, validates and applies overrides.
pub fn load_scenario(path: &Path, overrides: &Overrides, err: &mut dyn Write) -> Result<Scenario, i32> {
    let text = fs::read_to_string(path).map_err(|e| {
        let _ = writeln!(err, "error: cannot read {}: {e}", path.display());
        EXIT_CONFIG
    })?;
    let mut scenario = parse_unvalidated(&text).map_err(|e| {
        let _ = writeln!(err, "error: {}: {e}", path.display());
        EXIT_CONFIG
    })?;
    overrides.apply(&mut scenario, err);
    let violations = scenario.validate();
    if !violations.is_empty() {
        for v in &violations {
            let _ = writeln!(err, "error: {}: {v}", path.display());
        }
        return Err(EXIT_CONFIG);
    }
    Ok(scenario)
}

/// Result of a completed simulation, before anything is written.
pub struct RunOutcome {
    pub scenario: Scenario,
    pub trajectory: Trajectory,
    pub exit_code: i32,
}

/// Simulates a loaded scenario and classifies the outcome.
pub fn simulate(scenario: Scenario, options: &RunOptions, err: &mut dyn Write) -> Result<RunOutcome, i32> {
    let config = BnbConfig {
        trace: options.trace,
        ..BnbConfig::default()
    };
    let trajectory = run_mpc(&scenario, &config).map_err(|e| {
        let _ = writeln!(err, "error: {e}");
        EXIT_CONFIG
    })?;
    let exit_code = match (&trajectory.failure, check_trajectory(&trajectory, &scenario)) {
        (Some(_), _) => EXIT_SOLVER,
        (None, Ok(r)) if r.passed => EXIT_OK,
        (None, _) => EXIT_COMPLIANCE,
    };
    Ok(RunOutcome {
        scenario,
        trajectory,
        exit_code,
    })
}

/// `run`: simulate a scenario file and write trajectory, report and plot data.
pub fn cmd_run(
    scenario_path: &Path,
    output_dir: &Path,
    options: &RunOptions,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> RunArtifacts {
    let scenario = match load_scenario(scenario_path, &options.overrides, err) {
        Ok(s) => s,
        Err(code) => return RunArtifacts::failed(code),
    };
    let outcome = match simulate(scenario, options, err) {
        Ok(o) => o,
        Err(code) => return RunArtifacts::failed(code),
    };
    let RunOutcome {
        scenario,
        trajectory,
        exit_code,
    } = outcome;

    let report = check_trajectory(&trajectory, &scenario).ok();
    let doc = ReportDocument::new(&scenario, &trajectory, report.as_ref(), exit_code, options.timing);

    if let Err(e) = fs::create_dir_all(output_dir) {
        let _ = writeln!(err, "error: cannot create {}: {e}", output_dir.display());
        return RunArtifacts::failed(EXIT_CONFIG);
    }
    let csv_path = output_dir.join("trajectory.csv");
    let report_path = output_dir.join("report.json");
    let plot_path = output_dir.join("plot_data.dat");
    let trace_path = options.trace.then(|| output_dir.join("trace.log"));
    let mut files = vec![
        (csv_path.clone(), trajectory_csv(&trajectory, options.timing)),
        (report_path.clone(), doc.to_json()),
        (plot_path.clone(), plot_data(&trajectory)),
    ];
    if let Some(p) = &trace_path {
        files.push((p.clone(), trace_log(&trajectory)));
    }
    for (path, contents) in files {
        if let Err(e) = fs::write(&path, contents) {
            let _ = writeln!(err, "error: cannot write {}: {e}", path.display());
            return RunArtifacts::failed(EXIT_CONFIG);
        }
    }

    match &trajectory.failure {
        Some(f) => {
            let _ = writeln!(err, "error: solver failure at {f}");
        }
        None if exit_code == EXIT_COMPLIANCE => {
            let _ = writeln!(
                err,
                "error: bump speed exceeded by {:.6} m/s",
                doc.worst_bump_violation
            );
        }
        None => {}
    }
    let _ = writeln!(
        out,
        "{}: steps={} bump_speed_ok={} worst_violation={} final_speed_error={} final_lateral_error={} nodes={}",
        if exit_code == EXIT_OK { "PASS" } else { "FAIL" },
        doc.steps,
        doc.bump_speed_ok,
        fmt_short(doc.worst_bump_violation),
        fmt_short(doc.final_speed_error),
        fmt_short(doc.final_lateral_error),
        doc.total_nodes
    );

    RunArtifacts {
        trajectory_csv: Some(csv_path),
        report_json: Some(report_path),
        plot_data: Some(plot_path),
        trace: trace_path,
        exit_code,
    }
}

fn fmt_short(v: f64) -> String {
    crate::output::fmt_g(v, 6)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOptions {
    pub overrides: Overrides,
    pub trials: usize,
    pub seed: u64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            overrides: Overrides {
                horizon: Some(2),
                ..Overrides::default()
            },
            trials: 50,
            seed: DEFAULT_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub initial: VehicleState,
    pub bnb_status: MiqpStatus,
    pub oracle_status: MiqpStatus,
    pub bnb_objective: f64,
    pub oracle_objective: f64,
    pub gap: f64,
    pub bnb_nodes: usize,
    pub oracle_solves: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub seed: u64,
    pub binaries: usize,
    pub trials: Vec<TrialResult>,
    pub max_gap: f64,
    pub certified_qps: usize,
    pub worst_kkt: KktResiduals,
    pub exit_code: i32,
}

/// Random initial state a short distance around the bump window.
pub fn sample_initial_state(scenario: &Scenario, rng: &mut ChaCha8Rng) -> VehicleState {
    let v_cap = scenario.v_max_bump;
    VehicleState {
        x: rng.gen_range(scenario.bump_start - 4.0..scenario.bump_end + 1.0),
        y: scenario.y_ref + rng.gen_range(-0.2..0.2),
        vx: rng.gen_range((0.4 * v_cap)..(1.2 * v_cap)),
        vy: rng.gen_range(-0.1..0.1),
        ax: rng.gen_range(-1.0..1.0),
        ay: 0.0,
        theta: 0.0,
    }
}

/// Compares branch-and-bound against exhaustive enumeration.
pub fn oracle_compare(scenario: &Scenario, options: &OracleOptions) -> Result<OracleReport, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let qp_settings = BnbConfig::default().qp;
    let mut trials = Vec::with_capacity(options.trials);
    let mut max_gap: f64 = 0.0;
    let mut certified = 0;
    let mut kkt = KktResiduals::default();
    let binaries = bumpmpc_core::miqp::VariableLayout::new(scenario.horizon_n, scenario.human_behavior_mode)
        .map_err(|e| e.to_string())?
        .n_binary;
    if binaries > ORACLE_CAP {
        return Err(format!(
            "oracle supports at most {ORACLE_CAP} binaries, horizon {} gives {binaries}",
            scenario.horizon_n
        ));
    }
    for _ in 0..options.trials {
        let x0 = sample_initial_state(scenario, &mut rng);
        let problem = assemble(scenario, &x0).map_err(|e| e.to_string())?;
        let bnb = solve_miqp(&problem, &BnbConfig::default()).map_err(|e| e.to_string())?;
        let oracle = enumerate_oracle(&problem, &qp_settings).map_err(|e| e.to_string())?;
        let gap = if bnb.status != oracle.status {
            f64::INFINITY
        } else if bnb.status == MiqpStatus::Optimal {
            relative_gap(bnb.objective, oracle.objective)
        } else {
            0.0
        };
        max_gap = max_gap.max(gap);
        certified += bnb.certified_qps + oracle.certified_qps;
        kkt = kkt.worst(&bnb.worst_kkt).worst(&oracle.worst_kkt);
        trials.push(TrialResult {
            initial: x0,
            bnb_status: bnb.status,
            oracle_status: oracle.status,
            bnb_objective: bnb.objective,
            oracle_objective: oracle.objective,
            gap,
            bnb_nodes: bnb.nodes_explored,
            oracle_solves: oracle.qp_solves,
        });
    }
    let exit_code = if max_gap <= ORACLE_GAP_TOL {
        EXIT_OK
    } else {
        EXIT_COMPLIANCE
    };
    Ok(OracleReport {
        seed: options.seed,
        binaries,
        trials,
        max_gap,
        certified_qps: certified,
        worst_kkt: kkt,
        exit_code,
    })
}

fn status_word(s: MiqpStatus) -> &'static str {
    match s {
        MiqpStatus::Optimal => "optimal",
        MiqpStatus::Infeasible => "infeasible",
        MiqpStatus::NodeLimit => "node_limit",
    }
}

/// `oracle-compare`: prints one line per trial and the maximum gap.
pub fn cmd_oracle_compare(
    scenario_path: &Path,
    options: &OracleOptions,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let scenario = match load_scenario(scenario_path, &options.overrides, err) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let report = match oracle_compare(&scenario, options) {
        Ok(r) => r,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_CONFIG;
        }
    };
    let _ = writeln!(
        out,
        "# oracle comparison: seed={} horizon={} binaries={} trials={}",
        report.seed,
        scenario.horizon_n,
        report.binaries,
        report.trials.len()
    );
    if report.trials.is_empty() {
        let _ = writeln!(err, "warning: no trials requested; nothing compared");
    }
    for (i, t) in report.trials.iter().enumerate() {
        let _ = writeln!(
            out,
            "trial {i}: x0={} vx0={} bnb={} ({}, {} nodes) oracle={} ({}, {} solves) gap={}",
            fmt_short(t.initial.x),
            fmt_short(t.initial.vx),
            crate::output::fmt_g(t.bnb_objective, 12),
            status_word(t.bnb_status),
            t.bnb_nodes,
            crate::output::fmt_g(t.oracle_objective, 12),
            status_word(t.oracle_status),
            t.oracle_solves,
            fmt_short(t.gap)
        );
    }
    let _ = writeln!(
        out,
        "max relative gap: {} ({})",
        fmt_short(report.max_gap),
        if report.exit_code == EXIT_OK { "PASS" } else { "FAIL" }
    );
    report.exit_code
}

/// `check`: lists validation problems; exit 0 when there are none.
pub fn cmd_check(scenario_path: &Path, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let text = match fs::read_to_string(scenario_path) {
        Ok(t) => t,
        Err(e) => {
            let _ = writeln!(err, "error: cannot read {}: {e}", scenario_path.display());
            return EXIT_CONFIG;
        }
    };
    let scenario = match parse_unvalidated(&text) {
        Ok(s) => s,
        Err(e) => {
            let _ = writeln!(err, "error: {}: {e}", scenario_path.display());
            return EXIT_CONFIG;
        }
    };
    let violations = scenario.validate();
    if violations.is_empty() {
        let _ = writeln!(out, "{}: ok", scenario_path.display());
        debug_assert!(parse_scenario(&text).is_ok());
        EXIT_OK
    } else {
        for v in &violations {
            let _ = writeln!(out, "{}: {v}", scenario_path.display());
        }
        EXIT_COMPLIANCE
    }
}
