//! Trajectory CSV, plot data and JSON report rendering.

use std::fmt::Write as _;

use bumpmpc_core::mpc::{ComplianceReport, StepFailure, StepRecord, Trajectory};
use bumpmpc_core::scenario::Scenario;
use serde::Serialize;

pub const CSV_HEADER: &str = "k,t,x,y,vx,vy,ax,ay,jx,jy,theta,delta1,delta2,delta3,\
turn_left,turn_right,is_turning,status,solve_time_ms,nodes";

pub const PLOT_HEADER: &str = "# t x y vx vy ax ay jx jy";

/// `printf("%.*g")`-style formatting with `digits` significant digits.
/// Negative zero prints as `0`.
pub fn fmt_g(v: f64, digits: usize) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let out = if exp < -4 || exp >= digits as i32 {
        let m = trim_fraction(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_fraction(&format!("{v:.decimals$}")).to_string()
    };
    if out == "-0" {
        "0".into()
    } else {
        out
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn g12(v: f64) -> String {
    fmt_g(v, 12)
}

fn bit(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

fn opt_bit(b: Option<bool>) -> &'static str {
    b.map_or("", bit)
}

fn status_name(r: &StepRecord) -> &'static str {
    match r.status {
        bumpmpc_core::bnb::MiqpStatus::Optimal => "optimal",
        bumpmpc_core::bnb::MiqpStatus::Infeasible => "infeasible",
        bumpmpc_core::bnb::MiqpStatus::NodeLimit => "node_limit",
    }
}

pub fn failure_name(f: &StepFailure) -> &'static str {
    match f {
        StepFailure::Infeasible { .. } => "infeasible",
        StepFailure::NodeLimit { .. } => "node_limit",
        StepFailure::Solver { .. } => "solver_error",
        StepFailure::Build { .. } => "build_error",
    }
}

/// One row per applied step, plus a final row for a failed step.
/// Solve times are left empty unless `timing` is set, which keeps the file
/// reproducible byte for byte.
pub fn trajectory_csv(trajectory: &Trajectory, timing: bool) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    let row = |out: &mut String, r: &StepRecord, status: &str, control: bool| {
        let s = &r.state;
        let (jx, jy) = if control {
            (g12(r.control.jx), g12(r.control.jy))
        } else {
            (String::new(), String::new())
        };
        let ind = &r.indicators;
        let flags = if control {
            [
                bit(ind.delta1),
                bit(ind.delta2),
                bit(ind.delta3),
                opt_bit(ind.turn_left),
                opt_bit(ind.turn_right),
                opt_bit(ind.is_turning),
            ]
        } else {
            [""; 6]
        };
        let time = if timing {
            g12(r.solve_time * 1e3)
        } else {
            String::new()
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.k,
            g12(r.t),
            g12(s.x),
            g12(s.y),
            g12(s.vx),
            g12(s.vy),
            g12(s.ax),
            g12(s.ay),
            jx,
            jy,
            g12(s.theta),
            flags[0],
            flags[1],
            flags[2],
            flags[3],
            flags[4],
            flags[5],
            status,
            time,
            r.nodes
        );
    };
    for r in &trajectory.records {
        row(&mut out, r, status_name(r), true);
    }
    if let (Some(f), Some(r)) = (&trajectory.failure, &trajectory.failed_stats) {
        row(&mut out, r, failure_name(f), false);
    }
    out
}

/// Whitespace-separated columns for external plotting.
pub fn plot_data(trajectory: &Trajectory) -> String {
    let mut out = String::new();
    out.push_str(PLOT_HEADER);
    out.push('\n');
    for r in &trajectory.records {
        let s = &r.state;
        let cols = [s.x, s.y, s.vx, s.vy, s.ax, s.ay, r.control.jx, r.control.jy];
        let _ = write!(out, "{}", g12(r.t));
        for c in cols {
            let _ = write!(out, " {}", g12(c));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveTimes {
    pub p50: Option<f64>,
    pub p95: Option<f64>,
    pub max: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub horizon_n: usize,
    pub sim_steps: usize,
    pub dt: f64,
    pub human_behavior_mode: bool,
    pub strict_indicators: bool,
    pub v_ref: f64,
    pub y_ref: f64,
    pub bump_start: f64,
    pub bump_end: f64,
    pub v_max_bump: f64,
}

/// JSON report: the compliance fields plus the run settings.
#[derive(Debug, Clone, Serialize)]
pub struct ReportDocument {
    pub scenario: RunSummary,
    pub exit_code: i32,
    pub passed: bool,
    pub completed: bool,
    pub failure: Option<String>,
    pub failed_step: Option<usize>,
    pub steps: usize,
    pub bump_speed_ok: bool,
    pub worst_bump_violation: f64,
    pub bump_samples: usize,
    pub max_abs_vy_on_bump: f64,
    pub max_abs_jx: f64,
    pub max_abs_jy: f64,
    pub final_speed_error: f64,
    pub final_lateral_error: f64,
    /// Seconds; `null` unless timing output was requested.
    pub solve_time_s: SolveTimes,
    pub total_nodes: usize,
    pub total_qp_solves: usize,
    pub certified_qps: usize,
    pub worst_kkt_stationarity: f64,
    pub worst_kkt_primal: f64,
    pub worst_kkt_complementarity: f64,
}

impl ReportDocument {
    pub fn new(
        scenario: &Scenario,
        trajectory: &Trajectory,
        report: Option<&ComplianceReport>,
        exit_code: i32,
        timing: bool,
    ) -> Self {
        let summary = RunSummary {
            horizon_n: scenario.horizon_n,
            sim_steps: scenario.sim_steps,
            dt: scenario.dt,
            human_behavior_mode: scenario.human_behavior_mode,
            strict_indicators: scenario.strict_indicators,
            v_ref: scenario.v_ref,
            y_ref: scenario.y_ref,
            bump_start: scenario.bump_start,
            bump_end: scenario.bump_end,
            v_max_bump: scenario.v_max_bump,
        };
        let keep = |v: Option<f64>| if timing { v } else { None };
        let failure = trajectory.failure.as_ref().map(|f| f.to_string());
        let failed_step = trajectory.failure.as_ref().map(StepFailure::step);
        match report {
            Some(r) => ReportDocument {
                scenario: summary,
                exit_code,
                passed: r.passed,
                completed: r.completed,
                failure,
                failed_step,
                steps: r.steps,
                bump_speed_ok: r.bump_speed_ok,
                worst_bump_violation: r.worst_bump_violation,
                bump_samples: r.bump_samples,
                max_abs_vy_on_bump: r.max_abs_vy_on_bump,
                max_abs_jx: r.max_abs_jx,
                max_abs_jy: r.max_abs_jy,
                final_speed_error: r.final_speed_error,
                final_lateral_error: r.final_lateral_error,
                solve_time_s: SolveTimes {
                    p50: keep(r.solve_time_p50),
                    p95: keep(r.solve_time_p95),
                    max: keep(r.solve_time_max),
                },
                total_nodes: r.total_nodes,
                total_qp_solves: r.total_qp_solves,
                certified_qps: r.certified_qps,
                worst_kkt_stationarity: r.worst_kkt.stationarity,
                worst_kkt_primal: r.worst_kkt.primal,
                worst_kkt_complementarity: r.worst_kkt.complementarity,
            },
            // nothing was applied: only the failure is known
            None => ReportDocument {
                scenario: summary,
                exit_code,
                passed: false,
                completed: false,
                failure,
                failed_step,
                steps: 0,
                bump_speed_ok: true,
                worst_bump_violation: 0.0,
                bump_samples: 0,
                max_abs_vy_on_bump: 0.0,
                max_abs_jx: 0.0,
                max_abs_jy: 0.0,
                final_speed_error: f64::NAN,
                final_lateral_error: f64::NAN,
                solve_time_s: SolveTimes {
                    p50: None,
                    p95: None,
                    max: None,
                },
                total_nodes: trajectory.failed_stats.as_ref().map_or(0, |r| r.nodes),
                total_qp_solves: trajectory.failed_stats.as_ref().map_or(0, |r| r.qp_solves),
                certified_qps: trajectory.failed_stats.as_ref().map_or(0, |r| r.certified_qps),
                worst_kkt_stationarity: 0.0,
                worst_kkt_primal: 0.0,
                worst_kkt_complementarity: 0.0,
            },
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Per-step branch-and-bound trace, prefixed by the step index.
pub fn trace_log(trajectory: &Trajectory) -> String {
    let mut out = String::new();
    for r in trajectory.records.iter().chain(trajectory.failed_stats.iter()) {
        for line in &r.trace {
            let _ = writeln!(out, "step={} {line}", r.k);
        }
    }
    out
}
