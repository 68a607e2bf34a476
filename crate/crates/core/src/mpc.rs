//! Closed-loop receding-horizon simulation and trajectory compliance checks.

use serde::Serialize;
use thiserror::Error;

use crate::bnb::{solve_miqp, BnbConfig, BnbError, MiqpStatus};
use crate::dynamics::{propagate, ControlInput, VehicleState};
use crate::miqp::{assemble, Component, VariableLayout};
use crate::qp::KktResiduals;
use crate::scenario::{Scenario, Violation};

/// Speed over the cap that still counts as compliant (m/s).
pub const BUMP_SPEED_TOL: f64 = 1e-3;

/// Binary activations at the applied step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct StepIndicators {
    pub delta1: bool,
    pub delta2: bool,
    pub delta3: bool,
    pub turn_left: Option<bool>,
    pub turn_right: Option<bool>,
    pub is_turning: Option<bool>,
}

impl StepIndicators {
    pub fn decode(layout: &VariableLayout, z: &[f64], k: usize) -> Self {
        let bit = |c| layout.index(k, c).map(|j| z[j] > 0.5);
        StepIndicators {
            delta1: bit(Component::Delta1).unwrap_or(false),
            delta2: bit(Component::Delta2).unwrap_or(false),
            delta3: bit(Component::Delta3).unwrap_or(false),
            turn_left: bit(Component::TurnLeft),
            turn_right: bit(Component::TurnRight),
            is_turning: bit(Component::IsTurning),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub k: usize,
    pub t: f64,
    pub state: VehicleState,
    pub control: ControlInput,
    pub indicators: StepIndicators,
    pub status: MiqpStatus,
    pub nodes: usize,
    pub qp_solves: usize,
    pub certified_qps: usize,
    pub worst_kkt: KktResiduals,
    /// Wall-clock MIQP time in seconds.
    pub solve_time: f64,
    /// Branch-and-bound trace, when requested.
    #[serde(skip)]
    pub trace: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepFailure {
    Infeasible { step: usize },
    NodeLimit { step: usize },
    Solver { step: usize, message: String },
    Build { step: usize, message: String },
}

impl StepFailure {
    pub fn step(&self) -> usize {
        match self {
            StepFailure::Infeasible { step }
            | StepFailure::NodeLimit { step }
            | StepFailure::Solver { step, .. }
            | StepFailure::Build { step, .. } => *step,
        }
    }
}

impl std::fmt::Display for StepFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StepFailure::Infeasible { step } => write!(f, "step {step}: MIQP infeasible"),
            StepFailure::NodeLimit { step } => {
                write!(f, "step {step}: node limit reached without a feasible point")
            }
            StepFailure::Solver { step, message } => write!(f, "step {step}: {message}"),
            StepFailure::Build { step, message } => write!(f, "step {step}: {message}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub dt: f64,
    pub records: Vec<StepRecord>,
    /// Set when a step could not be solved; `records` holds the steps before it.
    pub failure: Option<StepFailure>,
    /// State and solver statistics of the failed step; controls are zero.
    pub failed_stats: Option<StepRecord>,
}

impl Trajectory {
    pub fn completed(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MpcError {
    #[error("invalid scenario: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidScenario(Vec<Violation>),
    #[error(transparent)]
    Config(#[from] BnbError),
}

pub fn initial_state(scenario: &Scenario) -> VehicleState {
    VehicleState {
        x: scenario.x0,
        y: scenario.y0,
        vx: scenario.vx0,
        vy: scenario.vy0,
        ax: scenario.ax0,
        ay: scenario.ay0,
        theta: scenario.theta0,
    }
}

/// Previous solution moved one step forward; the last step is repeated.
pub fn shift_solution(layout: &VariableLayout, z: &[f64]) -> Vec<f64> {
    let n = layout.horizon_n;
    let mut out = z.to_vec();
    for k in 0..=n {
        let src = (k + 1).min(n);
        for c in Component::STATES
            .into_iter()
            .chain(Component::BUMP)
            .chain(Component::TURNING)
        {
            if let (Some(dst), Some(from)) = (layout.index(k, c), layout.index(src, c)) {
                out[dst] = z[from];
            }
        }
        if k < n {
            for c in Component::JERKS {
                out[layout.col(k, c)] = if k + 1 < n {
                    z[layout.col(k + 1, c)]
                } else {
                    0.0
                };
            }
        }
    }
    out
}

/// Receding-horizon loop: solve, apply the first jerk, propagate the plant.
pub fn run_mpc(scenario: &Scenario, config: &BnbConfig) -> Result<Trajectory, MpcError> {
    run_mpc_with(scenario, config, |_| {})
}

/// [`run_mpc`] with a callback invoked after every solved step.
pub fn run_mpc_with(
    scenario: &Scenario,
    config: &BnbConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Trajectory, MpcError> {
    let violations = scenario.validate();
    if !violations.is_empty() {
        return Err(MpcError::InvalidScenario(violations));
    }
    config.validate()?;

    let mut state = initial_state(scenario);
    let mut records = Vec::with_capacity(scenario.sim_steps);
    let mut warm: Option<Vec<f64>> = None;
    let mut failure = None;
    let mut failed_stats = None;

    for k in 0..scenario.sim_steps {
        let bare = |status| StepRecord {
            k,
            t: k as f64 * scenario.dt,
            state,
            control: ControlInput::default(),
            indicators: StepIndicators::default(),
            status,
            nodes: 0,
            qp_solves: 0,
            certified_qps: 0,
            worst_kkt: KktResiduals::default(),
            solve_time: 0.0,
            trace: Vec::new(),
        };
        let problem = match assemble(scenario, &state) {
            Ok(p) => p,
            Err(e) => {
                failed_stats = Some(bare(MiqpStatus::Infeasible));
                failure = Some(StepFailure::Build {
                    step: k,
                    message: e.to_string(),
                });
                break;
            }
        };
        let step_config = BnbConfig {
            warm_start: warm.take().or_else(|| config.warm_start.clone()),
            ..config.clone()
        };
        let solution = match solve_miqp(&problem, &step_config) {
            Ok(s) => s,
            Err(e) => {
                failed_stats = Some(bare(MiqpStatus::Infeasible));
                failure = Some(StepFailure::Solver {
                    step: k,
                    message: e.to_string(),
                });
                break;
            }
        };
        let mut solution = solution;
        let trace = std::mem::take(&mut solution.trace);
        let record = |control, indicators| StepRecord {
            k,
            t: k as f64 * scenario.dt,
            state,
            control,
            indicators,
            status: solution.status,
            nodes: solution.nodes_explored,
            qp_solves: solution.qp_solves,
            certified_qps: solution.certified_qps,
            worst_kkt: solution.worst_kkt,
            solve_time: solution.solve_time,
            trace: trace.clone(),
        };
        let Some(z) = solution.primal.as_ref() else {
            failed_stats = Some(record(ControlInput::default(), StepIndicators::default()));
            failure = Some(match solution.status {
                MiqpStatus::NodeLimit => StepFailure::NodeLimit { step: k },
                _ => StepFailure::Infeasible { step: k },
            });
            break;
        };
        let layout = &problem.layout;
        let control = ControlInput {
            jx: z[layout.col(0, Component::Jx)],
            jy: z[layout.col(0, Component::Jy)],
        };
        let rec = record(control, StepIndicators::decode(layout, z, 0));
        on_step(&rec);
        records.push(rec);
        warm = Some(shift_solution(layout, z));
        state = propagate(&state, &control, scenario.dt);
    }

    Ok(Trajectory {
        dt: scenario.dt,
        records,
        failure,
        failed_stats,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplianceReport {
    pub steps: usize,
    pub completed: bool,
    pub failed_step: Option<usize>,
    pub bump_speed_ok: bool,
    /// Largest `vx − v_max_bump` over states on the bump, floored at 0.
    pub worst_bump_violation: f64,
    pub bump_samples: usize,
    /// Largest `|vy|` over states on the bump.
    pub max_abs_vy_on_bump: f64,
    pub max_abs_jx: f64,
    pub max_abs_jy: f64,
    pub final_speed_error: f64,
    pub final_lateral_error: f64,
    /// Per-step MIQP time percentiles in seconds.
    pub solve_time_p50: Option<f64>,
    pub solve_time_p95: Option<f64>,
    pub solve_time_max: Option<f64>,
    pub total_nodes: usize,
    pub total_qp_solves: usize,
    pub certified_qps: usize,
    pub worst_kkt: KktResiduals,
    /// Run completed and the bump speed cap held.
    pub passed: bool,
}

#[derive(Debug, Error, PartialEq)]
pub enum ComplianceError {
    #[error("trajectory has no records")]
    Empty,
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn check_trajectory(
    trajectory: &Trajectory,
    scenario: &Scenario,
) -> Result<ComplianceReport, ComplianceError> {
    let recs = &trajectory.records;
    let last = recs.last().ok_or(ComplianceError::Empty)?;
    let window = scenario.bump_window();

    let mut worst = 0.0f64;
    let mut samples = 0;
    let mut max_vy = 0.0f64;
    for r in recs.iter().filter(|r| window.contains(r.state.x)) {
        samples += 1;
        worst = worst.max(r.state.vx - scenario.v_max_bump);
        max_vy = max_vy.max(r.state.vy.abs());
    }
    let max_abs = |f: fn(&StepRecord) -> f64| recs.iter().map(f).fold(0.0, |m: f64, v| m.max(v.abs()));

    let mut times: Vec<f64> = recs.iter().map(|r| r.solve_time).collect();
    times.sort_by(f64::total_cmp);
    let mut kkt = KktResiduals::default();
    for r in recs.iter().chain(trajectory.failed_stats.iter()) {
        kkt = kkt.worst(&r.worst_kkt);
    }
    let all = || recs.iter().chain(trajectory.failed_stats.iter());

    let bump_speed_ok = worst <= BUMP_SPEED_TOL;
    let completed = trajectory.completed();
    Ok(ComplianceReport {
        steps: recs.len(),
        completed,
        failed_step: trajectory.failure.as_ref().map(StepFailure::step),
        bump_speed_ok,
        worst_bump_violation: worst,
        bump_samples: samples,
        max_abs_vy_on_bump: max_vy,
        max_abs_jx: max_abs(|r| r.control.jx),
        max_abs_jy: max_abs(|r| r.control.jy),
        final_speed_error: (last.state.vx - scenario.v_ref).abs(),
        final_lateral_error: (last.state.y - scenario.y_ref).abs(),
        solve_time_p50: Some(percentile(&times, 50.0)),
        solve_time_p95: Some(percentile(&times, 95.0)),
        solve_time_max: times.last().copied(),
        total_nodes: all().map(|r| r.nodes).sum(),
        total_qp_solves: all().map(|r| r.qp_solves).sum(),
        certified_qps: all().map(|r| r.certified_qps).sum(),
        worst_kkt: kkt,
        passed: completed && bump_speed_ok,
    })
}
