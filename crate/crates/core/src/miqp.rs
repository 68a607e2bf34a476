//! Assembly of the horizon MIQP in standard form.
//!
//! Decision vector layout: for every step `k < N` the block
//! `[x, vx, ax, y, vy, ay, jx, jy]`, then the terminal state
//! `[x, vx, ax, y, vy, ay]`, then the binaries of every step
//! (`δ1, δ2, δ3` and, in human-behavior mode, `turn_left, turn_right,
//! is_turning`). States are kept as variables (no condensing); dynamics
//! are equality rows.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::dynamics::{build_step_matrices, DynamicsError, VehicleState};
use crate::qp::QpProblem;
use crate::scenario::{Interval, Scenario, Violation};
use crate::sparse::{CscMatrix, TripletMatrix};

/// Slack added on top of the smallest valid big-M of each row.
const BIG_M_MARGIN: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    X,
    Vx,
    Ax,
    Y,
    Vy,
    Ay,
    Jx,
    Jy,
    Delta1,
    Delta2,
    Delta3,
    TurnLeft,
    TurnRight,
    IsTurning,
}

impl Component {
    pub const STATES: [Component; 6] = [
        Component::X,
        Component::Vx,
        Component::Ax,
        Component::Y,
        Component::Vy,
        Component::Ay,
    ];
    pub const JERKS: [Component; 2] = [Component::Jx, Component::Jy];
    pub const BUMP: [Component; 3] = [Component::Delta1, Component::Delta2, Component::Delta3];
    pub const TURNING: [Component; 3] = [
        Component::TurnLeft,
        Component::TurnRight,
        Component::IsTurning,
    ];

    pub fn is_binary(self) -> bool {
        self >= Component::Delta1
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::X => "x",
            Component::Vx => "vx",
            Component::Ax => "ax",
            Component::Y => "y",
            Component::Vy => "vy",
            Component::Ay => "ay",
            Component::Jx => "jx",
            Component::Jy => "jy",
            Component::Delta1 => "delta1",
            Component::Delta2 => "delta2",
            Component::Delta3 => "delta3",
            Component::TurnLeft => "turn_left",
            Component::TurnRight => "turn_right",
            Component::IsTurning => "is_turning",
        }
    }

    fn slot(self) -> usize {
        match self {
            Component::X | Component::Delta1 | Component::TurnLeft => 0,
            Component::Vx | Component::Delta2 | Component::TurnRight => 1,
            Component::Ax | Component::Delta3 | Component::IsTurning => 2,
            Component::Y | Component::Jx => 3 + (self == Component::Jx) as usize * 3,
            Component::Vy | Component::Jy => 4 + (self == Component::Jy) as usize * 3,
            Component::Ay => 5,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum BuildError {
    #[error("horizon must contain at least one step")]
    ZeroHorizon,
    #[error("invalid scenario: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidScenario(Vec<Violation>),
    #[error("big_m = {big_m} is too small for {row:?} at step {step}: needs at least {required}")]
    BigMTooSmall {
        step: usize,
        row: RowKind,
        required: f64,
        big_m: f64,
    },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Column map of the decision vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VariableLayout {
    pub horizon_n: usize,
    pub human_behavior_mode: bool,
    pub n_continuous: usize,
    pub n_binary: usize,
    pub n_total: usize,
}

impl VariableLayout {
    pub fn new(horizon_n: usize, human_behavior_mode: bool) -> Result<Self, BuildError> {
        if horizon_n == 0 {
            return Err(BuildError::ZeroHorizon);
        }
        let n_continuous = 6 * (horizon_n + 1) + 2 * horizon_n;
        let n_binary = Self::binaries_per_step(human_behavior_mode) * (horizon_n + 1);
        Ok(VariableLayout {
            horizon_n,
            human_behavior_mode,
            n_continuous,
            n_binary,
            n_total: n_continuous + n_binary,
        })
    }

    pub fn binaries_per_step(human_behavior_mode: bool) -> usize {
        if human_behavior_mode {
            6
        } else {
            3
        }
    }

    /// Column of `component` at step `k`, if that variable exists.
    pub fn index(&self, k: usize, component: Component) -> Option<usize> {
        let n = self.horizon_n;
        if k > n {
            return None;
        }
        match component {
            Component::Jx | Component::Jy if k == n => None,
            Component::TurnLeft | Component::TurnRight | Component::IsTurning
                if !self.human_behavior_mode =>
            {
                None
            }
            c if c.is_binary() => {
                let per = Self::binaries_per_step(self.human_behavior_mode);
                let offset = match c {
                    Component::Delta1 | Component::Delta2 | Component::Delta3 => c.slot(),
                    _ => 3 + c.slot(),
                };
                Some(self.n_continuous + per * k + offset)
            }
            c => Some(8 * k + c.slot()),
        }
    }

    /// Column of a variable that is known to exist.
    pub fn col(&self, k: usize, component: Component) -> usize {
        self.index(k, component)
            .unwrap_or_else(|| panic!("no column for {component:?} at step {k}"))
    }

    /// Inverse of [`index`](Self::index).
    pub fn describe(&self, col: usize) -> Option<(usize, Component)> {
        if col >= self.n_total {
            return None;
        }
        if col < self.n_continuous {
            let k = col / 8;
            let slot = col % 8;
            let c = match slot {
                0..=5 => Component::STATES[slot],
                _ => Component::JERKS[slot - 6],
            };
            return Some((k, c));
        }
        let per = Self::binaries_per_step(self.human_behavior_mode);
        let rel = col - self.n_continuous;
        let (k, slot) = (rel / per, rel % per);
        let c = match slot {
            0..=2 => Component::BUMP[slot],
            _ => Component::TURNING[slot - 3],
        };
        Some((k, c))
    }

    pub fn binary_columns(&self) -> Vec<usize> {
        (self.n_continuous..self.n_total).collect()
    }
}

/// What a constraint row encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    InitialState(Component),
    Dynamics(Component),
    LateralSpeedUpper,
    LateralSpeedLower,
    LateralAccelUpper,
    LateralAccelLower,
    /// δ1 = 1 ⇒ x ≥ bump_start
    BumpStartOn,
    /// δ1 = 0 ⇒ x ≤ bump_start − ε
    BumpStartOff,
    /// δ2 = 1 ⇒ x ≤ bump_end
    BumpEndOn,
    /// δ2 = 0 ⇒ x ≥ bump_end + ε
    BumpEndOff,
    /// δ3 = 1 ⇒ vx ≤ v_max_bump
    SpeedCapOn,
    /// δ3 = 0 ⇒ vx ≥ v_max_bump + ε (strict indicators only)
    SpeedCapOff,
    CapNeedsStart,
    CapNeedsEnd,
    OnBumpNeedsCap,
    TurnLeftOn,
    TurnLeftOff,
    TurnRightOn,
    TurnRightOff,
    TurningCoversLeft,
    TurningCoversRight,
    TurningNeedsDirection,
    OnBumpNeedsTurning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RowLabel {
    pub step: usize,
    pub kind: RowKind,
}

/// Interval bounds on the states each step can reach from the pinned
/// initial state. Used only to size big-M constants.
#[derive(Debug, Clone, PartialEq)]
pub struct ReachableRanges {
    pub x: Vec<Interval>,
    pub vx: Vec<Interval>,
    pub vy: Vec<Interval>,
}

impl ReachableRanges {
    /// Interval propagation of the dynamics, intersected with the state
    /// boxes and the lateral-speed cone.
    pub fn propagate(scenario: &Scenario, x0: &VehicleState, horizon_n: usize) -> Self {
        let dt = scenario.dt;
        let (dt2, dt3) = (dt * dt, dt * dt * dt);
        let l = &scenario.limits;
        let point = |v: f64| Interval::new(v, v);
        let clip = |iv: Interval, bx: Interval| {
            let c = Interval::new(iv.min.max(bx.min), iv.max.min(bx.max));
            if c.min <= c.max {
                c
            } else {
                bx
            }
        };

        let mut x = vec![point(x0.x)];
        let mut vx = vec![point(x0.vx)];
        let mut ax = vec![point(x0.ax)];
        let mut vy = vec![point(x0.vy)];
        let mut ay = vec![point(x0.ay)];
        let (tmin, tmax) = (scenario.theta_min.tan(), scenario.theta_max.tan());
        for k in 0..horizon_n {
            let step = |p: Interval, v: Interval, a: Interval, j: Interval| {
                Interval::new(
                    p.min + v.min * dt + 0.5 * a.min * dt2 + j.min * dt3 / 6.0,
                    p.max + v.max * dt + 0.5 * a.max * dt2 + j.max * dt3 / 6.0,
                )
            };
            let nx = clip(step(x[k], vx[k], ax[k], l.jx), l.x);
            let nvx = clip(step(vx[k], ax[k], l.jx, Interval::new(0.0, 0.0)), l.vx);
            let nvx = Interval::new(
                nvx.min,
                nvx.max.min(vx[k].max + ax[k].max * dt + 0.5 * l.jx.max * dt2),
            );
            let nax = clip(
                Interval::new(ax[k].min + l.jx.min * dt, ax[k].max + l.jx.max * dt),
                l.ax,
            );
            let nvy = Interval::new(
                vy[k].min + ay[k].min * dt + 0.5 * l.jy.min * dt2,
                vy[k].max + ay[k].max * dt + 0.5 * l.jy.max * dt2,
            );
            let cone = Interval::new(tmin * nvx.max.max(0.0), tmax * nvx.max.max(0.0));
            let nvy = clip(clip(nvy, l.vy), cone);
            let nay = clip(
                Interval::new(ay[k].min + l.jy.min * dt, ay[k].max + l.jy.max * dt),
                l.ay,
            );
            x.push(nx);
            vx.push(nvx);
            ax.push(nax);
            vy.push(nvy);
            ay.push(nay);
        }
        ReachableRanges { x, vx, vy }
    }
}

/// Standard-form MIQP for one horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct MiqpProblem {
    /// Continuous relaxation: objective, rows and boxes.
    pub relaxation: QpProblem,
    /// Columns restricted to {0, 1}.
    pub integer_set: Vec<usize>,
    pub layout: VariableLayout,
    /// One label per inequality row of the relaxation.
    pub g_labels: Vec<RowLabel>,
    /// One label per equality row of the relaxation.
    pub f_labels: Vec<RowLabel>,
    /// Constant dropped from the tracking cost.
    pub dropped_constant: f64,
}

impl MiqpProblem {
    /// Text dump for cross-checking with external solvers.
    pub fn dump(&self) -> String {
        let p = &self.relaxation;
        let mut out = String::new();
        let _ = writeln!(out, "# miqp problem");
        let _ = writeln!(
            out,
            "dims n={} m_ineq={} m_eq={} n_int={}",
            p.n(),
            p.g_vec.len(),
            p.f_vec.len(),
            self.integer_set.len()
        );
        let _ = writeln!(out, "offset {:.17e}", p.offset);
        let _ = writeln!(out, "[H] nnz={}", p.h_matrix.nnz());
        p.h_matrix.write_triplets(&mut out);
        let _ = writeln!(out, "[h]");
        write_vec(&mut out, &p.h_vec);
        let _ = writeln!(out, "[G] nnz={}", p.g_matrix.nnz());
        p.g_matrix.write_triplets(&mut out);
        let _ = writeln!(out, "[g]");
        write_vec(&mut out, &p.g_vec);
        let _ = writeln!(out, "[F] nnz={}", p.f_matrix.nnz());
        p.f_matrix.write_triplets(&mut out);
        let _ = writeln!(out, "[f]");
        write_vec(&mut out, &p.f_vec);
        let _ = writeln!(out, "[lb]");
        write_vec(&mut out, &p.lb);
        let _ = writeln!(out, "[ub]");
        write_vec(&mut out, &p.ub);
        let _ = writeln!(out, "[integer]");
        for c in &self.integer_set {
            let _ = writeln!(out, "{c}");
        }
        out
    }
}

fn write_vec(out: &mut String, v: &[f64]) {
    for x in v {
        let _ = writeln!(out, "{x:.17e}");
    }
}

/// Diagonal cost and linear tracking terms, in the `½zᵀHz + hᵀz` convention.
pub fn build_objective(scenario: &Scenario, layout: &VariableLayout) -> (CscMatrix, Vec<f64>) {
    let w = &scenario.weights;
    let mut h = TripletMatrix::new(layout.n_total, layout.n_total);
    let mut lin = vec![0.0; layout.n_total];
    for k in 0..layout.horizon_n {
        let diag = [
            (Component::Vx, w.q1),
            (Component::Ax, w.q2),
            (Component::Y, w.q3),
            (Component::Vy, w.q4),
            (Component::Ay, w.q5),
            (Component::Jx, w.r1),
            (Component::Jy, w.r2),
        ];
        for (c, weight) in diag {
            let j = layout.col(k, c);
            h.push(j, j, 2.0 * weight);
        }
        lin[layout.col(k, Component::Vx)] = -2.0 * w.q1 * scenario.v_ref;
        lin[layout.col(k, Component::Y)] = -2.0 * w.q3 * scenario.y_ref;
    }
    (h.to_csc(), lin)
}

/// Initial-state pinning rows followed by six transition rows per step.
pub fn build_dynamics_constraints(
    x0: &VehicleState,
    scenario: &Scenario,
    layout: &VariableLayout,
) -> Result<(CscMatrix, Vec<f64>, Vec<RowLabel>), BuildError> {
    let m = build_step_matrices(scenario.dt)?;
    let mut f = TripletMatrix::new(0, layout.n_total);
    let mut rhs = Vec::new();
    let mut labels = Vec::new();

    let init = x0.kinematic();
    for (i, c) in Component::STATES.into_iter().enumerate() {
        let r = f.add_row();
        f.push(r, layout.col(0, c), 1.0);
        rhs.push(init[i]);
        labels.push(RowLabel {
            step: 0,
            kind: RowKind::InitialState(c),
        });
    }

    for k in 0..layout.horizon_n {
        for (i, c) in Component::STATES.into_iter().enumerate() {
            let r = f.add_row();
            f.push(r, layout.col(k + 1, c), 1.0);
            for (j, cj) in Component::STATES.into_iter().enumerate() {
                let a = m.a_block[(i, j)];
                if a != 0.0 {
                    f.push(r, layout.col(k, cj), -a);
                }
            }
            for (j, cj) in Component::JERKS.into_iter().enumerate() {
                let b = m.b_block[(i, j)];
                if b != 0.0 {
                    f.push(r, layout.col(k, cj), -b);
                }
            }
            rhs.push(0.0);
            labels.push(RowLabel {
                step: k,
                kind: RowKind::Dynamics(c),
            });
        }
    }
    Ok((f.to_csc(), rhs, labels))
}

/// Column boxes: limits for states and jerks, the lane corridor for `y`,
/// `[0, 1]` for binaries.
pub fn build_bounds(scenario: &Scenario, layout: &VariableLayout) -> (Vec<f64>, Vec<f64>) {
    let l = &scenario.limits;
    let corridor = scenario.lane_corridor();
    let y = Interval::new(l.y.min.max(corridor.min), l.y.max.min(corridor.max));
    let mut lb = vec![0.0; layout.n_total];
    let mut ub = vec![1.0; layout.n_total];
    for col in 0..layout.n_continuous {
        let (_, c) = layout.describe(col).expect("column in range");
        let iv = match c {
            Component::X => l.x,
            Component::Vx => l.vx,
            Component::Ax => l.ax,
            Component::Y => y,
            Component::Vy => l.vy,
            Component::Ay => l.ay,
            Component::Jx => l.jx,
            Component::Jy => l.jy,
            _ => unreachable!("continuous block holds no binaries"),
        };
        lb[col] = iv.min;
        ub[col] = iv.max;
    }
    (lb, ub)
}

struct RowSink<'a> {
    g: &'a mut TripletMatrix,
    rhs: &'a mut Vec<f64>,
    labels: &'a mut Vec<RowLabel>,
}

impl RowSink<'_> {
    /// Adds `Σ coef·z ≤ rhs`.
    fn row(&mut self, step: usize, kind: RowKind, terms: &[(usize, f64)], rhs: f64) {
        let r = self.g.add_row();
        for &(c, v) in terms {
            self.g.push(r, c, v);
        }
        self.rhs.push(rhs);
        self.labels.push(RowLabel { step, kind });
    }
}

/// Linearized steering cone on lateral speed and acceleration.
pub fn build_nonholonomic(
    scenario: &Scenario,
    layout: &VariableLayout,
) -> (CscMatrix, Vec<f64>, Vec<RowLabel>) {
    let mut g = TripletMatrix::new(0, layout.n_total);
    let mut rhs = Vec::new();
    let mut labels = Vec::new();
    let mut sink = RowSink {
        g: &mut g,
        rhs: &mut rhs,
        labels: &mut labels,
    };
    let (tmin, tmax) = (scenario.theta_min.tan(), scenario.theta_max.tan());
    let w = scenario.omega_max;
    for k in 0..=layout.horizon_n {
        let vx = layout.col(k, Component::Vx);
        let vy = layout.col(k, Component::Vy);
        let ay = layout.col(k, Component::Ay);
        sink.row(k, RowKind::LateralSpeedUpper, &[(vy, 1.0), (vx, -tmax)], 0.0);
        sink.row(k, RowKind::LateralSpeedLower, &[(vy, -1.0), (vx, tmin)], 0.0);
        sink.row(k, RowKind::LateralAccelUpper, &[(ay, 1.0), (vx, -w)], 0.0);
        sink.row(k, RowKind::LateralAccelLower, &[(ay, -1.0), (vx, -w)], 0.0);
    }
    (g.to_csc(), rhs, labels)
}

/// Inequality matrix, right-hand side, row labels and binary columns.
pub type LogicRows = (CscMatrix, Vec<f64>, Vec<RowLabel>, Vec<usize>);

/// Big-M indicator rows for the bump window, the speed cap and (in
/// human-behavior mode) the turning flags.
///
/// Each row's constant is the smallest value valid over `ranges`, plus a
/// unit margin, capped by `scenario.big_m`. A row that would need more than
/// `big_m` is rejected.
pub fn build_bump_logic(
    scenario: &Scenario,
    layout: &VariableLayout,
    ranges: &ReachableRanges,
) -> Result<LogicRows, BuildError> {
    let mut g = TripletMatrix::new(0, layout.n_total);
    let mut rhs = Vec::new();
    let mut labels = Vec::new();
    let mut sink = RowSink {
        g: &mut g,
        rhs: &mut rhs,
        labels: &mut labels,
    };
    let eps = scenario.epsilon;
    let big_m = |step: usize, row: RowKind, required: f64| -> Result<f64, BuildError> {
        if required > scenario.big_m {
            return Err(BuildError::BigMTooSmall {
                step,
                row,
                required,
                big_m: scenario.big_m,
            });
        }
        Ok((required.max(0.0) + BIG_M_MARGIN).min(scenario.big_m))
    };

    for k in 0..=layout.horizon_n {
        let x = layout.col(k, Component::X);
        let vx = layout.col(k, Component::Vx);
        let d1 = layout.col(k, Component::Delta1);
        let d2 = layout.col(k, Component::Delta2);
        let d3 = layout.col(k, Component::Delta3);
        let (xr, vr) = (ranges.x[k], ranges.vx[k]);
        let (bs, be, vmax) = (scenario.bump_start, scenario.bump_end, scenario.v_max_bump);

        // x ≥ bs − M(1 − δ1)  ⇔  −x + M·δ1 ≤ M − bs
        let m = big_m(k, RowKind::BumpStartOn, bs - xr.min)?;
        sink.row(k, RowKind::BumpStartOn, &[(x, -1.0), (d1, m)], m - bs);
        // x ≤ bs − ε + M·δ1
        let m = big_m(k, RowKind::BumpStartOff, xr.max - bs + eps)?;
        sink.row(k, RowKind::BumpStartOff, &[(x, 1.0), (d1, -m)], bs - eps);
        // x ≤ be + M(1 − δ2)  ⇔  x + M·δ2 ≤ be + M
        let m = big_m(k, RowKind::BumpEndOn, xr.max - be)?;
        sink.row(k, RowKind::BumpEndOn, &[(x, 1.0), (d2, m)], be + m);
        // x ≥ be + ε − M·δ2  ⇔  −x − M·δ2 ≤ −be − ε
        let m = big_m(k, RowKind::BumpEndOff, be + eps - xr.min)?;
        sink.row(k, RowKind::BumpEndOff, &[(x, -1.0), (d2, -m)], -be - eps);
        // vx ≤ vmax + M(1 − δ3)
        let m = big_m(k, RowKind::SpeedCapOn, vr.max - vmax)?;
        sink.row(k, RowKind::SpeedCapOn, &[(vx, 1.0), (d3, m)], vmax + m);
        if scenario.strict_indicators {
            // vx ≥ vmax + ε − M·δ3
            let m = big_m(k, RowKind::SpeedCapOff, vmax + eps - vr.min)?;
            sink.row(k, RowKind::SpeedCapOff, &[(vx, -1.0), (d3, -m)], -vmax - eps);
        }
        sink.row(k, RowKind::CapNeedsStart, &[(d3, 1.0), (d1, -1.0)], 0.0);
        sink.row(k, RowKind::CapNeedsEnd, &[(d3, 1.0), (d2, -1.0)], 0.0);
        sink.row(k, RowKind::OnBumpNeedsCap, &[(d1, 1.0), (d2, 1.0), (d3, -1.0)], 1.0);

        if layout.human_behavior_mode {
            let vy = layout.col(k, Component::Vy);
            let tl = layout.col(k, Component::TurnLeft);
            let tr = layout.col(k, Component::TurnRight);
            let it = layout.col(k, Component::IsTurning);
            let yr = ranges.vy[k];
            let vt = scenario.v_turn;

            // vy ≥ vt − M(1 − tl)
            let m = big_m(k, RowKind::TurnLeftOn, vt - yr.min)?;
            sink.row(k, RowKind::TurnLeftOn, &[(vy, -1.0), (tl, m)], m - vt);
            // vy ≤ vt − ε + M·tl
            let m = big_m(k, RowKind::TurnLeftOff, yr.max - vt + eps)?;
            sink.row(k, RowKind::TurnLeftOff, &[(vy, 1.0), (tl, -m)], vt - eps);
            // vy ≤ −vt + M(1 − tr)
            let m = big_m(k, RowKind::TurnRightOn, yr.max + vt)?;
            sink.row(k, RowKind::TurnRightOn, &[(vy, 1.0), (tr, m)], m - vt);
            // vy ≥ −vt + ε − M·tr
            let m = big_m(k, RowKind::TurnRightOff, -vt + eps - yr.min)?;
            sink.row(k, RowKind::TurnRightOff, &[(vy, -1.0), (tr, -m)], vt - eps);

            sink.row(k, RowKind::TurningCoversLeft, &[(tl, 1.0), (it, -1.0)], 0.0);
            sink.row(k, RowKind::TurningCoversRight, &[(tr, 1.0), (it, -1.0)], 0.0);
            sink.row(
                k,
                RowKind::TurningNeedsDirection,
                &[(it, 1.0), (tl, -1.0), (tr, -1.0)],
                0.0,
            );
            sink.row(
                k,
                RowKind::OnBumpNeedsTurning,
                &[(d1, 1.0), (d2, 1.0), (it, -1.0)],
                1.0,
            );
        }
    }
    Ok((g.to_csc(), rhs, labels, layout.binary_columns()))
}

fn stack(parts: &[&CscMatrix], ncols: usize) -> CscMatrix {
    let nrows: usize = parts.iter().map(|p| p.nrows).sum();
    let mut t = TripletMatrix::new(nrows, ncols);
    let mut offset = 0;
    for p in parts {
        for j in 0..p.ncols {
            for (i, v) in p.col(j) {
                t.push(offset + i, j, v);
            }
        }
        offset += p.nrows;
    }
    t.to_csc()
}

/// Full MIQP at the current state.
pub fn assemble(scenario: &Scenario, x0: &VehicleState) -> Result<MiqpProblem, BuildError> {
    let violations = scenario.validate();
    if !violations.is_empty() {
        return Err(BuildError::InvalidScenario(violations));
    }
    let layout = VariableLayout::new(scenario.horizon_n, scenario.human_behavior_mode)?;
    let (h_matrix, h_vec) = build_objective(scenario, &layout);
    let (f_matrix, f_vec, f_labels) = build_dynamics_constraints(x0, scenario, &layout)?;
    let (lb, ub) = build_bounds(scenario, &layout);
    let (g_nh, rhs_nh, labels_nh) = build_nonholonomic(scenario, &layout);
    let ranges = ReachableRanges::propagate(scenario, x0, layout.horizon_n);
    let (g_bump, rhs_bump, labels_bump, integer_set) =
        build_bump_logic(scenario, &layout, &ranges)?;

    let g_matrix = stack(&[&g_nh, &g_bump], layout.n_total);
    let g_vec = [rhs_nh, rhs_bump].concat();
    let g_labels = [labels_nh, labels_bump].concat();

    Ok(MiqpProblem {
        relaxation: QpProblem {
            h_matrix,
            h_vec,
            offset: 0.0,
            g_matrix,
            g_vec,
            f_matrix,
            f_vec,
            lb,
            ub,
        },
        integer_set,
        layout,
        g_labels,
        f_labels,
        dropped_constant: scenario.tracking_constant(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{propagate, ControlInput};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn initial(s: &Scenario) -> VehicleState {
        VehicleState {
            x: s.x0,
            y: s.y0,
            vx: s.vx0,
            vy: s.vy0,
            ax: s.ax0,
            ay: s.ay0,
            theta: s.theta0,
        }
    }

    #[test]
    fn layout_counts() {
        let off = VariableLayout::new(1, false).unwrap();
        assert_eq!((off.n_continuous, off.n_binary, off.n_total), (14, 6, 20));
        let on = VariableLayout::new(1, true).unwrap();
        assert_eq!((on.n_continuous, on.n_binary, on.n_total), (14, 12, 26));
        assert_eq!(VariableLayout::new(0, false), Err(BuildError::ZeroHorizon));
    }

    #[test]
    fn layout_is_a_bijection() {
        for n in 1..=30 {
            for mode in [false, true] {
                let l = VariableLayout::new(n, mode).unwrap();
                let mut seen = vec![false; l.n_total];
                for k in 0..=n {
                    for c in Component::STATES
                        .into_iter()
                        .chain(Component::JERKS)
                        .chain(Component::BUMP)
                        .chain(Component::TURNING)
                    {
                        if let Some(col) = l.index(k, c) {
                            assert!(!seen[col], "column {col} assigned twice");
                            seen[col] = true;
                            assert_eq!(l.describe(col), Some((k, c)));
                            assert_eq!(col >= l.n_continuous, c.is_binary());
                        }
                    }
                }
                assert!(seen.iter().all(|&s| s));
                assert_eq!(l.describe(l.n_total), None);
            }
        }
    }

    fn quad(h: &CscMatrix, lin: &[f64], z: &[f64]) -> f64 {
        let hz = h.mul(z);
        0.5 * z.iter().zip(&hz).map(|(a, b)| a * b).sum::<f64>()
            + z.iter().zip(lin).map(|(a, b)| a * b).sum::<f64>()
    }

    #[test]
    fn objective_at_reference_is_minus_constant() {
        let s = Scenario::reference();
        let l = VariableLayout::new(5, false).unwrap();
        let (h, lin) = build_objective(&s, &l);
        let mut z = vec![0.0; l.n_total];
        for k in 0..=5 {
            z[l.col(k, Component::Vx)] = s.v_ref;
            z[l.col(k, Component::Y)] = s.y_ref;
            z[l.col(k, Component::X)] = 3.0 * k as f64;
        }
        let expected = -5.0 * (s.weights.q1 * 100.0 + s.weights.q3 * 0.75 * 0.75);
        assert!((quad(&h, &lin, &z) - expected).abs() < 1e-12);

        // one step 1 m/s fast costs exactly q1 more
        z[l.col(2, Component::Vx)] += 1.0;
        assert!((quad(&h, &lin, &z) - expected - s.weights.q1).abs() < 1e-12);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn position_and_binaries_carry_no_cost() {
        let s = Scenario::reference();
        let l = VariableLayout::new(4, true).unwrap();
        let (h, lin) = build_objective(&s, &l);
        for col in 0..l.n_total {
            let (_, c) = l.describe(col).unwrap();
            if c == Component::X || c.is_binary() {
                assert_eq!(h.col(col).count(), 0);
                assert_eq!(lin[col], 0.0);
                for j in 0..l.n_total {
                    assert_eq!(h.get(col, j), 0.0);
                }
            }
        }
        // diagonal, nonnegative, symmetric
        assert_eq!(h.max_asymmetry(), 0.0);
        for j in 0..l.n_total {
            for (i, v) in h.col(j) {
                assert_eq!(i, j);
                assert!(v >= 0.0);
            }
        }
    }

    #[test]
    fn dynamics_rows() {
        let s = Scenario::reference();
        let l = VariableLayout::new(1, false).unwrap();
        let x0 = initial(&s);
        let (f, rhs, labels) = build_dynamics_constraints(&x0, &s, &l).unwrap();
        assert_eq!(f.nrows, 12);
        let vx_row = labels
            .iter()
            .position(|r| r.kind == RowKind::InitialState(Component::Vx))
            .unwrap();
        assert_eq!(rhs[vx_row], 10.0);
        let support = f.row_support();
        assert_eq!(support[vx_row], vec![l.col(0, Component::Vx)]);
        assert_eq!(f.get(vx_row, l.col(0, Component::Vx)), 1.0);
    }

    #[test]
    fn dynamics_rows_reproduce_propagation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = Scenario::reference();
        let n = 8;
        let l = VariableLayout::new(n, false).unwrap();
        for _ in 0..50 {
            let x0 = VehicleState {
                x: rng.gen_range(0.0..40.0),
                y: rng.gen_range(0.3..1.7),
                vx: rng.gen_range(0.0..15.0),
                vy: rng.gen_range(-0.5..0.5),
                ax: rng.gen_range(-2.0..2.0),
                ay: rng.gen_range(-1.0..1.0),
                theta: 0.0,
            };
            let (f, rhs, _) = build_dynamics_constraints(&x0, &s, &l).unwrap();
            // roll out random jerks and fill z, then check the rows
            let mut z = vec![0.0; l.n_total];
            let mut state = x0;
            let mut states = vec![state];
            for k in 0..n {
                let u = ControlInput {
                    jx: rng.gen_range(-10.0..10.0),
                    jy: rng.gen_range(-10.0..10.0),
                };
                z[l.col(k, Component::Jx)] = u.jx;
                z[l.col(k, Component::Jy)] = u.jy;
                state = propagate(&state, &u, s.dt);
                states.push(state);
            }
            for (k, st) in states.iter().enumerate() {
                for (i, c) in Component::STATES.into_iter().enumerate() {
                    z[l.col(k, c)] = st.kinematic()[i];
                }
            }
            let fz = f.mul(&z);
            for (a, b) in fz.iter().zip(&rhs) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn bounds_follow_limits_and_corridor() {
        let s = Scenario::reference();
        let l = VariableLayout::new(6, true).unwrap();
        let (lb, ub) = build_bounds(&s, &l);
        for k in 0..=6 {
            let y = l.col(k, Component::Y);
            assert_eq!((lb[y], ub[y]), (0.25, 1.75));
            let d1 = l.col(k, Component::Delta1);
            assert_eq!((lb[d1], ub[d1]), (0.0, 1.0));
            if k < 6 {
                let jx = l.col(k, Component::Jx);
                assert_eq!((lb[jx], ub[jx]), (-10.0, 10.0));
            }
        }
    }

    fn rows_of(p: &MiqpProblem, kind: RowKind, step: usize) -> Vec<usize> {
        p.g_labels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind == kind && l.step == step)
            .map(|(i, _)| i)
            .collect()
    }

    fn row_value(p: &MiqpProblem, row: usize, z: &[f64]) -> f64 {
        p.relaxation.g_matrix.mul(z)[row] - p.relaxation.g_vec[row]
    }

    #[test]
    fn nonholonomic_cone() {
        let s = Scenario::reference();
        let p = assemble(&s, &initial(&s)).unwrap();
        let l = &p.layout;
        let upper = rows_of(&p, RowKind::LateralSpeedUpper, 3)[0];
        let lower = rows_of(&p, RowKind::LateralSpeedLower, 3)[0];
        let mut z = vec![0.0; l.n_total];
        z[l.col(3, Component::Vx)] = 10.0;
        let bound = 10.0 * crate::scenario::DEFAULT_THETA_MAX.tan();
        assert!((bound - 5.7735).abs() < 1e-4);
        z[l.col(3, Component::Vy)] = bound;
        assert!(row_value(&p, upper, &z).abs() < 1e-12);
        z[l.col(3, Component::Vy)] = bound + 1e-3;
        assert!(row_value(&p, upper, &z) > 0.0);
        // symmetric interval
        z[l.col(3, Component::Vy)] = -bound;
        assert!(row_value(&p, lower, &z).abs() < 1e-12);

        // apex: vx = 0 pins vy and ay at 0
        z[l.col(3, Component::Vx)] = 0.0;
        for (vy, ay, ok) in [(0.0, 0.0, true), (0.01, 0.0, false), (0.0, -0.01, false)] {
            z[l.col(3, Component::Vy)] = vy;
            z[l.col(3, Component::Ay)] = ay;
            let all_ok = [
                RowKind::LateralSpeedUpper,
                RowKind::LateralSpeedLower,
                RowKind::LateralAccelUpper,
                RowKind::LateralAccelLower,
            ]
            .iter()
            .all(|&kind| row_value(&p, rows_of(&p, kind, 3)[0], &z) <= 0.0);
            assert_eq!(all_ok, ok);
        }
    }

    #[test]
    fn boundary_position_forces_delta1() {
        let mut s = Scenario::reference();
        s.x0 = 25.0;
        let p = assemble(&s, &initial(&s)).unwrap();
        let l = &p.layout;
        let on = rows_of(&p, RowKind::BumpStartOn, 2)[0];
        let off = rows_of(&p, RowKind::BumpStartOff, 2)[0];
        let mut z = vec![0.0; l.n_total];
        z[l.col(2, Component::X)] = 30.0;
        z[l.col(2, Component::Delta1)] = 0.0;
        assert!(row_value(&p, off, &z) > 0.0, "δ1 = 0 needs x ≤ 29.9999");
        assert!((row_value(&p, off, &z) - 1e-4).abs() < 1e-9);
        z[l.col(2, Component::Delta1)] = 1.0;
        assert!(row_value(&p, on, &z) <= 0.0);
        assert!(row_value(&p, off, &z) <= 0.0);
    }

    #[test]
    fn on_bump_forces_speed_cap() {
        let s = Scenario::reference();
        let p = assemble(&s, &initial(&s)).unwrap();
        let l = &p.layout;
        let link = rows_of(&p, RowKind::OnBumpNeedsCap, 4)[0];
        let cap = rows_of(&p, RowKind::SpeedCapOn, 4)[0];
        let mut z = vec![0.0; l.n_total];
        z[l.col(4, Component::Delta1)] = 1.0;
        z[l.col(4, Component::Delta2)] = 1.0;
        assert!(row_value(&p, link, &z) > 0.0, "δ3 = 0 violates the link");
        z[l.col(4, Component::Delta3)] = 1.0;
        assert!(row_value(&p, link, &z) <= 0.0);
        z[l.col(4, Component::Vx)] = 5.0;
        assert!(row_value(&p, cap, &z) <= 1e-12);
        z[l.col(4, Component::Vx)] = 5.01;
        assert!(row_value(&p, cap, &z) > 0.0);
    }

    #[test]
    fn on_bump_forces_turning_in_human_mode() {
        let mut s = Scenario::reference();
        s.human_behavior_mode = true;
        let p = assemble(&s, &initial(&s)).unwrap();
        let l = &p.layout;
        let link = rows_of(&p, RowKind::OnBumpNeedsTurning, 4)[0];
        let mut z = vec![0.0; l.n_total];
        z[l.col(4, Component::Delta1)] = 1.0;
        z[l.col(4, Component::Delta2)] = 1.0;
        assert!(row_value(&p, link, &z) > 0.0);
        z[l.col(4, Component::IsTurning)] = 1.0;
        assert!(row_value(&p, link, &z) <= 0.0);
        // is_turning needs a direction, and a direction needs |vy| ≥ v_turn
        let needs = rows_of(&p, RowKind::TurningNeedsDirection, 4)[0];
        assert!(row_value(&p, needs, &z) > 0.0);
        z[l.col(4, Component::TurnLeft)] = 1.0;
        assert!(row_value(&p, needs, &z) <= 0.0);
        let left = rows_of(&p, RowKind::TurnLeftOn, 4)[0];
        z[l.col(4, Component::Vy)] = 0.05;
        assert!(row_value(&p, left, &z) > 0.0);
        z[l.col(4, Component::Vy)] = 0.1;
        assert!(row_value(&p, left, &z) <= 1e-12);
    }

    #[test]
    fn assembled_counts_and_determinism() {
        let mut s = Scenario::reference();
        s.horizon_n = 20;
        let x0 = initial(&s);
        let p = assemble(&s, &x0).unwrap();
        assert_eq!(p.layout.n_continuous, 166);
        assert_eq!(p.layout.n_binary, 63);
        assert_eq!(p.integer_set.len(), 63);
        for &c in &p.integer_set {
            assert_eq!((p.relaxation.lb[c], p.relaxation.ub[c]), (0.0, 1.0));
        }
        let q = assemble(&s, &x0).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.dump(), q.dump());
        assert!(p.relaxation.h_matrix.max_asymmetry() <= 1e-12);
    }

    fn expected_counts(n: usize, human: bool, strict: bool) -> (usize, usize) {
        let eq = 6 + 6 * n;
        let per_step = 4 + 8 + strict as usize + if human { 8 } else { 0 };
        (eq, per_step * (n + 1))
    }

    #[test]
    fn row_count_formulas() {
        let mut s = Scenario::reference();
        for n in 1..=30 {
            for human in [false, true] {
                for strict in [false, true] {
                    s.horizon_n = n;
                    s.human_behavior_mode = human;
                    s.strict_indicators = strict;
                    let p = assemble(&s, &initial(&s)).unwrap();
                    let (eq, ineq) = expected_counts(n, human, strict);
                    assert_eq!(p.relaxation.f_vec.len(), eq);
                    assert_eq!(p.relaxation.g_vec.len(), ineq);
                    assert_eq!(p.g_labels.len(), ineq);
                    assert_eq!(p.f_labels.len(), eq);
                }
            }
        }
    }

    #[test]
    fn small_big_m_is_rejected() {
        let mut s = Scenario::reference();
        s.big_m = 1.0;
        match assemble(&s, &initial(&s)) {
            Err(BuildError::BigMTooSmall { required, .. }) => assert!(required > 1.0),
            other => panic!("expected BigMTooSmall, got {other:?}"),
        }
    }

    #[test]
    fn reach_ranges_contain_rollouts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Scenario::reference();
        let x0 = initial(&s);
        let n = 30;
        let r = ReachableRanges::propagate(&s, &x0, n);
        for _ in 0..200 {
            let mut st = x0;
            for k in 1..=n {
                // random jerks, clipped so acceleration stays within its box
                let mut jx: f64 = rng.gen_range(-10.0..10.0);
                jx = jx.clamp((-3.0 - st.ax) / s.dt, (3.0 - st.ax) / s.dt);
                st = propagate(&st, &ControlInput { jx, jy: 0.0 }, s.dt);
                if st.vx < 0.0 || st.vx > 20.0 {
                    break;
                }
                assert!(r.x[k].contains(st.x), "x {} outside {:?} at {k}", st.x, r.x[k]);
                assert!(r.vx[k].contains(st.vx));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn objective_equals_tracking_cost(
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Scenario::reference();
            let l = VariableLayout::new(6, false).unwrap();
            let (h, lin) = build_objective(&s, &l);
            let z: Vec<f64> = (0..l.n_total).map(|_| rng.gen_range(-15.0..15.0)).collect();
            let w = &s.weights;
            let mut direct = 0.0;
            for k in 0..6 {
                let v = |c| z[l.col(k, c)];
                direct += w.q1 * (v(Component::Vx) - s.v_ref).powi(2)
                    + w.q2 * v(Component::Ax).powi(2)
                    + w.q3 * (v(Component::Y) - s.y_ref).powi(2)
                    + w.q4 * v(Component::Vy).powi(2)
                    + w.q5 * v(Component::Ay).powi(2)
                    + w.r1 * v(Component::Jx).powi(2)
                    + w.r2 * v(Component::Jy).powi(2);
            }
            let mut s6 = s.clone();
            s6.horizon_n = 6;
            let via_form = quad(&h, &lin, &z) + s6.tracking_constant();
            prop_assert!((via_form - direct).abs() <= 1e-9 * direct.abs().max(1.0));
        }
    }
}
