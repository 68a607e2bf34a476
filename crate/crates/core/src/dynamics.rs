//! Third-order point-mass model: jerk drives acceleration, velocity and
//! position independently along both road axes.

use nalgebra::{Matrix3, Matrix6, Matrix6x2, Vector2, Vector3, Vector6};
use serde::Serialize;
use thiserror::Error;

/// Below this longitudinal speed the heading is held constant.
pub const V_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub ax: f64,
    pub ay: f64,
    pub theta: f64,
}

impl VehicleState {
    /// Kinematic part in block order `[x, vx, ax, y, vy, ay]`.
    pub fn kinematic(&self) -> Vector6<f64> {
        Vector6::new(self.x, self.vx, self.ax, self.y, self.vy, self.ay)
    }

    pub fn with_kinematic(k: &Vector6<f64>, theta: f64) -> Self {
        VehicleState {
            x: k[0],
            vx: k[1],
            ax: k[2],
            y: k[3],
            vy: k[4],
            ay: k[5],
            theta,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.kinematic().iter().all(|v| v.is_finite()) && self.theta.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ControlInput {
    pub jx: f64,
    pub jy: f64,
}

impl ControlInput {
    pub fn as_vector(&self) -> Vector2<f64> {
        Vector2::new(self.jx, self.jy)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("time step must be positive and finite, got {0}")]
    NonPositiveStep(f64),
}

/// Discrete transition matrices for one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMatrices {
    pub a_d: Matrix3<f64>,
    pub b_d: Vector3<f64>,
    pub a_block: Matrix6<f64>,
    pub b_block: Matrix6x2<f64>,
}

pub fn build_step_matrices(dt: f64) -> Result<StepMatrices, DynamicsError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DynamicsError::NonPositiveStep(dt));
    }
    let a_d = Matrix3::new(
        1.0, dt, 0.5 * dt * dt, //
        0.0, 1.0, dt, //
        0.0, 0.0, 1.0,
    );
    let b_d = Vector3::new(dt * dt * dt / 6.0, 0.5 * dt * dt, dt);

    let mut a_block = Matrix6::zeros();
    a_block.fixed_view_mut::<3, 3>(0, 0).copy_from(&a_d);
    a_block.fixed_view_mut::<3, 3>(3, 3).copy_from(&a_d);
    let mut b_block = Matrix6x2::zeros();
    b_block.fixed_view_mut::<3, 1>(0, 0).copy_from(&b_d);
    b_block.fixed_view_mut::<3, 1>(3, 1).copy_from(&b_d);

    Ok(StepMatrices {
        a_d,
        b_d,
        a_block,
        b_block,
    })
}

/// Advance one step with constant jerk over `dt`.
pub fn propagate(state: &VehicleState, control: &ControlInput, dt: f64) -> VehicleState {
    let dt2 = dt * dt;
    let dt3 = dt2 * dt;
    let s = state;
    VehicleState {
        x: s.x + s.vx * dt + 0.5 * s.ax * dt2 + control.jx * dt3 / 6.0,
        y: s.y + s.vy * dt + 0.5 * s.ay * dt2 + control.jy * dt3 / 6.0,
        vx: s.vx + s.ax * dt + 0.5 * control.jx * dt2,
        vy: s.vy + s.ay * dt + 0.5 * control.jy * dt2,
        ax: s.ax + control.jx * dt,
        ay: s.ay + control.jy * dt,
        theta: update_heading(s.theta, s.vx, s.vy, dt),
    }
}

/// Heading follows the velocity direction `vy / vx`; frozen when `vx` is
/// under [`V_FLOOR`].
pub fn update_heading(theta: f64, vx: f64, vy: f64, dt: f64) -> f64 {
    if vx < V_FLOOR {
        theta
    } else {
        theta + dt * (vy / vx)
    }
}
