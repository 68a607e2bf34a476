//! Receding-horizon trajectory planning over speed bumps.
//!
//! The planner models the vehicle as a jerk-driven point mass, encodes the
//! bump speed limit with binary indicator variables, and solves the
//! resulting mixed-integer QP at every control step with a best-first
//! branch-and-bound over certified QP relaxations.

pub mod bnb;
pub mod dynamics;
pub mod miqp;
pub mod mpc;
pub mod qp;
pub mod scenario;
pub mod sparse;
