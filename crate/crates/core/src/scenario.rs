//! Scenario description and its flat `key = value` file format.
//!
//! A scenario bundles everything the planner consumes: timing, road
//! geometry, the speed-bump window, vehicle limits and cost weights. Files
//! use one `key = value` pair per line, `#` starts a comment, and keys are
//! the field names of [`Scenario`] (weights as `q1`..`q5`, `r1`, `r2`;
//! limits as `<component>_min` / `<component>_max`).

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::Serialize;
use thiserror::Error;

/// Closed interval `[min, max]` for one state or control component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub min: f64,
    pub max: f64,
}

impl Interval {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn width(&self) -> f64 {
        self.max - self.min
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }
}

/// Box limits on the kinematic state and the jerk inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Limits {
    pub x: Interval,
    pub vx: Interval,
    pub ax: Interval,
    pub y: Interval,
    pub vy: Interval,
    pub ay: Interval,
    pub jx: Interval,
    pub jy: Interval,
}

/// Tracking and comfort weights of the quadratic cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Weights {
    /// longitudinal speed error
    pub q1: f64,
    /// longitudinal acceleration
    pub q2: f64,
    /// lateral position error
    pub q3: f64,
    /// lateral velocity
    pub q4: f64,
    /// lateral acceleration
    pub q5: f64,
    /// longitudinal jerk
    pub r1: f64,
    /// lateral jerk
    pub r2: f64,
}

impl Weights {
    fn as_array(&self) -> [(&'static str, f64); 7] {
        [
            ("q1", self.q1),
            ("q2", self.q2),
            ("q3", self.q3),
            ("q4", self.q4),
            ("q5", self.q5),
            ("r1", self.r1),
            ("r2", self.r2),
        ]
    }
}

/// Complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub dt: f64,
    pub horizon_n: usize,
    pub sim_steps: usize,
    pub road_width: f64,
    pub lateral_margin: f64,
    pub x0: f64,
    pub y0: f64,
    pub vx0: f64,
    pub vy0: f64,
    pub ax0: f64,
    pub ay0: f64,
    pub theta0: f64,
    pub v_ref: f64,
    pub y_ref: f64,
    pub bump_start: f64,
    pub bump_end: f64,
    pub v_max_bump: f64,
    pub v_turn: f64,
    /// Stored for completeness; the point-mass model does not use it.
    pub wheelbase: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    pub omega_max: f64,
    pub weights: Weights,
    pub limits: Limits,
    pub human_behavior_mode: bool,
    pub strict_indicators: bool,
    pub big_m: f64,
    pub epsilon: f64,
}

pub const DEFAULT_HORIZON: usize = 30;
#[allow(clippy::approx_constant)]
pub const DEFAULT_THETA_MAX: f64 = 0.5236;
pub const DEFAULT_OMEGA_MAX: f64 = 0.5;
pub const DEFAULT_LATERAL_MARGIN: f64 = 0.25;
pub const DEFAULT_BIG_M: f64 = 1000.0;
pub const DEFAULT_EPSILON: f64 = 1e-4;

impl Scenario {
    /// The reference scenario with the documented defaults.
    pub fn reference() -> Self {
        let road_width = 2.0;
        Scenario {
            dt: 0.1,
            horizon_n: DEFAULT_HORIZON,
            sim_steps: 200,
            road_width,
            lateral_margin: DEFAULT_LATERAL_MARGIN,
            x0: 0.0,
            y0: 0.75,
            vx0: 10.0,
            vy0: 0.0,
            ax0: 0.0,
            ay0: 0.0,
            theta0: 0.0,
            v_ref: 10.0,
            y_ref: 0.75,
            bump_start: 30.0,
            bump_end: 35.0,
            v_max_bump: 5.0,
            v_turn: 0.1,
            wheelbase: 2.7,
            theta_min: -DEFAULT_THETA_MAX,
            theta_max: DEFAULT_THETA_MAX,
            omega_max: DEFAULT_OMEGA_MAX,
            weights: Weights {
                q1: 1.0,
                q2: 1.0,
                q3: 1.0,
                q4: 2.0,
                q5: 4.0,
                r1: 4.0,
                r2: 4.0,
            },
            limits: default_limits(road_width),
            human_behavior_mode: false,
            strict_indicators: false,
            big_m: DEFAULT_BIG_M,
            epsilon: DEFAULT_EPSILON,
        }
    }

    /// Constant dropped from the tracking cost: `Σ_k q1·v_ref² + q3·y_ref²`.
    pub fn tracking_constant(&self) -> f64 {
        self.horizon_n as f64
            * (self.weights.q1 * self.v_ref * self.v_ref + self.weights.q3 * self.y_ref * self.y_ref)
    }

    /// Lateral keep-in corridor `[margin, width - margin]`.
    pub fn lane_corridor(&self) -> Interval {
        Interval::new(self.lateral_margin, self.road_width - self.lateral_margin)
    }

    pub fn bump_window(&self) -> Interval {
        Interval::new(self.bump_start, self.bump_end)
    }

    /// Check every scenario invariant. An empty list means the scenario is valid.
    /// Violations are sorted by field name.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut fail = |field: &str, message: String| {
            out.push(Violation {
                field: field.to_string(),
                message,
            })
        };

        for (key, value) in self.real_fields() {
            if !value.is_finite() {
                fail(&key, format!("{key} must be finite, got {value}"));
            }
        }

        if !(self.dt > 0.0) {
            fail("dt", format!("dt must be positive, got {}", self.dt));
        }
        if self.horizon_n < 1 {
            fail("horizon_n", "horizon_n must be at least 1".into());
        }
        if self.sim_steps < 1 {
            fail("sim_steps", "sim_steps must be at least 1".into());
        }
        if !(self.bump_start < self.bump_end) {
            fail(
                "bump_end",
                format!(
                    "bump_start ({}) must be below bump_end ({})",
                    self.bump_start, self.bump_end
                ),
            );
        }
        if !(self.v_max_bump > 0.0 && self.v_max_bump <= self.limits.vx.max) {
            fail(
                "v_max_bump",
                format!(
                    "v_max_bump must lie in (0, vx_max = {}], got {}",
                    self.limits.vx.max, self.v_max_bump
                ),
            );
        }
        if !(self.v_turn > 0.0) {
            fail("v_turn", format!("v_turn must be positive, got {}", self.v_turn));
        }
        if !(self.lateral_margin >= 0.0) {
            fail(
                "lateral_margin",
                format!("lateral_margin must be nonnegative, got {}", self.lateral_margin),
            );
        }
        let corridor = self.lane_corridor();
        if !(corridor.width() > 0.0) {
            fail(
                "road_width",
                format!(
                    "road_width ({}) leaves no corridor after margins of {}",
                    self.road_width, self.lateral_margin
                ),
            );
        }
        if !corridor.contains(self.y0) {
            fail(
                "y0",
                format!("y0 = {} outside lane corridor [{}, {}]", self.y0, corridor.min, corridor.max),
            );
        }
        if !corridor.contains(self.y_ref) {
            fail(
                "y_ref",
                format!(
                    "y_ref = {} outside lane corridor [{}, {}]",
                    self.y_ref, corridor.min, corridor.max
                ),
            );
        }
        if !(self.theta_min < 0.0) {
            fail("theta_min", format!("theta_min must be negative, got {}", self.theta_min));
        }
        if !(self.theta_max > 0.0) {
            fail("theta_max", format!("theta_max must be positive, got {}", self.theta_max));
        }
        if !(self.omega_max > 0.0) {
            fail("omega_max", format!("omega_max must be positive, got {}", self.omega_max));
        }
        if !(self.big_m > 0.0) {
            fail("big_m", format!("big_m must be positive, got {}", self.big_m));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            fail("epsilon", format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }

        let mut total = 0.0;
        for (name, w) in self.weights.as_array() {
            if !(w >= 0.0) {
                fail(name, format!("{name} must be nonnegative, got {w}"));
            }
            total += w;
        }
        if !(total > 0.0) {
            fail("weights", "at least one cost weight must be positive".into());
        }

        for (name, iv) in self.limits.named() {
            if !(iv.min <= iv.max) {
                fail(
                    &format!("{name}_min"),
                    format!("{name}_min ({}) exceeds {name}_max ({})", iv.min, iv.max),
                );
            }
        }
        if !(self.limits.vx.min >= 0.0) {
            fail(
                "vx_min",
                format!("vx_min must be nonnegative, got {}", self.limits.vx.min),
            );
        }

        out.sort_by(|a, b| a.field.cmp(&b.field));
        out
    }

    fn real_fields(&self) -> Vec<(String, f64)> {
        let mut v = Vec::new();
        for key in KEYS {
            if let Some(Value::Real(x)) = self.get(key.name) {
                v.push((key.name.to_string(), x));
            }
        }
        v
    }

    /// Write the scenario in the flat file format. Reals use 17 significant
    /// digits so that parsing the output reproduces the scenario exactly.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let value = self.get(key.name).expect("every key has a field");
            let _ = writeln!(out, "{} = {}", key.name, value);
        }
        out
    }

    fn get(&self, key: &str) -> Option<Value> {
        use Value::*;
        let l = &self.limits;
        let w = &self.weights;
        Some(match key {
            "dt" => Real(self.dt),
            "horizon_n" => Count(self.horizon_n),
            "sim_steps" => Count(self.sim_steps),
            "road_width" => Real(self.road_width),
            "lateral_margin" => Real(self.lateral_margin),
            "x0" => Real(self.x0),
            "y0" => Real(self.y0),
            "vx0" => Real(self.vx0),
            "vy0" => Real(self.vy0),
            "ax0" => Real(self.ax0),
            "ay0" => Real(self.ay0),
            "theta0" => Real(self.theta0),
            "v_ref" => Real(self.v_ref),
            "y_ref" => Real(self.y_ref),
            "bump_start" => Real(self.bump_start),
            "bump_end" => Real(self.bump_end),
            "v_max_bump" => Real(self.v_max_bump),
            "v_turn" => Real(self.v_turn),
            "wheelbase" => Real(self.wheelbase),
            "theta_min" => Real(self.theta_min),
            "theta_max" => Real(self.theta_max),
            "omega_max" => Real(self.omega_max),
            "q1" => Real(w.q1),
            "q2" => Real(w.q2),
            "q3" => Real(w.q3),
            "q4" => Real(w.q4),
            "q5" => Real(w.q5),
            "r1" => Real(w.r1),
            "r2" => Real(w.r2),
            "x_min" => Real(l.x.min),
            "x_max" => Real(l.x.max),
            "vx_min" => Real(l.vx.min),
            "vx_max" => Real(l.vx.max),
            "ax_min" => Real(l.ax.min),
            "ax_max" => Real(l.ax.max),
            "y_min" => Real(l.y.min),
            "y_max" => Real(l.y.max),
            "vy_min" => Real(l.vy.min),
            "vy_max" => Real(l.vy.max),
            "ay_min" => Real(l.ay.min),
            "ay_max" => Real(l.ay.max),
            "jx_min" => Real(l.jx.min),
            "jx_max" => Real(l.jx.max),
            "jy_min" => Real(l.jy.min),
            "jy_max" => Real(l.jy.max),
            "human_behavior_mode" => Flag(self.human_behavior_mode),
            "strict_indicators" => Flag(self.strict_indicators),
            "big_m" => Real(self.big_m),
            "epsilon" => Real(self.epsilon),
            _ => return None,
        })
    }

    fn set(&mut self, key: &str, value: Value) {
        let l = &mut self.limits;
        let w = &mut self.weights;
        match (key, value) {
            ("horizon_n", Value::Count(n)) => self.horizon_n = n,
            ("sim_steps", Value::Count(n)) => self.sim_steps = n,
            ("human_behavior_mode", Value::Flag(b)) => self.human_behavior_mode = b,
            ("strict_indicators", Value::Flag(b)) => self.strict_indicators = b,
            (key, Value::Real(v)) => {
                let slot = match key {
                    "dt" => &mut self.dt,
                    "road_width" => &mut self.road_width,
                    "lateral_margin" => &mut self.lateral_margin,
                    "x0" => &mut self.x0,
                    "y0" => &mut self.y0,
                    "vx0" => &mut self.vx0,
                    "vy0" => &mut self.vy0,
                    "ax0" => &mut self.ax0,
                    "ay0" => &mut self.ay0,
                    "theta0" => &mut self.theta0,
                    "v_ref" => &mut self.v_ref,
                    "y_ref" => &mut self.y_ref,
                    "bump_start" => &mut self.bump_start,
                    "bump_end" => &mut self.bump_end,
                    "v_max_bump" => &mut self.v_max_bump,
                    "v_turn" => &mut self.v_turn,
                    "wheelbase" => &mut self.wheelbase,
                    "theta_min" => &mut self.theta_min,
                    "theta_max" => &mut self.theta_max,
                    "omega_max" => &mut self.omega_max,
                    "q1" => &mut w.q1,
                    "q2" => &mut w.q2,
                    "q3" => &mut w.q3,
                    "q4" => &mut w.q4,
                    "q5" => &mut w.q5,
                    "r1" => &mut w.r1,
                    "r2" => &mut w.r2,
                    "x_min" => &mut l.x.min,
                    "x_max" => &mut l.x.max,
                    "vx_min" => &mut l.vx.min,
                    "vx_max" => &mut l.vx.max,
                    "ax_min" => &mut l.ax.min,
                    "ax_max" => &mut l.ax.max,
                    "y_min" => &mut l.y.min,
                    "y_max" => &mut l.y.max,
                    "vy_min" => &mut l.vy.min,
                    "vy_max" => &mut l.vy.max,
                    "ay_min" => &mut l.ay.min,
                    "ay_max" => &mut l.ay.max,
                    "jx_min" => &mut l.jx.min,
                    "jx_max" => &mut l.jx.max,
                    "jy_min" => &mut l.jy.min,
                    "jy_max" => &mut l.jy.max,
                    "big_m" => &mut self.big_m,
                    "epsilon" => &mut self.epsilon,
                    _ => unreachable!("unknown real key {key}"),
                };
                *slot = v;
            }
            (key, value) => unreachable!("type mismatch for {key}: {value:?}"),
        }
    }
}

impl Limits {
    pub fn named(&self) -> [(&'static str, Interval); 8] {
        [
            ("x", self.x),
            ("vx", self.vx),
            ("ax", self.ax),
            ("y", self.y),
            ("vy", self.vy),
            ("ay", self.ay),
            ("jx", self.jx),
            ("jy", self.jy),
        ]
    }
}

/// Limits used when a scenario file does not set them. The lateral box
/// defaults to the full road width.
pub fn default_limits(road_width: f64) -> Limits {
    Limits {
        x: Interval::new(-10.0, 10_000.0),
        vx: Interval::new(0.0, 20.0),
        ax: Interval::new(-3.0, 3.0),
        y: Interval::new(0.0, road_width),
        vy: Interval::new(-3.0, 3.0),
        ay: Interval::new(-4.0, 4.0),
        jx: Interval::new(-10.0, 10.0),
        jy: Interval::new(-10.0, 10.0),
    }
}

/// One violated scenario invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("line {line}: syntax error: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown key {key}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value {value:?} for key {key}")]
    InvalidValue {
        line: usize,
        key: String,
        value: String,
    },
    #[error("line {line}: duplicate key {key} (first set on line {first})")]
    DuplicateKey {
        line: usize,
        key: String,
        first: usize,
    },
    #[error("missing required key {0}")]
    MissingKey(String),
    #[error("invalid scenario: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Real,
    Count,
    Flag,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Value {
    Real(f64),
    Count(usize),
    Flag(bool),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Real(v) => write!(f, "{v:.16e}"),
            Value::Count(n) => write!(f, "{n}"),
            Value::Flag(b) => write!(f, "{b}"),
        }
    }
}

struct Key {
    name: &'static str,
    kind: Kind,
    required: bool,
}

const fn key(name: &'static str, kind: Kind, required: bool) -> Key {
    Key {
        name,
        kind,
        required,
    }
}

/// Every accepted key, in serialization order. Required keys are the
/// reference-table parameters; the rest fall back to defaults.
const KEYS: &[Key] = &[
    key("dt", Kind::Real, true),
    key("horizon_n", Kind::Count, false),
    key("sim_steps", Kind::Count, true),
    key("road_width", Kind::Real, true),
    key("lateral_margin", Kind::Real, false),
    key("x0", Kind::Real, true),
    key("y0", Kind::Real, true),
    key("vx0", Kind::Real, true),
    key("vy0", Kind::Real, true),
    key("ax0", Kind::Real, false),
    key("ay0", Kind::Real, false),
    key("theta0", Kind::Real, false),
    key("v_ref", Kind::Real, true),
    key("y_ref", Kind::Real, false),
    key("bump_start", Kind::Real, true),
    key("bump_end", Kind::Real, true),
    key("v_max_bump", Kind::Real, true),
    key("v_turn", Kind::Real, true),
    key("wheelbase", Kind::Real, true),
    key("theta_min", Kind::Real, false),
    key("theta_max", Kind::Real, false),
    key("omega_max", Kind::Real, false),
    key("q1", Kind::Real, true),
    key("q2", Kind::Real, true),
    key("q3", Kind::Real, true),
    key("q4", Kind::Real, true),
    key("q5", Kind::Real, true),
    key("r1", Kind::Real, true),
    key("r2", Kind::Real, true),
    key("x_min", Kind::Real, false),
    key("x_max", Kind::Real, false),
    key("vx_min", Kind::Real, false),
    key("vx_max", Kind::Real, false),
    key("ax_min", Kind::Real, false),
    key("ax_max", Kind::Real, false),
    key("y_min", Kind::Real, false),
    key("y_max", Kind::Real, false),
    key("vy_min", Kind::Real, false),
    key("vy_max", Kind::Real, false),
    key("ay_min", Kind::Real, false),
    key("ay_max", Kind::Real, false),
    key("jx_min", Kind::Real, false),
    key("jx_max", Kind::Real, false),
    key("jy_min", Kind::Real, false),
    key("jy_max", Kind::Real, false),
    key("human_behavior_mode", Kind::Flag, false),
    key("strict_indicators", Kind::Flag, false),
    key("big_m", Kind::Real, false),
    key("epsilon", Kind::Real, false),
];

fn lookup(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

fn parse_value(kind: Kind, raw: &str) -> Option<Value> {
    match kind {
        Kind::Real => raw.parse::<f64>().ok().map(Value::Real),
        Kind::Count => raw.parse::<usize>().ok().map(Value::Count),
        Kind::Flag => match raw {
            "true" => Some(Value::Flag(true)),
            "false" => Some(Value::Flag(false)),
            _ => None,
        },
    }
}

/// Parse a scenario file without checking the scenario invariants.
pub fn parse_unvalidated(text: &str) -> Result<Scenario, ScenarioError> {
    let mut seen: BTreeMap<&'static str, (usize, Value)> = BTreeMap::new();

    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        let content = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        }
        .trim();
        if content.is_empty() {
            continue;
        }
        let Some((k, v)) = content.split_once('=') else {
            return Err(ScenarioError::Syntax {
                line,
                message: format!("expected `key = value`, got {content:?}"),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(ScenarioError::Syntax {
                line,
                message: format!("malformed key {k:?}"),
            });
        }
        if v.is_empty() {
            return Err(ScenarioError::Syntax {
                line,
                message: format!("missing value for key {k}"),
            });
        }
        let spec = lookup(k).ok_or_else(|| ScenarioError::UnknownKey {
            line,
            key: k.to_string(),
        })?;
        if let Some(&(first, _)) = seen.get(spec.name) {
            return Err(ScenarioError::DuplicateKey {
                line,
                key: k.to_string(),
                first,
            });
        }
        let value = parse_value(spec.kind, v).ok_or_else(|| ScenarioError::InvalidValue {
            line,
            key: k.to_string(),
            value: v.to_string(),
        })?;
        seen.insert(spec.name, (line, value));
    }

    if let Some(missing) = KEYS.iter().find(|k| k.required && !seen.contains_key(k.name)) {
        return Err(ScenarioError::MissingKey(missing.name.to_string()));
    }

    let mut scenario = Scenario::reference();
    for (name, (_, value)) in &seen {
        scenario.set(name, *value);
    }
    // Defaults that depend on other keys.
    if !seen.contains_key("y_ref") {
        scenario.y_ref = scenario.y0;
    }
    if !seen.contains_key("y_max") {
        scenario.limits.y.max = scenario.road_width;
    }
    Ok(scenario)
}

/// Parse and validate a scenario file.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let scenario = parse_unvalidated(text)?;
    let violations = scenario.validate();
    if violations.is_empty() {
        Ok(scenario)
    } else {
        Err(ScenarioError::Invalid(violations))
    }
}
