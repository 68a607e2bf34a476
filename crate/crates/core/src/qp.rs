//! Convex QP relaxations with an independently checked KKT certificate.
//!
//! Problems have the form
//!
//! ```text
//!     minimize    ½ zᵀ H z + hᵀ z + offset
//!     subject to  G z ≤ g,   F z = f,   lb ≤ z ≤ ub
//! ```
//!
//! The interior-point iterations are delegated to `clarabel`. Everything a
//! caller relies on is computed here from the problem data alone: columns
//! with `lb == ub` are substituted out before the solve, rows that become
//! constant are screened directly, and a result is only reported optimal
//! after [`kkt_residuals`] confirms it on the full problem.

use clarabel::algebra::CscMatrix as ClarabelCsc;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use serde::Serialize;
use thiserror::Error;

use crate::sparse::{CscMatrix, TripletMatrix};

/// Bounds whose gap is below this are treated as a fixed column.
const FIX_TOL: f64 = 1e-10;
/// Bounds beyond this magnitude are treated as absent.
const INF_BOUND: f64 = 1e20;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    /// Symmetric positive semidefinite, both triangles stored.
    pub h_matrix: CscMatrix,
    pub h_vec: Vec<f64>,
    pub offset: f64,
    pub g_matrix: CscMatrix,
    pub g_vec: Vec<f64>,
    pub f_matrix: CscMatrix,
    pub f_vec: Vec<f64>,
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
}

impl QpProblem {
    pub fn n(&self) -> usize {
        self.h_vec.len()
    }

    /// `½ zᵀ H z + hᵀ z + offset`
    pub fn objective(&self, z: &[f64]) -> f64 {
        let hz = self.h_matrix.mul(z);
        let quad: f64 = z.iter().zip(&hz).map(|(a, b)| a * b).sum();
        let lin: f64 = z.iter().zip(&self.h_vec).map(|(a, b)| a * b).sum();
        0.5 * quad + lin + self.offset
    }

    /// Largest violation of any row or box at `z` under the given bounds.
    pub fn primal_violation(&self, z: &[f64], lb: &[f64], ub: &[f64]) -> f64 {
        let gz = self.g_matrix.mul(z);
        let fz = self.f_matrix.mul(z);
        let rows = gz
            .iter()
            .zip(&self.g_vec)
            .map(|(a, b)| (a - b).max(0.0))
            .chain(fz.iter().zip(&self.f_vec).map(|(a, b)| (a - b).abs()));
        let boxes = z
            .iter()
            .zip(lb.iter().zip(ub))
            .map(|(v, (l, u))| (l - v).max(v - u).max(0.0));
        rows.chain(boxes).fold(0.0, f64::max)
    }

    fn check(&self) -> Result<(), QpError> {
        let n = self.n();
        let dims = [
            ("h_matrix rows", self.h_matrix.nrows),
            ("h_matrix cols", self.h_matrix.ncols),
            ("g_matrix cols", self.g_matrix.ncols),
            ("f_matrix cols", self.f_matrix.ncols),
            ("lb", self.lb.len()),
            ("ub", self.ub.len()),
        ];
        for (what, len) in dims {
            if len != n {
                return Err(QpError::DimensionMismatch(format!(
                    "{what} is {len}, expected {n}"
                )));
            }
        }
        if self.g_matrix.nrows != self.g_vec.len() {
            return Err(QpError::DimensionMismatch(format!(
                "g_matrix has {} rows but g_vec has {}",
                self.g_matrix.nrows,
                self.g_vec.len()
            )));
        }
        if self.f_matrix.nrows != self.f_vec.len() {
            return Err(QpError::DimensionMismatch(format!(
                "f_matrix has {} rows but f_vec has {}",
                self.f_matrix.nrows,
                self.f_vec.len()
            )));
        }
        let asym = self.h_matrix.max_asymmetry();
        if asym > 1e-12 {
            return Err(QpError::NotConvex(format!("H asymmetric by {asym:e}")));
        }
        let diag: Vec<f64> = (0..n).map(|j| self.h_matrix.get(j, j)).collect();
        for j in 0..n {
            if diag[j] < 0.0 {
                return Err(QpError::NotConvex(format!("H[{j},{j}] = {} < 0", diag[j])));
            }
            for (i, v) in self.h_matrix.col(j) {
                if i != j && v * v > diag[i] * diag[j] * (1.0 + 1e-12) {
                    return Err(QpError::NotConvex(format!(
                        "2x2 minor ({i},{j}) is negative"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub kkt_tol: f64,
    pub max_iter: u32,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            kkt_tol: 1e-6,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
}

/// Infinity-norm KKT residuals.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity)
    }

    /// Componentwise maximum.
    pub fn worst(&self, other: &KktResiduals) -> KktResiduals {
        KktResiduals {
            stationarity: self.stationarity.max(other.stationarity),
            primal: self.primal.max(other.primal),
            complementarity: self.complementarity.max(other.complementarity),
        }
    }
}

/// Why a problem was declared infeasible.
#[derive(Debug, Clone, PartialEq)]
pub enum InfeasibilityEvidence {
    /// A column with `lb > ub`.
    CrossedBounds { column: usize, lower: f64, upper: f64 },
    /// A row left with no free columns after fixing, violated by `violation`.
    ConstantRow { row: RowRef, violation: f64 },
    /// Multipliers `y` with `Fᵀν + Gᵀλ + w_u − w_l ≈ 0`, `λ, w ≥ 0` and
    /// `fᵀν + gᵀλ + ubᵀw_u − lbᵀw_l < 0`. Scaled so the largest entry is 1.
    Farkas {
        eq: Vec<f64>,
        ineq: Vec<f64>,
        lower: Vec<f64>,
        upper: Vec<f64>,
        /// `‖Fᵀν + Gᵀλ + w_u − w_l‖∞`
        ray_residual: f64,
        /// `fᵀν + gᵀλ + ubᵀw_u − lbᵀw_l`
        rhs: f64,
    },
}

impl InfeasibilityEvidence {
    /// Scalar summary suitable for logging: the violation, or the negated
    /// Farkas right-hand side.
    pub fn measure(&self) -> f64 {
        match self {
            InfeasibilityEvidence::CrossedBounds { lower, upper, .. } => lower - upper,
            InfeasibilityEvidence::ConstantRow { violation, .. } => *violation,
            InfeasibilityEvidence::Farkas { rhs, .. } => -rhs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowRef {
    Equality(usize),
    Inequality(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub status: QpStatus,
    pub primal: Vec<f64>,
    /// Multipliers of `G z ≤ g`, nonnegative.
    pub ineq_duals: Vec<f64>,
    /// Multipliers of `F z = f`.
    pub eq_duals: Vec<f64>,
    /// Multipliers of `z ≥ lb`, nonnegative.
    pub lower_duals: Vec<f64>,
    /// Multipliers of `z ≤ ub`, nonnegative.
    pub upper_duals: Vec<f64>,
    pub objective: f64,
    pub iterations: u32,
    pub kkt: KktResiduals,
    pub infeasibility: Option<InfeasibilityEvidence>,
}

impl QpSolution {
    fn empty(problem: &QpProblem, status: QpStatus) -> Self {
        QpSolution {
            status,
            primal: vec![0.0; problem.n()],
            ineq_duals: vec![0.0; problem.g_vec.len()],
            eq_duals: vec![0.0; problem.f_vec.len()],
            lower_duals: vec![0.0; problem.n()],
            upper_duals: vec![0.0; problem.n()],
            objective: f64::NAN,
            iterations: 0,
            kkt: KktResiduals::default(),
            infeasibility: None,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("objective is not convex: {0}")]
    NotConvex(String),
    #[error("backend rejected the problem: {0}")]
    Backend(String),
}

/// KKT residuals of `solution` against `problem` with its own bounds.
pub fn kkt_residuals(problem: &QpProblem, solution: &QpSolution) -> KktResiduals {
    kkt_residuals_with_bounds(problem, &problem.lb, &problem.ub, solution)
}

/// KKT residuals under overriding column bounds.
///
/// Stationarity is `‖Hz + h + Gᵀλ + Fᵀν + w_u − w_l‖∞`, primal is the
/// largest row or box violation, complementarity the largest product of a
/// multiplier with its slack. Negative inequality or bound multipliers count
/// as stationarity error.
pub fn kkt_residuals_with_bounds(
    problem: &QpProblem,
    lb: &[f64],
    ub: &[f64],
    solution: &QpSolution,
) -> KktResiduals {
    let z = &solution.primal;
    let mut grad = problem.h_matrix.mul(z);
    for (g, h) in grad.iter_mut().zip(&problem.h_vec) {
        *g += h;
    }
    problem.g_matrix.tr_mul_add(&solution.ineq_duals, &mut grad);
    problem.f_matrix.tr_mul_add(&solution.eq_duals, &mut grad);
    for ((g, up), lo) in grad.iter_mut().zip(&solution.upper_duals).zip(&solution.lower_duals) {
        *g += up - lo;
    }
    let sign_violation = solution
        .ineq_duals
        .iter()
        .chain(&solution.lower_duals)
        .chain(&solution.upper_duals)
        .map(|&d| (-d).max(0.0))
        .fold(0.0, f64::max);
    let stationarity = grad.iter().map(|g| g.abs()).fold(sign_violation, f64::max);

    let primal = problem.primal_violation(z, lb, ub);

    let gz = problem.g_matrix.mul(z);
    let mut complementarity: f64 = 0.0;
    for (i, &lam) in solution.ineq_duals.iter().enumerate() {
        complementarity = complementarity.max((lam * (problem.g_vec[i] - gz[i])).abs());
    }
    for j in 0..z.len() {
        if solution.lower_duals[j] != 0.0 {
            complementarity = complementarity.max((solution.lower_duals[j] * (z[j] - lb[j])).abs());
        }
        if solution.upper_duals[j] != 0.0 {
            complementarity = complementarity.max((solution.upper_duals[j] * (ub[j] - z[j])).abs());
        }
    }

    KktResiduals {
        stationarity,
        primal,
        complementarity,
    }
}

/// Solve with the problem's own bounds.
pub fn solve_qp(problem: &QpProblem, settings: &QpSettings) -> Result<QpSolution, QpError> {
    solve_qp_with_bounds(problem, &problem.lb, &problem.ub, settings)
}

/// Solve with column bounds `lb`/`ub` replacing the problem's own.
pub fn solve_qp_with_bounds(
    problem: &QpProblem,
    lb: &[f64],
    ub: &[f64],
    settings: &QpSettings,
) -> Result<QpSolution, QpError> {
    problem.check()?;
    let n = problem.n();
    if lb.len() != n || ub.len() != n {
        return Err(QpError::DimensionMismatch(format!(
            "bound overrides have lengths {}/{}, expected {n}",
            lb.len(),
            ub.len()
        )));
    }

    for j in 0..n {
        if lb[j] > ub[j] + FIX_TOL {
            let mut sol = QpSolution::empty(problem, QpStatus::Infeasible);
            sol.infeasibility = Some(InfeasibilityEvidence::CrossedBounds {
                column: j,
                lower: lb[j],
                upper: ub[j],
            });
            return Ok(sol);
        }
    }

    let reduced = Reduction::new(problem, lb, ub);
    if let Some(evidence) = reduced.constant_row_violation(settings.kkt_tol) {
        let mut sol = QpSolution::empty(problem, QpStatus::Infeasible);
        sol.infeasibility = Some(evidence);
        return Ok(sol);
    }

    let mut last = None;
    // A second pass with tighter backend tolerances recovers the rare case
    // where the first answer misses the certificate threshold.
    for tol in [1e-9, 1e-11] {
        let sol = reduced.solve(problem, lb, ub, settings, tol)?;
        match sol.status {
            QpStatus::Optimal | QpStatus::Infeasible | QpStatus::Unbounded => return Ok(sol),
            QpStatus::IterationLimit => last = Some(sol),
        }
    }
    Ok(last.expect("at least one pass"))
}

/// Problem data after substituting fixed columns.
struct Reduction {
    n: usize,
    /// Full index of each free column.
    free: Vec<usize>,
    /// Free index of each full column.
    position: Vec<Option<usize>>,
    /// Value of every column; free entries are placeholders until solved.
    base: Vec<f64>,
    /// Rows of F that still touch a free column, and their shifted rhs.
    eq_rows: Vec<usize>,
    eq_rhs: Vec<f64>,
    ineq_rows: Vec<usize>,
    ineq_rhs: Vec<f64>,
    /// Constant rows: (row, residual) where residual is `row·z − rhs`.
    const_eq: Vec<(usize, f64)>,
    const_ineq: Vec<(usize, f64)>,
}

impl Reduction {
    fn new(problem: &QpProblem, lb: &[f64], ub: &[f64]) -> Self {
        let n = problem.n();
        let mut free = Vec::new();
        let mut position = vec![None; n];
        let mut base = vec![0.0; n];
        for j in 0..n {
            if ub[j] - lb[j] <= FIX_TOL {
                base[j] = 0.5 * (lb[j] + ub[j]);
            } else {
                position[j] = Some(free.len());
                free.push(j);
            }
        }

        let split = |m: &CscMatrix, rhs: &[f64]| {
            let mut shifted = rhs.to_vec();
            let mut touches_free = vec![false; m.nrows];
            for j in 0..n {
                for (i, v) in m.col(j) {
                    if position[j].is_some() {
                        touches_free[i] = true;
                    } else {
                        shifted[i] -= v * base[j];
                    }
                }
            }
            let mut rows = Vec::new();
            let mut rows_rhs = Vec::new();
            let mut constant = Vec::new();
            for i in 0..m.nrows {
                if touches_free[i] {
                    rows.push(i);
                    rows_rhs.push(shifted[i]);
                } else {
                    constant.push((i, -shifted[i]));
                }
            }
            (rows, rows_rhs, constant)
        };
        let (eq_rows, eq_rhs, const_eq) = split(&problem.f_matrix, &problem.f_vec);
        let (ineq_rows, ineq_rhs, const_ineq) = split(&problem.g_matrix, &problem.g_vec);

        Reduction {
            n,
            free,
            position,
            base,
            eq_rows,
            eq_rhs,
            ineq_rows,
            ineq_rhs,
            const_eq,
            const_ineq,
        }
    }

    fn constant_row_violation(&self, tol: f64) -> Option<InfeasibilityEvidence> {
        let eq = self
            .const_eq
            .iter()
            .map(|&(i, r)| (RowRef::Equality(i), r.abs()));
        let ineq = self
            .const_ineq
            .iter()
            .map(|&(i, r)| (RowRef::Inequality(i), r.max(0.0)));
        eq.chain(ineq)
            .filter(|&(_, v)| v > tol)
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(row, violation)| InfeasibilityEvidence::ConstantRow { row, violation })
    }

    fn solve(
        &self,
        problem: &QpProblem,
        lb: &[f64],
        ub: &[f64],
        settings: &QpSettings,
        backend_tol: f64,
    ) -> Result<QpSolution, QpError> {
        let nf = self.free.len();
        let mut sol = QpSolution::empty(problem, QpStatus::IterationLimit);

        if nf == 0 {
            sol.primal = self.base.clone();
            finish_duals(problem, &mut sol, &self.position);
            sol.objective = problem.objective(&sol.primal);
            sol.kkt = kkt_residuals_with_bounds(problem, lb, ub, &sol);
            sol.status = if sol.kkt.max() <= settings.kkt_tol {
                QpStatus::Optimal
            } else {
                QpStatus::IterationLimit
            };
            return Ok(sol);
        }

        // P: upper triangle of H on free columns; q: h shifted by fixed columns.
        let mut p = TripletMatrix::new(nf, nf);
        let mut q: Vec<f64> = self.free.iter().map(|&j| problem.h_vec[j]).collect();
        for j in 0..self.n {
            for (i, v) in problem.h_matrix.col(j) {
                match (self.position[i], self.position[j]) {
                    (Some(fi), Some(fj)) if fi <= fj => p.push(fi, fj, v),
                    (Some(fi), None) => q[fi] += v * self.base[j],
                    _ => {}
                }
            }
        }

        // A rows: equalities, inequalities, upper boxes, lower boxes.
        let n_eq = self.eq_rows.len();
        let n_ineq = self.ineq_rows.len();
        let upper_cols: Vec<usize> = self.free.iter().copied().filter(|&j| ub[j] < INF_BOUND).collect();
        let lower_cols: Vec<usize> = self.free.iter().copied().filter(|&j| lb[j] > -INF_BOUND).collect();
        let m = n_eq + n_ineq + upper_cols.len() + lower_cols.len();

        let mut eq_slot = vec![usize::MAX; problem.f_vec.len()];
        for (k, &i) in self.eq_rows.iter().enumerate() {
            eq_slot[i] = k;
        }
        let mut ineq_slot = vec![usize::MAX; problem.g_vec.len()];
        for (k, &i) in self.ineq_rows.iter().enumerate() {
            ineq_slot[i] = n_eq + k;
        }

        let mut a = TripletMatrix::new(m, nf);
        for (fj, &j) in self.free.iter().enumerate() {
            for (i, v) in problem.f_matrix.col(j) {
                a.push(eq_slot[i], fj, v);
            }
            for (i, v) in problem.g_matrix.col(j) {
                a.push(ineq_slot[i], fj, v);
            }
        }
        let mut b = Vec::with_capacity(m);
        b.extend_from_slice(&self.eq_rhs);
        b.extend_from_slice(&self.ineq_rhs);
        let row0 = n_eq + n_ineq;
        for (k, &j) in upper_cols.iter().enumerate() {
            a.push(row0 + k, self.position[j].unwrap(), 1.0);
            b.push(ub[j]);
        }
        let row1 = row0 + upper_cols.len();
        for (k, &j) in lower_cols.iter().enumerate() {
            a.push(row1 + k, self.position[j].unwrap(), -1.0);
            b.push(-lb[j]);
        }

        let mut cones = Vec::new();
        if n_eq > 0 {
            cones.push(SupportedConeT::ZeroConeT(n_eq));
        }
        if m > n_eq {
            cones.push(SupportedConeT::NonnegativeConeT(m - n_eq));
        }

        let backend_settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .max_iter(settings.max_iter)
            .tol_gap_abs(backend_tol)
            .tol_gap_rel(backend_tol)
            .tol_feas(backend_tol)
            .tol_infeas_abs(backend_tol)
            .tol_infeas_rel(backend_tol)
            .presolve_enable(false)
            .build()
            .map_err(|e| QpError::Backend(e.to_string()))?;

        let p = to_clarabel(&p.to_csc());
        let a = to_clarabel(&a.to_csc());
        let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, backend_settings)
            .map_err(|e| QpError::Backend(e.to_string()))?;
        solver.solve();
        let out = &solver.solution;
        sol.iterations = out.iterations;

        match out.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => {
                let mut z = self.base.clone();
                for (fj, &j) in self.free.iter().enumerate() {
                    z[j] = out.x[fj];
                }
                sol.primal = z;
                for (k, &i) in self.eq_rows.iter().enumerate() {
                    sol.eq_duals[i] = out.z[k];
                }
                for (k, &i) in self.ineq_rows.iter().enumerate() {
                    sol.ineq_duals[i] = out.z[n_eq + k].max(0.0);
                }
                for (k, &j) in upper_cols.iter().enumerate() {
                    sol.upper_duals[j] = out.z[row0 + k].max(0.0);
                }
                for (k, &j) in lower_cols.iter().enumerate() {
                    sol.lower_duals[j] = out.z[row1 + k].max(0.0);
                }
                finish_duals(problem, &mut sol, &self.position);
                sol.objective = problem.objective(&sol.primal);
                sol.kkt = kkt_residuals_with_bounds(problem, lb, ub, &sol);
                sol.status = if sol.kkt.max() <= settings.kkt_tol {
                    QpStatus::Optimal
                } else {
                    QpStatus::IterationLimit
                };
            }
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                let mut eq = vec![0.0; problem.f_vec.len()];
                let mut ineq = vec![0.0; problem.g_vec.len()];
                let mut lower = vec![0.0; self.n];
                let mut upper = vec![0.0; self.n];
                for (k, &i) in self.eq_rows.iter().enumerate() {
                    eq[i] = out.z[k];
                }
                for (k, &i) in self.ineq_rows.iter().enumerate() {
                    ineq[i] = out.z[n_eq + k].max(0.0);
                }
                for (k, &j) in upper_cols.iter().enumerate() {
                    upper[j] = out.z[row0 + k].max(0.0);
                }
                for (k, &j) in lower_cols.iter().enumerate() {
                    lower[j] = out.z[row1 + k].max(0.0);
                }
                let evidence = farkas_evidence(problem, lb, ub, eq, ineq, lower, upper, &self.position);
                if let InfeasibilityEvidence::Farkas { ray_residual, rhs, .. } = &evidence {
                    // accept only a certificate that checks out on the full problem
                    if *rhs < 0.0 && *ray_residual <= 1e-6 * (1.0 + rhs.abs()) {
                        sol.status = QpStatus::Infeasible;
                    }
                }
                sol.infeasibility = Some(evidence);
            }
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
                sol.status = QpStatus::Unbounded;
            }
            _ => {}
        }
        Ok(sol)
    }
}

/// Multipliers for fixed columns absorb whatever stationarity is left.
fn finish_duals(
    problem: &QpProblem,
    sol: &mut QpSolution,
    position: &[Option<usize>],
) {
    let mut grad = problem.h_matrix.mul(&sol.primal);
    for (g, h) in grad.iter_mut().zip(&problem.h_vec) {
        *g += h;
    }
    problem.g_matrix.tr_mul_add(&sol.ineq_duals, &mut grad);
    problem.f_matrix.tr_mul_add(&sol.eq_duals, &mut grad);
    for (j, pos) in position.iter().enumerate() {
        if pos.is_none() {
            if grad[j] > 0.0 {
                sol.lower_duals[j] = grad[j];
            } else {
                sol.upper_duals[j] = -grad[j];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn farkas_evidence(
    problem: &QpProblem,
    lb: &[f64],
    ub: &[f64],
    eq: Vec<f64>,
    ineq: Vec<f64>,
    mut lower: Vec<f64>,
    mut upper: Vec<f64>,
    position: &[Option<usize>],
) -> InfeasibilityEvidence {
    let n = problem.n();
    let mut ray = vec![0.0; n];
    problem.f_matrix.tr_mul_add(&eq, &mut ray);
    problem.g_matrix.tr_mul_add(&ineq, &mut ray);
    // fixed columns: box multipliers cancel the ray exactly
    for j in 0..n {
        if position[j].is_none() {
            if ray[j] > 0.0 {
                lower[j] = ray[j];
            } else {
                upper[j] = -ray[j];
            }
        }
    }
    let scale = eq
        .iter()
        .chain(&ineq)
        .chain(&lower)
        .chain(&upper)
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    let scale = if scale > 0.0 { 1.0 / scale } else { 1.0 };
    let eq: Vec<f64> = eq.iter().map(|v| v * scale).collect();
    let ineq: Vec<f64> = ineq.iter().map(|v| v * scale).collect();
    let lower: Vec<f64> = lower.iter().map(|v| v * scale).collect();
    let upper: Vec<f64> = upper.iter().map(|v| v * scale).collect();

    let mut ray = vec![0.0; n];
    problem.f_matrix.tr_mul_add(&eq, &mut ray);
    problem.g_matrix.tr_mul_add(&ineq, &mut ray);
    let mut rhs = 0.0;
    for j in 0..n {
        ray[j] += upper[j] - lower[j];
        if upper[j] != 0.0 {
            rhs += upper[j] * ub[j];
        }
        if lower[j] != 0.0 {
            rhs -= lower[j] * lb[j];
        }
    }
    rhs += eq.iter().zip(&problem.f_vec).map(|(a, b)| a * b).sum::<f64>();
    rhs += ineq.iter().zip(&problem.g_vec).map(|(a, b)| a * b).sum::<f64>();
    let ray_residual = ray.iter().map(|v| v.abs()).fold(0.0, f64::max);
    InfeasibilityEvidence::Farkas {
        eq,
        ineq,
        lower,
        upper,
        ray_residual,
        rhs,
    }
}

fn to_clarabel(m: &CscMatrix) -> ClarabelCsc<f64> {
    ClarabelCsc::new(
        m.nrows,
        m.ncols,
        m.colptr.clone(),
        m.rowval.clone(),
        m.nzval.clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_dim(upper: f64) -> QpProblem {
        // (v − 10)² = ½·2v² − 20v + 100
        QpProblem {
            h_matrix: CscMatrix::from_dense(&[&[2.0]]),
            h_vec: vec![-20.0],
            offset: 100.0,
            g_matrix: CscMatrix::from_dense(&[&[1.0]]),
            g_vec: vec![upper],
            f_matrix: CscMatrix::zeros(0, 1),
            f_vec: vec![],
            lb: vec![-100.0],
            ub: vec![100.0],
        }
    }

    #[test]
    fn clamped_quadratic() {
        let p = one_dim(5.0);
        let s = solve_qp(&p, &QpSettings::default()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.primal[0] - 5.0).abs() < 1e-6);
        assert!((s.objective - 25.0).abs() < 1e-5);
        assert!((s.ineq_duals[0] - 10.0).abs() < 1e-5);
        assert!(s.kkt.max() <= 1e-6);
    }

    #[test]
    fn hand_built_kkt_point() {
        let p = one_dim(5.0);
        let mut s = QpSolution::empty(&p, QpStatus::Optimal);
        s.primal = vec![5.0];
        s.ineq_duals = vec![10.0];
        let r = kkt_residuals(&p, &s);
        assert_eq!(r, KktResiduals::default());

        s.primal = vec![5.1];
        let r = kkt_residuals(&p, &s);
        assert!((r.primal - 0.1).abs() < 1e-12);

        // interior optimum of the unclamped problem with zero duals
        let p = one_dim(50.0);
        s.primal = vec![10.0];
        s.ineq_duals = vec![0.0];
        let r = kkt_residuals(&p, &s);
        assert_eq!(r.stationarity, 0.0);
    }

    #[test]
    fn contradictory_bounds_are_infeasible() {
        let mut p = one_dim(50.0);
        p.lb = vec![6.0];
        p.ub = vec![5.0];
        let s = solve_qp(&p, &QpSettings::default()).unwrap();
        assert_eq!(s.status, QpStatus::Infeasible);
        assert!(matches!(
            s.infeasibility,
            Some(InfeasibilityEvidence::CrossedBounds { column: 0, .. })
        ));

        // same contradiction as a row against a box
        let mut p = one_dim(5.0);
        p.lb = vec![6.0];
        let s = solve_qp(&p, &QpSettings::default()).unwrap();
        assert_eq!(s.status, QpStatus::Infeasible);
        let ev = s.infeasibility.unwrap();
        assert!(ev.measure() > 0.0);
    }

    #[test]
    fn fixed_columns_and_constant_rows() {
        // min (a-1)² + (b-2)² s.t. a + b ≤ 2, a fixed at 1.5
        let p = QpProblem {
            h_matrix: CscMatrix::from_dense(&[&[2.0, 0.0], &[0.0, 2.0]]),
            h_vec: vec![-2.0, -4.0],
            offset: 5.0,
            g_matrix: CscMatrix::from_dense(&[&[1.0, 1.0], &[1.0, 0.0]]),
            g_vec: vec![2.0, 1.4],
            f_matrix: CscMatrix::zeros(0, 2),
            f_vec: vec![],
            lb: vec![0.0, 0.0],
            ub: vec![3.0, 3.0],
        };
        // a = 1.5 violates a ≤ 1.4, a pure row once a is fixed
        let s = solve_qp_with_bounds(&p, &[1.5, 0.0], &[1.5, 3.0], &QpSettings::default()).unwrap();
        assert_eq!(s.status, QpStatus::Infeasible);
        assert!(matches!(
            s.infeasibility,
            Some(InfeasibilityEvidence::ConstantRow { row: RowRef::Inequality(1), .. })
        ));

        let s = solve_qp_with_bounds(&p, &[1.0, 0.0], &[1.0, 3.0], &QpSettings::default()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.primal[1] - 1.0).abs() < 1e-6);
        let r = kkt_residuals_with_bounds(&p, &[1.0, 0.0], &[1.0, 3.0], &s);
        assert!(r.max() <= 1e-6, "{r:?}");
    }

    #[test]
    fn farkas_certificate_is_checked() {
        // x + y = 3 with 0 ≤ x, y ≤ 1
        let p = QpProblem {
            h_matrix: CscMatrix::from_dense(&[&[1.0, 0.0], &[0.0, 1.0]]),
            h_vec: vec![0.0, 0.0],
            offset: 0.0,
            g_matrix: CscMatrix::zeros(0, 2),
            g_vec: vec![],
            f_matrix: CscMatrix::from_dense(&[&[1.0, 1.0]]),
            f_vec: vec![3.0],
            lb: vec![0.0, 0.0],
            ub: vec![1.0, 1.0],
        };
        let s = solve_qp(&p, &QpSettings::default()).unwrap();
        assert_eq!(s.status, QpStatus::Infeasible);
        match s.infeasibility.unwrap() {
            InfeasibilityEvidence::Farkas { rhs, ray_residual, .. } => {
                assert!(rhs < 0.0);
                assert!(ray_residual < 1e-6);
            }
            other => panic!("expected Farkas certificate, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_input() {
        let mut p = one_dim(5.0);
        p.lb = vec![0.0, 0.0];
        assert!(matches!(solve_qp(&p, &QpSettings::default()), Err(QpError::DimensionMismatch(_))));

        let mut p = one_dim(5.0);
        p.h_matrix = CscMatrix::from_dense(&[&[-1.0]]);
        assert!(matches!(solve_qp(&p, &QpSettings::default()), Err(QpError::NotConvex(_))));

        let mut p = one_dim(5.0);
        p.h_matrix = CscMatrix::from_dense(&[&[1.0, 0.5], &[0.0, 1.0]]);
        p.h_vec = vec![0.0, 0.0];
        p.g_matrix = CscMatrix::zeros(0, 2);
        p.g_vec = vec![];
        p.f_matrix = CscMatrix::zeros(0, 2);
        p.lb = vec![0.0; 2];
        p.ub = vec![1.0; 2];
        assert!(matches!(solve_qp(&p, &QpSettings::default()), Err(QpError::NotConvex(_))));
    }

    #[test]
    fn deterministic() {
        let p = one_dim(5.0);
        let a = solve_qp(&p, &QpSettings::default()).unwrap();
        let b = solve_qp(&p, &QpSettings::default()).unwrap();
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
        assert_eq!(a.iterations, b.iterations);
        assert_eq!(a.primal, b.primal);
    }

    fn random_problem(seed: &[f64]) -> QpProblem {
        // 3 variables, diagonal H, two coupling rows
        let d = [seed[0] + 0.1, seed[1] + 0.1, 0.0];
        QpProblem {
            h_matrix: CscMatrix::from_dense(&[&[d[0], 0.0, 0.0], &[0.0, d[1], 0.0], &[0.0, 0.0, d[2]]]),
            h_vec: vec![seed[2] * 4.0 - 2.0, seed[3] * 4.0 - 2.0, seed[4] - 0.5],
            offset: 0.0,
            g_matrix: CscMatrix::from_dense(&[&[1.0, 1.0, 1.0], &[-1.0, 2.0, 0.0]]),
            g_vec: vec![1.0 + seed[5], 1.0],
            f_matrix: CscMatrix::zeros(0, 3),
            f_vec: vec![],
            lb: vec![-2.0; 3],
            ub: vec![2.0; 3],
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn tightening_never_lowers_objective(
            seed in proptest::collection::vec(0.0f64..1.0, 6),
            shrink in proptest::collection::vec(0.0f64..1.0, 6),
        ) {
            let p = random_problem(&seed);
            let settings = QpSettings::default();
            let outer = solve_qp(&p, &settings).unwrap();
            prop_assert_eq!(outer.status, QpStatus::Optimal);
            prop_assert!(kkt_residuals(&p, &outer).max() <= 1e-6);

            let lb: Vec<f64> = (0..3).map(|j| -2.0 + 1.9 * shrink[j]).collect();
            let ub: Vec<f64> = (0..3).map(|j| 2.0 - 1.9 * shrink[3 + j]).collect();
            let inner = solve_qp_with_bounds(&p, &lb, &ub, &settings).unwrap();
            if inner.status == QpStatus::Optimal {
                prop_assert!(inner.objective >= outer.objective - 1e-6);
                prop_assert!(kkt_residuals_with_bounds(&p, &lb, &ub, &inner).max() <= 1e-6);
            } else {
                prop_assert_eq!(inner.status, QpStatus::Infeasible);
            }
        }
    }
}
