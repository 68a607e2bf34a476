//! Branch-and-bound over the binary columns of an [`MiqpProblem`], plus an
//! exhaustive enumeration oracle for small instances.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::miqp::MiqpProblem;
use crate::qp::{
    kkt_residuals_with_bounds, solve_qp_with_bounds, KktResiduals, QpError, QpSettings,
    QpSolution, QpStatus,
};

/// Largest integer set the oracle accepts.
pub const ORACLE_CAP: usize = 20;

/// Binary groups larger than this are never completed by enumeration.
const COMPLETION_CAP: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Branching {
    #[default]
    MostFractional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchOrder {
    #[default]
    BestFirst,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnbConfig {
    pub int_tol: f64,
    pub gap_abs: f64,
    pub gap_rel: f64,
    pub node_limit: usize,
    pub branching: Branching,
    pub search: SearchOrder,
    /// Primal guess; its binaries are rounded and fixed to seed the incumbent.
    pub warm_start: Option<Vec<f64>>,
    pub qp: QpSettings,
    /// Collect a per-node trace.
    pub trace: bool,
}

impl Default for BnbConfig {
    fn default() -> Self {
        BnbConfig {
            int_tol: 1e-6,
            gap_abs: 1e-6,
            gap_rel: 1e-8,
            node_limit: 100_000,
            branching: Branching::MostFractional,
            search: SearchOrder::BestFirst,
            warm_start: None,
            qp: QpSettings::default(),
            trace: false,
        }
    }
}

impl BnbConfig {
    pub fn validate(&self) -> Result<(), BnbError> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.int_tol) || !positive(self.gap_abs) || !positive(self.gap_rel) {
            return Err(BnbError::InvalidConfig(
                "tolerances must be positive and finite".into(),
            ));
        }
        if self.node_limit == 0 {
            return Err(BnbError::InvalidConfig("node_limit must be at least 1".into()));
        }
        Ok(())
    }

    fn prune_margin(&self, incumbent: f64) -> f64 {
        self.gap_abs.max(self.gap_rel * incumbent.abs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MiqpStatus {
    Optimal,
    Infeasible,
    NodeLimit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IncumbentRecord {
    /// Nodes explored when the incumbent was found; 0 for the warm start.
    pub node: usize,
    pub objective: f64,
    pub best_bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiqpSolution {
    pub status: MiqpStatus,
    pub primal: Option<Vec<f64>>,
    /// Incumbent objective; `+∞` without one.
    pub objective: f64,
    pub nodes_explored: usize,
    pub incumbent_history: Vec<IncumbentRecord>,
    pub best_bound: f64,
    /// Relaxation objective at the root; `+∞` if the root is infeasible.
    pub root_bound: f64,
    pub solve_time: f64,
    /// QP subproblems solved, including the warm-start repair.
    pub qp_solves: usize,
    /// QP subproblems that returned a certified optimum.
    pub certified_qps: usize,
    /// Componentwise worst recomputed KKT residuals over certified QPs.
    pub worst_kkt: KktResiduals,
    pub trace: Vec<String>,
}

impl MiqpSolution {
    fn new() -> Self {
        MiqpSolution {
            status: MiqpStatus::Infeasible,
            primal: None,
            objective: f64::INFINITY,
            nodes_explored: 0,
            incumbent_history: Vec::new(),
            best_bound: f64::INFINITY,
            root_bound: f64::INFINITY,
            solve_time: 0.0,
            qp_solves: 0,
            certified_qps: 0,
            worst_kkt: KktResiduals::default(),
            trace: Vec::new(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum BnbError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("QP subproblem at node {node} failed: {source}")]
    Qp {
        node: usize,
        #[source]
        source: QpError,
    },
    #[error("QP subproblem at node {node} ended with status {status:?} (KKT residual {residual:e})")]
    Uncertified {
        node: usize,
        status: QpStatus,
        residual: f64,
    },
    #[error("oracle supports at most {cap} binaries, problem has {binaries}")]
    CapExceeded { binaries: usize, cap: usize },
}

/// Per-solve bookkeeping shared by the tree search and the oracle.
struct Evaluator<'a> {
    problem: &'a MiqpProblem,
    settings: QpSettings,
    out: MiqpSolution,
}

impl<'a> Evaluator<'a> {
    /// Solve the relaxation under `lb`/`ub`. `Ok(None)` means infeasible.
    fn solve(&mut self, node: usize, lb: &[f64], ub: &[f64]) -> Result<Option<QpSolution>, BnbError> {
        let qp = &self.problem.relaxation;
        let sol = solve_qp_with_bounds(qp, lb, ub, &self.settings)
            .map_err(|source| BnbError::Qp { node, source })?;
        self.out.qp_solves += 1;
        match sol.status {
            QpStatus::Infeasible => Ok(None),
            QpStatus::Optimal => {
                let kkt = kkt_residuals_with_bounds(qp, lb, ub, &sol);
                if kkt.max() > self.settings.kkt_tol {
                    return Err(BnbError::Uncertified {
                        node,
                        status: sol.status,
                        residual: kkt.max(),
                    });
                }
                self.out.certified_qps += 1;
                self.out.worst_kkt = self.out.worst_kkt.worst(&kkt);
                Ok(Some(sol))
            }
            status => Err(BnbError::Uncertified {
                node,
                status,
                residual: sol.kkt.max(),
            }),
        }
    }
}

/// A constraint row as seen by the completion step.
struct LinkedRow {
    equality: bool,
    rhs: f64,
    binaries: Vec<(usize, f64)>,
    continuous: Vec<(usize, f64)>,
}

/// Binaries grouped by the rows they share, for completing a relaxed point.
///
/// With the continuous part of a relaxation solution held fixed, every group
/// is searched for a 0/1 assignment that satisfies all of its rows. When all
/// groups succeed, the completed point is integral and feasible.
struct Completion {
    groups: Vec<Vec<usize>>,
    group_rows: Vec<Vec<LinkedRow>>,
}

impl Completion {
    fn new(problem: &MiqpProblem) -> Self {
        let qp = &problem.relaxation;
        let n = qp.n();
        let mut is_int = vec![false; n];
        for &c in &problem.integer_set {
            is_int[c] = true;
        }
        let mut rows = Vec::new();
        for (m, rhs, equality) in [(&qp.g_matrix, &qp.g_vec, false), (&qp.f_matrix, &qp.f_vec, true)] {
            let mt = m.transpose();
            for (i, &r) in rhs.iter().enumerate() {
                let (binaries, continuous): (Vec<_>, Vec<_>) = mt.col(i).partition(|&(j, _)| is_int[j]);
                if !binaries.is_empty() {
                    rows.push(LinkedRow {
                        equality,
                        rhs: r,
                        binaries,
                        continuous,
                    });
                }
            }
        }

        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut a: usize) -> usize {
            while parent[a] != a {
                parent[a] = parent[parent[a]];
                a = parent[a];
            }
            a
        }
        for row in &rows {
            let first = row.binaries[0].0;
            for &(j, _) in &row.binaries[1..] {
                let (ra, rb) = (find(&mut parent, first), find(&mut parent, j));
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
        let mut group_of = vec![usize::MAX; n];
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut ints = problem.integer_set.clone();
        ints.sort_unstable();
        for &c in &ints {
            let root = find(&mut parent, c);
            if group_of[root] == usize::MAX {
                group_of[root] = groups.len();
                groups.push(Vec::new());
            }
            groups[group_of[root]].push(c);
        }
        let mut group_rows: Vec<Vec<LinkedRow>> = groups.iter().map(|_| Vec::new()).collect();
        for row in rows {
            let g = group_of[find(&mut parent, row.binaries[0].0)];
            group_rows[g].push(row);
        }
        Completion { groups, group_rows }
    }

    /// Completed point, or the binaries of the groups that could not be
    /// completed.
    fn complete(&self, z: &[f64], lb: &[f64], ub: &[f64], tol: f64) -> Result<Vec<f64>, Vec<usize>> {
        let mut out = z.to_vec();
        let mut failed = Vec::new();
        for (cols, rows) in self.groups.iter().zip(&self.group_rows) {
            match Self::complete_group(cols, rows, z, lb, ub, tol) {
                Some(bits) => {
                    for (&c, b) in cols.iter().zip(bits) {
                        out[c] = b;
                    }
                }
                None => failed.extend_from_slice(cols),
            }
        }
        if failed.is_empty() {
            Ok(out)
        } else {
            Err(failed)
        }
    }

    /// Assignment closest to the relaxed values; ties go to the first in
    /// lexicographic order.
    fn complete_group(
        cols: &[usize],
        rows: &[LinkedRow],
        z: &[f64],
        lb: &[f64],
        ub: &[f64],
        tol: f64,
    ) -> Option<Vec<f64>> {
        let m = cols.len();
        if m > COMPLETION_CAP {
            return None;
        }
        let fixed_part: Vec<f64> = rows
            .iter()
            .map(|r| r.continuous.iter().map(|&(j, a)| a * z[j]).sum::<f64>())
            .collect();
        let mut value = vec![0.0; z.len()];
        let mut best: Option<(f64, Vec<f64>)> = None;
        for code in 0u32..(1u32 << m) {
            let bits: Vec<f64> = (0..m).map(|p| ((code >> (m - 1 - p)) & 1) as f64).collect();
            if cols.iter().zip(&bits).any(|(&c, &b)| b < lb[c] - tol || b > ub[c] + tol) {
                continue;
            }
            for (&c, &b) in cols.iter().zip(&bits) {
                value[c] = b;
            }
            let ok = rows.iter().zip(&fixed_part).all(|(r, &base)| {
                let lhs = base + r.binaries.iter().map(|&(j, a)| a * value[j]).sum::<f64>();
                let slack = tol * (1.0 + r.rhs.abs());
                if r.equality {
                    (lhs - r.rhs).abs() <= slack
                } else {
                    lhs <= r.rhs + slack
                }
            });
            if !ok {
                continue;
            }
            let dist: f64 = cols.iter().zip(&bits).map(|(&c, b)| (z[c] - b).abs()).sum();
            if best.as_ref().is_none_or(|(d, _)| dist < *d) {
                best = Some((dist, bits));
            }
        }
        best.map(|(_, bits)| bits)
    }
}

/// Most fractional column among `cols`; ties go to the lowest column.
fn branching_column(z: &[f64], cols: &[usize]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &c in cols {
        let frac = (z[c] - z[c].floor()).min(z[c].ceil() - z[c]);
        let better = match best {
            None => frac > 0.0,
            Some((bc, f)) => frac > f || (frac == f && c < bc),
        };
        if better {
            best = Some((c, frac));
        }
    }
    best.map(|(c, _)| c)
}

/// Open node, ordered by parent bound then creation index.
struct Node {
    key: f64,
    id: usize,
    depth: usize,
    lb: Vec<f64>,
    ub: Vec<f64>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .key
            .total_cmp(&self.key)
            .then_with(|| other.id.cmp(&self.id))
    }
}

/// Best-first branch-and-bound with most-fractional branching.
pub fn solve_miqp(problem: &MiqpProblem, config: &BnbConfig) -> Result<MiqpSolution, BnbError> {
    config.validate()?;
    let start = Instant::now();
    let qp = &problem.relaxation;
    let ints = &problem.integer_set;
    let mut ev = Evaluator {
        problem,
        settings: config.qp,
        out: MiqpSolution::new(),
    };
    let mut incumbent: Option<(Vec<f64>, f64)> = None;
    let mut trace = Vec::new();
    let completion = Completion::new(problem);

    if let Some(guess) = &config.warm_start {
        if guess.len() == qp.n() {
            let (mut lb, mut ub) = (qp.lb.clone(), qp.ub.clone());
            let mut in_box = true;
            for &c in ints {
                let v = guess[c].round().clamp(qp.lb[c].ceil(), qp.ub[c].floor());
                in_box &= (guess[c] - v).abs() <= 0.5;
                lb[c] = v;
                ub[c] = v;
            }
            if in_box {
                if let Some(sol) = ev.solve(0, &lb, &ub)? {
                    if config.trace {
                        trace.push(format!("warm_start objective={:.12e}", sol.objective));
                    }
                    ev.out.incumbent_history.push(IncumbentRecord {
                        node: 0,
                        objective: sol.objective,
                        best_bound: f64::NEG_INFINITY,
                    });
                    incumbent = Some((sol.primal, sol.objective));
                }
            }
        }
    }

    let mut heap = BinaryHeap::new();
    heap.push(Node {
        key: f64::NEG_INFINITY,
        id: 0,
        depth: 0,
        lb: qp.lb.clone(),
        ub: qp.ub.clone(),
    });
    let mut next_id = 1;
    // smallest bound among nodes discarded by bound
    let mut pruned_floor = f64::INFINITY;
    let mut explored = 0;
    let mut hit_limit = false;

    while let Some(node) = heap.pop() {
        if let Some((_, inc)) = &incumbent {
            if node.key >= inc - config.prune_margin(*inc) {
                pruned_floor = pruned_floor.min(node.key);
                if config.trace {
                    trace.push(format!(
                        "node={} depth={} bound={:.12e} action=prune",
                        node.id, node.depth, node.key
                    ));
                }
                // every remaining key is at least as large
                for rest in heap.drain() {
                    pruned_floor = pruned_floor.min(rest.key);
                }
                break;
            }
        }
        if explored >= config.node_limit {
            hit_limit = true;
            heap.push(node);
            break;
        }
        explored += 1;
        let Some(sol) = ev.solve(node.id, &node.lb, &node.ub)? else {
            if config.trace {
                trace.push(format!(
                    "node={} depth={} bound=inf action=prune",
                    node.id, node.depth
                ));
            }
            continue;
        };
        let bound = sol.objective;
        if node.id == 0 {
            ev.out.root_bound = bound;
            // the warm-start record predates any bound
            for rec in &mut ev.out.incumbent_history {
                rec.best_bound = bound.min(rec.objective);
            }
        }
        let line = |action: &str| {
            format!(
                "node={} depth={} bound={:.12e} action={action}",
                node.id, node.depth, bound
            )
        };

        if let Some((_, inc)) = &incumbent {
            if bound >= inc - config.prune_margin(*inc) {
                pruned_floor = pruned_floor.min(bound);
                if config.trace {
                    trace.push(line("prune"));
                }
                continue;
            }
        }

        // complete the binaries around the relaxed continuous values
        let completion_tol = 0.1 * config.qp.kkt_tol;
        let (candidate, blocking) =
            match completion.complete(&sol.primal, &node.lb, &node.ub, completion_tol) {
                Ok(z) => {
                    let obj = qp.objective(&z);
                    (Some((z, obj)), Vec::new())
                }
                Err(cols) => (None, cols),
            };
        let mut closed = false;
        if let Some((z, obj)) = candidate {
            // the subtree cannot beat the node bound, so a point within the
            // margin of it settles the node
            closed = obj <= bound + config.prune_margin(obj);
            if incumbent.as_ref().is_none_or(|(_, inc)| obj < *inc) {
                incumbent = Some((z, obj));
                let open = heap.iter().map(|n| n.key).fold(f64::INFINITY, f64::min);
                let proven = bound.min(open).min(pruned_floor).max(ev.out.root_bound);
                ev.out.incumbent_history.push(IncumbentRecord {
                    node: explored,
                    objective: obj,
                    best_bound: proven.min(obj),
                });
                if config.trace {
                    trace.push(line("incumbent"));
                }
            } else if closed && config.trace {
                trace.push(line("prune"));
            }
        }
        if closed {
            continue;
        }

        let col = branching_column(&sol.primal, &blocking).or_else(|| branching_column(&sol.primal, ints));
        match col {
            None => {
                // integral already but outside the completion tolerance
                let obj = qp.objective(&sol.primal);
                if incumbent.as_ref().is_none_or(|(_, inc)| obj < *inc) {
                    incumbent = Some((sol.primal, obj));
                    ev.out.incumbent_history.push(IncumbentRecord {
                        node: explored,
                        objective: obj,
                        best_bound: bound.max(ev.out.root_bound).min(obj),
                    });
                }
                if config.trace {
                    trace.push(line("incumbent"));
                }
            }
            Some(col) => {
                if config.trace {
                    trace.push(format!("{} col={col}", line("branch")));
                }
                let v = sol.primal[col];
                let mut down_ub = node.ub.clone();
                down_ub[col] = v.floor();
                let mut up_lb = node.lb.clone();
                up_lb[col] = v.ceil();
                heap.push(Node {
                    key: bound,
                    id: next_id,
                    depth: node.depth + 1,
                    lb: node.lb.clone(),
                    ub: down_ub,
                });
                heap.push(Node {
                    key: bound,
                    id: next_id + 1,
                    depth: node.depth + 1,
                    lb: up_lb,
                    ub: node.ub,
                });
                next_id += 2;
            }
        }
    }

    let open = heap.iter().map(|n| n.key).fold(f64::INFINITY, f64::min);
    let mut out = ev.out;
    out.nodes_explored = explored;
    match incumbent {
        Some((z, obj)) => {
            out.best_bound = obj.min(open).min(pruned_floor);
            if out.root_bound.is_finite() {
                out.best_bound = out.best_bound.max(out.root_bound);
            }
            out.objective = obj;
            out.primal = Some(z);
            out.status = if hit_limit {
                MiqpStatus::NodeLimit
            } else {
                MiqpStatus::Optimal
            };
        }
        None => {
            out.best_bound = open;
            out.status = if hit_limit {
                MiqpStatus::NodeLimit
            } else {
                MiqpStatus::Infeasible
            };
        }
    }
    out.trace = trace;
    out.solve_time = start.elapsed().as_secs_f64();
    Ok(out)
}

/// Exhaustive search over every binary assignment, first integer column
/// most significant. Assignments that break a row touching only binaries are
/// skipped without a QP solve.
pub fn enumerate_oracle(problem: &MiqpProblem, settings: &QpSettings) -> Result<MiqpSolution, BnbError> {
    let ints = &problem.integer_set;
    if ints.len() > ORACLE_CAP {
        return Err(BnbError::CapExceeded {
            binaries: ints.len(),
            cap: ORACLE_CAP,
        });
    }
    let start = Instant::now();
    let qp = &problem.relaxation;
    let mut is_int = vec![false; qp.n()];
    for &c in ints {
        is_int[c] = true;
    }
    let support = qp.g_matrix.row_support();
    let pure_rows: Vec<usize> = (0..qp.g_vec.len())
        .filter(|&i| !support[i].is_empty() && support[i].iter().all(|&c| is_int[c]))
        .collect();
    let pure_g = qp.g_matrix.transpose();

    let mut ev = Evaluator {
        problem,
        settings: *settings,
        out: MiqpSolution::new(),
    };
    let mut best: Option<(Vec<f64>, f64)> = None;
    let m = ints.len();
    for code in 0u32..(1u32 << m) {
        let mut z = vec![0.0; qp.n()];
        let (mut lb, mut ub) = (qp.lb.clone(), qp.ub.clone());
        for (pos, &c) in ints.iter().enumerate() {
            let v = ((code >> (m - 1 - pos)) & 1) as f64;
            z[c] = v;
            lb[c] = v;
            ub[c] = v;
        }
        if ints.iter().any(|&c| z[c] < qp.lb[c] || z[c] > qp.ub[c]) {
            continue;
        }
        let violates = pure_rows.iter().any(|&i| {
            let lhs: f64 = pure_g.col(i).map(|(c, v)| v * z[c]).sum();
            lhs > qp.g_vec[i] + 1e-9
        });
        if violates {
            continue;
        }
        let node = ev.out.qp_solves + 1;
        if let Some(sol) = ev.solve(node, &lb, &ub)? {
            if best.as_ref().is_none_or(|(_, obj)| sol.objective < *obj) {
                ev.out.incumbent_history.push(IncumbentRecord {
                    node,
                    objective: sol.objective,
                    best_bound: f64::NEG_INFINITY,
                });
                best = Some((sol.primal, sol.objective));
            }
        }
    }

    let mut out = ev.out;
    out.nodes_explored = out.qp_solves;
    if let Some((z, obj)) = best {
        out.status = MiqpStatus::Optimal;
        out.objective = obj;
        out.best_bound = obj;
        out.primal = Some(z);
        for rec in &mut out.incumbent_history {
            rec.best_bound = obj;
        }
    }
    out.solve_time = start.elapsed().as_secs_f64();
    Ok(out)
}

/// Relative objective gap used to compare two solvers.
pub fn relative_gap(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / (1.0 + a.abs().max(b.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::VehicleState;
    use crate::miqp::{assemble, Component, RowKind, RowLabel, VariableLayout};
    use crate::qp::QpProblem;
    use crate::scenario::Scenario;
    use crate::sparse::{CscMatrix, TripletMatrix};
    use proptest::prelude::*;

    fn state(x: f64, vx: f64) -> VehicleState {
        VehicleState {
            x,
            y: 0.75,
            vx,
            ..Default::default()
        }
    }

    fn small(n: usize, human: bool, x0: &VehicleState) -> MiqpProblem {
        let mut s = Scenario::reference();
        s.horizon_n = n;
        s.human_behavior_mode = human;
        assemble(&s, x0).unwrap()
    }

    /// Hand-made problem: min Σ (z_i − t_i)² over binaries z.
    fn separable(targets: &[f64]) -> MiqpProblem {
        let n = targets.len();
        let mut h = TripletMatrix::new(n, n);
        for i in 0..n {
            h.push(i, i, 2.0);
        }
        let layout = VariableLayout::new(1, false).unwrap();
        MiqpProblem {
            relaxation: QpProblem {
                h_matrix: h.to_csc(),
                h_vec: targets.iter().map(|t| -2.0 * t).collect(),
                offset: targets.iter().map(|t| t * t).sum(),
                g_matrix: CscMatrix::zeros(0, n),
                g_vec: vec![],
                f_matrix: CscMatrix::zeros(0, n),
                f_vec: vec![],
                lb: vec![0.0; n],
                ub: vec![1.0; n],
            },
            integer_set: (0..n).collect(),
            layout,
            g_labels: vec![],
            f_labels: vec![],
            dropped_constant: 0.0,
        }
    }

    #[test]
    fn integral_relaxation_solves_at_root() {
        let p = separable(&[0.0, 1.0, 1.0]);
        let s = solve_miqp(&p, &BnbConfig::default()).unwrap();
        assert_eq!(s.status, MiqpStatus::Optimal);
        assert_eq!(s.nodes_explored, 1);
        assert!(s.objective.abs() < 1e-8);
        let o = enumerate_oracle(&p, &QpSettings::default()).unwrap();
        assert!((o.objective - s.objective).abs() < 1e-8);
    }

    #[test]
    fn separable_rounding() {
        // optimum rounds each target; 0.3 → 0, 0.8 → 1, 0.55 → 1
        let p = separable(&[0.3, 0.8, 0.55]);
        let s = solve_miqp(&p, &BnbConfig::default()).unwrap();
        let z = s.primal.unwrap();
        assert_eq!(
            z.iter().map(|v| v.round() as i32).collect::<Vec<_>>(),
            vec![0, 1, 1]
        );
        let expected = 0.09 + 0.04 + 0.2025;
        assert!((s.objective - expected).abs() < 1e-7);
        assert!(s.nodes_explored > 1);
    }

    #[test]
    fn contradictory_logic_is_infeasible() {
        let x0 = state(0.0, 10.0);
        let mut p = small(2, false, &x0);
        let d1 = p.layout.col(1, Component::Delta1);
        let d3 = p.layout.col(1, Component::Delta3);
        p.relaxation.ub[d1] = 0.0;
        p.relaxation.lb[d3] = 1.0;
        let s = solve_miqp(&p, &BnbConfig::default()).unwrap();
        assert_eq!(s.status, MiqpStatus::Infeasible);
        assert!(s.primal.is_none());
        let o = enumerate_oracle(&p, &QpSettings::default()).unwrap();
        assert_eq!(o.status, MiqpStatus::Infeasible);
    }

    #[test]
    fn oracle_cap() {
        let x0 = state(25.0, 8.0);
        let p = small(5, true, &x0);
        assert_eq!(p.integer_set.len(), 36);
        assert_eq!(
            enumerate_oracle(&p, &QpSettings::default()),
            Err(BnbError::CapExceeded {
                binaries: 36,
                cap: ORACLE_CAP
            })
        );
        let p = small(2, false, &x0);
        assert_eq!(p.integer_set.len(), 9);
        let o = enumerate_oracle(&p, &QpSettings::default()).unwrap();
        assert!(o.qp_solves <= 512);
        assert!(o.qp_solves < 512, "pure-binary rows screen most codes");
    }

    #[test]
    fn straddling_bump_matches_oracle() {
        // a step short of the bump start, already slow
        let x0 = state(29.7, 4.8);
        let p = small(2, false, &x0);
        let s = solve_miqp(&p, &BnbConfig::default()).unwrap();
        let o = enumerate_oracle(&p, &QpSettings::default()).unwrap();
        assert_eq!(s.status, MiqpStatus::Optimal);
        assert!(relative_gap(s.objective, o.objective) <= 1e-6);
    }

    #[test]
    fn bad_config() {
        let p = separable(&[0.5]);
        let cfg = BnbConfig {
            node_limit: 0,
            ..Default::default()
        };
        assert!(matches!(solve_miqp(&p, &cfg), Err(BnbError::InvalidConfig(_))));
        let cfg = BnbConfig {
            int_tol: 0.0,
            ..Default::default()
        };
        assert!(solve_miqp(&p, &cfg).is_err());
    }

    /// min (y − ½)² subject to y = z, z binary: the root completion fails.
    fn coupled() -> MiqpProblem {
        let mut p = separable(&[0.5, 0.0]);
        p.relaxation.h_matrix = CscMatrix::from_dense(&[&[2.0, 0.0], &[0.0, 0.0]]);
        p.relaxation.h_vec = vec![-1.0, 0.0];
        p.relaxation.offset = 0.25;
        p.relaxation.f_matrix = CscMatrix::from_dense(&[&[1.0, -1.0]]);
        p.relaxation.f_vec = vec![0.0];
        p.integer_set = vec![1];
        p
    }

    #[test]
    fn node_limit_keeps_incumbent() {
        let p = coupled();
        let cfg = BnbConfig {
            node_limit: 1,
            ..Default::default()
        };
        let s = solve_miqp(&p, &cfg).unwrap();
        assert_eq!(s.status, MiqpStatus::NodeLimit);
        assert_eq!(s.nodes_explored, 1);
        assert!(s.primal.is_none());

        let cfg = BnbConfig {
            node_limit: 1,
            warm_start: Some(vec![1.0, 1.0]),
            ..Default::default()
        };
        let s = solve_miqp(&p, &cfg).unwrap();
        assert_eq!(s.status, MiqpStatus::NodeLimit);
        assert!((s.objective - 0.25).abs() < 1e-8);
        assert!(s.primal.is_some());

        let s = solve_miqp(&p, &BnbConfig::default()).unwrap();
        assert_eq!(s.status, MiqpStatus::Optimal);
        assert_eq!(s.nodes_explored, 3);
        assert!((s.objective - 0.25).abs() < 1e-8);
        assert!(s.root_bound.abs() < 1e-8);
    }

    #[test]
    fn warm_start_never_adds_nodes() {
        let p = separable(&[0.4, 0.6, 0.45, 0.52, 0.9]);
        let cold = solve_miqp(&p, &BnbConfig::default()).unwrap();
        let cfg = BnbConfig {
            warm_start: cold.primal.clone(),
            ..Default::default()
        };
        let warm = solve_miqp(&p, &cfg).unwrap();
        assert!(warm.nodes_explored <= cold.nodes_explored);
        assert!(relative_gap(warm.objective, cold.objective) <= 1e-9);
    }

    #[test]
    fn trace_lines() {
        let p = coupled();
        let cfg = BnbConfig {
            trace: true,
            ..Default::default()
        };
        let s = solve_miqp(&p, &cfg).unwrap();
        assert!(s.trace[0].starts_with("node=0 depth=0 bound="));
        assert!(s.trace[0].contains("action=branch"));
        assert!(s.trace.iter().any(|l| l.contains("action=incumbent")));
    }

    #[test]
    fn pure_binary_rows_are_detected() {
        let x0 = state(10.0, 10.0);
        let p = small(1, false, &x0);
        let support = p.relaxation.g_matrix.row_support();
        let pure: Vec<&RowLabel> = p
            .g_labels
            .iter()
            .zip(&support)
            .filter(|(_, s)| s.iter().all(|&c| c >= p.layout.n_continuous))
            .map(|(l, _)| l)
            .collect();
        assert_eq!(pure.len(), 6);
        assert!(pure.iter().all(|l| matches!(
            l.kind,
            RowKind::CapNeedsStart | RowKind::CapNeedsEnd | RowKind::OnBumpNeedsCap
        )));
    }

    fn check_solution(p: &MiqpProblem, s: &MiqpSolution) -> Result<(), TestCaseError> {
        let z = s.primal.as_ref().unwrap();
        let qp = &p.relaxation;
        prop_assert!(qp.primal_violation(z, &qp.lb, &qp.ub) <= 1e-6);
        for &c in &p.integer_set {
            prop_assert!((z[c] - z[c].round()).abs() <= 1e-6);
        }
        Ok(())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(56))]
        #[test]
        fn matches_oracle(
            x in 24.0f64..37.0,
            vx in 3.0f64..12.0,
            ax in -1.0f64..1.0,
            y in 0.5f64..1.0,
            vy in -0.2f64..0.2,
            n in 1usize..=2,
            human in any::<bool>(),
        ) {
            let x0 = VehicleState { x, y, vx, vy, ax, ay: 0.0, theta: 0.0 };
            let p = small(n, human, &x0);
            prop_assume!(p.integer_set.len() <= ORACLE_CAP);
            let s = solve_miqp(&p, &BnbConfig::default()).unwrap();
            let o = enumerate_oracle(&p, &QpSettings::default()).unwrap();
            prop_assert_eq!(s.status, o.status);
            if s.status == MiqpStatus::Optimal {
                prop_assert!((s.objective - o.objective).abs() <= 1e-6 * (1.0 + s.objective.abs()),
                    "bnb {} oracle {}", s.objective, o.objective);
                check_solution(&p, &s)?;
                check_solution(&p, &o)?;

                // bound sandwich and monotone incumbents
                for rec in &s.incumbent_history {
                    prop_assert!(s.root_bound <= rec.best_bound + 1e-9);
                    prop_assert!(rec.best_bound <= rec.objective + 1e-9);
                }
                for w in s.incumbent_history.windows(2) {
                    prop_assert!(w[1].objective <= w[0].objective);
                }
                let gap = s.objective - s.best_bound;
                prop_assert!(gap <= 1e-6f64.max(1e-8 * s.objective.abs()) + 1e-12);
            }
        }
    }
}
