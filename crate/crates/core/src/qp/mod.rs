//! Convex block-structured QPs:
//!
//! ```text
//! min  sum_i 0.5 dw_i' H_i dw_i + h_i' dw_i
//! s.t. dx_0 = d0
//!      a_i + A_i dw_i = dx_{i+1}
//!      Q_i dw_i = q_i
//!      P_i dw_i <= b_i
//! ```
//!
//! where `dx_i` is the state prefix of `dw_i`. Solved by a primal active-set
//! method whose equality-constrained subproblems go through a banded LU of the
//! stage-ordered KKT matrix.

mod banded;

pub use banded::{BandLu, BandMatrix};

use nalgebra::{DMatrix, DVector};

use crate::autodiff::check_dim;
use crate::error::{Error, Result};

/// One stage of the structured QP.
#[derive(Clone, Debug)]
pub struct StageQpData {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    /// Continuity Jacobian `A_i` and defect `a_i`; `None` on the last stage.
    pub dynamics: Option<(DMatrix<f64>, DVector<f64>)>,
    pub ineq_rows: DMatrix<f64>,
    pub ineq_bounds: DVector<f64>,
    /// Intra-stage equality rows and right-hand side.
    pub eq_rows: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    /// Length of the state prefix of this stage's variables.
    pub n_state: usize,
}

impl StageQpData {
    /// Stage without constraints other than the state prefix coupling.
    pub fn new(hessian: DMatrix<f64>, gradient: DVector<f64>, n_state: usize) -> Self {
        let n = gradient.len();
        Self {
            hessian,
            gradient,
            dynamics: None,
            ineq_rows: DMatrix::zeros(0, n),
            ineq_bounds: DVector::zeros(0),
            eq_rows: DMatrix::zeros(0, n),
            eq_rhs: DVector::zeros(0),
            n_state,
        }
    }

    pub fn with_dynamics(mut self, jacobian: DMatrix<f64>, defect: DVector<f64>) -> Self {
        self.dynamics = Some((jacobian, defect));
        self
    }

    pub fn with_inequalities(mut self, rows: DMatrix<f64>, bounds: DVector<f64>) -> Self {
        self.ineq_rows = rows;
        self.ineq_bounds = bounds;
        self
    }

    pub fn with_equalities(mut self, rows: DMatrix<f64>, rhs: DVector<f64>) -> Self {
        self.eq_rows = rows;
        self.eq_rhs = rhs;
        self
    }

    pub fn n_var(&self) -> usize {
        self.gradient.len()
    }

    pub fn n_ineq(&self) -> usize {
        self.ineq_rows.nrows()
    }

    pub fn n_eq(&self) -> usize {
        self.eq_rows.nrows()
    }
}

/// Identifier of an inequality row: stage index, then row within the stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RowId {
    pub stage: usize,
    pub row: usize,
}

/// Result of [`solve_qp`].
#[derive(Clone, Debug)]
pub struct QpSolution {
    pub dw: Vec<DVector<f64>>,
    /// Continuity multipliers.
    pub lambda: Vec<DVector<f64>>,
    /// Multiplier of the initial-value rows.
    pub lambda_init: DVector<f64>,
    /// Inequality multipliers per stage, zero on inactive rows.
    pub mu: Vec<DVector<f64>>,
    /// Intra-stage equality multipliers.
    pub eta: Vec<DVector<f64>>,
    pub active_set: Vec<RowId>,
    pub iterations: usize,
    pub objective: f64,
}

/// Solution of one equality-constrained subproblem.
#[derive(Clone, Debug)]
pub struct EqpSolution {
    pub dw: Vec<DVector<f64>>,
    pub lambda: Vec<DVector<f64>>,
    pub lambda_init: DVector<f64>,
    /// Multipliers of the working rows, in working-set order.
    pub mu_working: Vec<f64>,
    pub eta: Vec<DVector<f64>>,
}

/// Options of the active-set method.
#[derive(Clone, Debug)]
pub struct QpOptions {
    /// Iteration cap; `None` means `50 + 10 * rows`.
    pub max_iterations: Option<usize>,
    pub feasibility_tol: f64,
    pub multiplier_tol: f64,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            max_iterations: None,
            feasibility_tol: 1e-10,
            multiplier_tol: 1e-12,
        }
    }
}

fn validate(stages: &[StageQpData], initial_defect: &DVector<f64>) -> Result<()> {
    if stages.is_empty() {
        return Err(Error::InvalidArgument("QP has no stages".into()));
    }
    check_dim("initial defect", stages[0].n_state, initial_defect.len())?;
    for (i, st) in stages.iter().enumerate() {
        let n = st.n_var();
        check_dim("stage Hessian rows", n, st.hessian.nrows())?;
        check_dim("stage Hessian cols", n, st.hessian.ncols())?;
        check_dim("inequality width", n, st.ineq_rows.ncols())?;
        check_dim("inequality bounds", st.n_ineq(), st.ineq_bounds.len())?;
        check_dim("equality width", n, st.eq_rows.ncols())?;
        check_dim("equality rhs", st.n_eq(), st.eq_rhs.len())?;
        if st.n_state > n {
            return Err(Error::InvalidArgument("state prefix longer than stage".into()));
        }
        match (&st.dynamics, i + 1 < stages.len()) {
            (Some((a, d)), true) => {
                check_dim("continuity Jacobian width", n, a.ncols())?;
                check_dim("continuity Jacobian rows", stages[i + 1].n_state, a.nrows())?;
                check_dim("continuity defect", a.nrows(), d.len())?;
            }
            (None, false) => {}
            _ => {
                return Err(Error::InvalidArgument(
                    "every stage but the last needs continuity data".into(),
                ))
            }
        }
    }
    Ok(())
}

/// Offsets of stage blocks in the KKT unknown vector.
struct Layout {
    w: Vec<usize>,
    mu: Vec<usize>,
    eta: Vec<usize>,
    lambda: Vec<usize>,
    total: usize,
}

fn layout(stages: &[StageQpData], working: &[Vec<usize>]) -> Layout {
    let mut off = stages[0].n_state;
    let mut l = Layout {
        w: vec![],
        mu: vec![],
        eta: vec![],
        lambda: vec![],
        total: 0,
    };
    for (i, st) in stages.iter().enumerate() {
        l.w.push(off);
        off += st.n_var();
        l.mu.push(off);
        off += working[i].len();
        l.eta.push(off);
        off += st.n_eq();
        l.lambda.push(off);
        if let Some((a, _)) = &st.dynamics {
            off += a.nrows();
        }
    }
    l.total = off;
    l
}

/// Solves the equality-constrained QP in which the given inequality rows
/// (per stage, row indices) hold with equality.
pub fn kkt_solve_structured(
    stages: &[StageQpData],
    initial_defect: &DVector<f64>,
    working: &[Vec<usize>],
) -> Result<EqpSolution> {
    validate(stages, initial_defect)?;
    check_dim("working set blocks", stages.len(), working.len())?;
    match kkt_solve_inner(stages, initial_defect, working, 0.0) {
        Ok(s) => Ok(s),
        Err(Error::QpDegenerate) => kkt_solve_inner(stages, initial_defect, working, 1e-10),
        Err(e) => Err(e),
    }
}

fn kkt_solve_inner(
    stages: &[StageQpData],
    d0: &DVector<f64>,
    working: &[Vec<usize>],
    reg: f64,
) -> Result<EqpSolution> {
    let lay = layout(stages, working);
    let mut entries: Vec<(usize, usize, f64)> = Vec::new();
    let mut rhs = vec![0.0; lay.total];
    let sym = |r: usize, c: usize, v: f64, entries: &mut Vec<(usize, usize, f64)>| {
        if v != 0.0 {
            entries.push((r, c, v));
            entries.push((c, r, v));
        }
    };
    for r in 0..stages[0].n_state {
        sym(r, lay.w[0] + r, -1.0, &mut entries);
        rhs[r] = -d0[r];
    }
    for (i, st) in stages.iter().enumerate() {
        let w0 = lay.w[i];
        let n = st.n_var();
        for r in 0..n {
            for c in 0..n {
                let mut v = st.hessian[(r, c)];
                if r == c {
                    v += reg;
                }
                if v != 0.0 {
                    entries.push((w0 + r, w0 + c, v));
                }
            }
            rhs[w0 + r] = -st.gradient[r];
        }
        for (k, &row) in working[i].iter().enumerate() {
            for c in 0..n {
                sym(lay.mu[i] + k, w0 + c, st.ineq_rows[(row, c)], &mut entries);
            }
            rhs[lay.mu[i] + k] = st.ineq_bounds[row];
        }
        for k in 0..st.n_eq() {
            for c in 0..n {
                sym(lay.eta[i] + k, w0 + c, st.eq_rows[(k, c)], &mut entries);
            }
            rhs[lay.eta[i] + k] = st.eq_rhs[k];
        }
        if let Some((a, d)) = &st.dynamics {
            let l0 = lay.lambda[i];
            for r in 0..a.nrows() {
                for c in 0..n {
                    sym(l0 + r, w0 + c, a[(r, c)], &mut entries);
                }
                sym(l0 + r, lay.w[i + 1] + r, -1.0, &mut entries);
                rhs[l0 + r] = -d[r];
            }
        }
    }
    let bw = entries
        .iter()
        .map(|&(r, c, _)| r.abs_diff(c))
        .max()
        .unwrap_or(0);
    let mut band = BandMatrix::zeros(lay.total, bw, bw);
    for (r, c, v) in entries {
        band.add(r, c, v);
    }
    let scale = band.max_abs().max(1.0);
    let lu = band.factor(1e-12 * scale).ok_or(Error::QpDegenerate)?;
    lu.solve(&mut rhs);
    if !rhs.iter().all(|v| v.is_finite()) {
        return Err(Error::QpDegenerate);
    }
    let slice = |o: usize, n: usize| DVector::from_row_slice(&rhs[o..o + n]);
    let mut sol = EqpSolution {
        dw: vec![],
        lambda: vec![],
        lambda_init: slice(0, stages[0].n_state),
        mu_working: vec![],
        eta: vec![],
    };
    for (i, st) in stages.iter().enumerate() {
        sol.dw.push(slice(lay.w[i], st.n_var()));
        sol.mu_working
            .extend_from_slice(&rhs[lay.mu[i]..lay.mu[i] + working[i].len()]);
        sol.eta.push(slice(lay.eta[i], st.n_eq()));
        if let Some((a, _)) = &st.dynamics {
            sol.lambda.push(slice(lay.lambda[i], a.nrows()));
        }
    }
    Ok(sol)
}

/// QP objective at a stage-wise point.
pub fn qp_objective(stages: &[StageQpData], dw: &[DVector<f64>]) -> f64 {
    stages
        .iter()
        .zip(dw)
        .map(|(st, w)| 0.5 * w.dot(&(&st.hessian * w)) + st.gradient.dot(w))
        .sum()
}

/// Max-norm KKT residual of a candidate QP solution: stationarity, equality
/// and inequality feasibility, multiplier sign and complementarity.
pub fn qp_kkt_residual(stages: &[StageQpData], initial_defect: &DVector<f64>, sol: &QpSolution) -> f64 {
    let mut res: f64 = 0.0;
    let ns0 = stages[0].n_state;
    res = res.max((sol.dw[0].rows(0, ns0) - initial_defect).amax());
    for (i, st) in stages.iter().enumerate() {
        let w = &sol.dw[i];
        let mut g = &st.hessian * w + &st.gradient;
        let prev = if i == 0 {
            Some(&sol.lambda_init)
        } else if stages[i - 1].dynamics.is_some() {
            Some(&sol.lambda[i - 1])
        } else {
            None
        };
        if let Some(p) = prev {
            let mut head = g.rows_mut(0, p.len());
            head -= p;
        }
        if let Some((a, d)) = &st.dynamics {
            g += a.tr_mul(&sol.lambda[i]);
            let next = sol.dw[i + 1].rows(0, a.nrows());
            res = res.max((d + a * w - next).amax());
        }
        if st.n_eq() > 0 {
            g += st.eq_rows.tr_mul(&sol.eta[i]);
            res = res.max((&st.eq_rows * w - &st.eq_rhs).amax());
        }
        if st.n_ineq() > 0 {
            g += st.ineq_rows.tr_mul(&sol.mu[i]);
            let slack = &st.ineq_rows * w - &st.ineq_bounds;
            for r in 0..st.n_ineq() {
                let m = sol.mu[i][r];
                res = res.max(slack[r].max(0.0)).max((-m).max(0.0)).max((m * slack[r]).abs());
            }
        }
        res = res.max(g.amax());
    }
    res
}

fn rows_of(stages: &[StageQpData]) -> Vec<RowId> {
    let mut ids = Vec::new();
    for (i, st) in stages.iter().enumerate() {
        for r in 0..st.n_ineq() {
            ids.push(RowId { stage: i, row: r });
        }
    }
    ids
}

fn row_dot(stages: &[StageQpData], id: RowId, z: &[DVector<f64>]) -> f64 {
    stages[id.stage].ineq_rows.row(id.row).dot(&z[id.stage].transpose())
}

fn split_working(stages: &[StageQpData], working: &[RowId]) -> Vec<Vec<usize>> {
    let mut w = vec![Vec::new(); stages.len()];
    for id in working {
        w[id.stage].push(id.row);
    }
    w
}

/// Order of multipliers returned by the structured solve: stage-major,
/// working-set order within a stage.
fn working_order(stages: &[StageQpData], working: &[RowId]) -> Vec<RowId> {
    split_working(stages, working)
        .into_iter()
        .enumerate()
        .flat_map(|(s, rows)| rows.into_iter().map(move |r| RowId { stage: s, row: r }))
        .collect()
}

fn inf_norm(z: &[DVector<f64>]) -> f64 {
    z.iter().fold(0.0f64, |m, v| m.max(v.amax()))
}

struct PhaseResult {
    z: Vec<DVector<f64>>,
    working: Vec<RowId>,
    eqp: EqpSolution,
    iterations: usize,
}

/// Primal active-set iterations from a feasible point `z` whose working rows
/// hold with equality.
fn primal_active_set(
    stages: &[StageQpData],
    d0: &DVector<f64>,
    mut z: Vec<DVector<f64>>,
    mut working: Vec<RowId>,
    opts: &QpOptions,
    max_iter: usize,
) -> Result<PhaseResult> {
    let ids = rows_of(stages);
    let mut bland = false;
    for iter in 0..max_iter {
        working.sort();
        let eqp = kkt_solve_structured(stages, d0, &split_working(stages, &working))?;
        let order = working_order(stages, &working);
        let p: Vec<DVector<f64>> = eqp.dw.iter().zip(&z).map(|(a, b)| a - b).collect();
        let pn = inf_norm(&p);
        if pn <= 1e-12 * (1.0 + inf_norm(&z)) {
            z = eqp.dw.clone();
            // drop a constraint with a negative multiplier, if any
            let mut pick: Option<(usize, f64)> = None;
            for (k, &m) in eqp.mu_working.iter().enumerate() {
                if m < -opts.multiplier_tol {
                    let better = match pick {
                        None => true,
                        Some((kb, mb)) => {
                            if bland {
                                order[k] < order[kb]
                            } else {
                                m < mb
                            }
                        }
                    };
                    if better {
                        pick = Some((k, m));
                    }
                }
            }
            match pick {
                None => {
                    return Ok(PhaseResult {
                        z,
                        working,
                        eqp,
                        iterations: iter + 1,
                    })
                }
                Some((k, _)) => {
                    let id = order[k];
                    working.retain(|w| *w != id);
                }
            }
            continue;
        }
        // ratio test over rows outside the working set
        let mut alpha = 1.0;
        let mut block: Option<RowId> = None;
        for &id in &ids {
            if working.binary_search(&id).is_ok() {
                continue;
            }
            let pj = row_dot(stages, id, &p);
            let rn = stages[id.stage].ineq_rows.row(id.row).amax();
            if pj <= 1e-14 * rn * pn {
                continue;
            }
            let slack = stages[id.stage].ineq_bounds[id.row] - row_dot(stages, id, &z);
            let a = slack.max(0.0) / pj;
            if a < alpha {
                alpha = a;
                block = Some(id);
            }
        }
        for (zi, pi) in z.iter_mut().zip(&p) {
            zi.axpy(alpha, pi, 1.0);
        }
        if let Some(id) = block {
            if alpha == 0.0 {
                bland = true;
            }
            working.push(id);
        }
    }
    Err(Error::QpMaxIterations(max_iter))
}

/// Is every inequality satisfied at `z`?
fn feasible(stages: &[StageQpData], z: &[DVector<f64>], tol: f64) -> bool {
    stages.iter().zip(z).all(|(st, w)| {
        st.n_ineq() == 0
            || (&st.ineq_rows * w - &st.ineq_bounds)
                .iter()
                .zip(st.ineq_bounds.iter())
                .all(|(s, b)| *s <= tol * (1.0 + b.abs()))
    })
}

/// Elastic reformulation: one slack per stage with rows, penalized by
/// `penalty t + 0.5 t^2`, appended after the stage variables.
fn elastic(stages: &[StageQpData], penalty: f64) -> Vec<StageQpData> {
    stages
        .iter()
        .map(|st| {
            let m = st.n_ineq();
            if m == 0 {
                return st.clone();
            }
            let n = st.n_var();
            let mut h = DMatrix::zeros(n + 1, n + 1);
            h.view_mut((0, 0), (n, n)).copy_from(&st.hessian);
            h[(n, n)] = 1.0;
            let mut g = DVector::zeros(n + 1);
            g.rows_mut(0, n).copy_from(&st.gradient);
            g[n] = penalty;
            let mut p = DMatrix::zeros(m + 1, n + 1);
            p.view_mut((0, 0), (m, n)).copy_from(&st.ineq_rows);
            for r in 0..m {
                p[(r, n)] = -1.0;
            }
            p[(m, n)] = -1.0;
            let mut b = DVector::zeros(m + 1);
            b.rows_mut(0, m).copy_from(&st.ineq_bounds);
            let pad = |a: &DMatrix<f64>| {
                let mut o = DMatrix::zeros(a.nrows(), n + 1);
                o.view_mut((0, 0), (a.nrows(), n)).copy_from(a);
                o
            };
            StageQpData {
                hessian: h,
                gradient: g,
                dynamics: st.dynamics.as_ref().map(|(a, d)| (pad(a), d.clone())),
                ineq_rows: p,
                ineq_bounds: b,
                eq_rows: pad(&st.eq_rows),
                eq_rhs: st.eq_rhs.clone(),
                n_state: st.n_state,
            }
        })
        .collect()
}

/// Finds a feasible point with a working set whose rows are active there.
fn phase_one(
    stages: &[StageQpData],
    d0: &DVector<f64>,
    opts: &QpOptions,
    max_iter: usize,
) -> Result<(Vec<DVector<f64>>, Vec<RowId>, usize)> {
    let empty = vec![Vec::new(); stages.len()];
    let base = kkt_solve_structured(stages, d0, &empty)?;
    let mut used = 0;
    for penalty in [1e3, 1e6, 1e9] {
        let el = elastic(stages, penalty);
        let mut z = Vec::with_capacity(stages.len());
        let mut working = Vec::new();
        for (i, st) in stages.iter().enumerate() {
            if st.n_ineq() == 0 {
                z.push(base.dw[i].clone());
                continue;
            }
            let viol = &st.ineq_rows * &base.dw[i] - &st.ineq_bounds;
            let (imax, vmax) = viol.argmax();
            let t = vmax.max(0.0);
            let mut w = DVector::zeros(st.n_var() + 1);
            w.rows_mut(0, st.n_var()).copy_from(&base.dw[i]);
            w[st.n_var()] = t;
            z.push(w);
            working.push(RowId {
                stage: i,
                row: if t > 0.0 { imax } else { st.n_ineq() },
            });
        }
        let res = primal_active_set(&el, d0, z, working, opts, max_iter)?;
        used += res.iterations;
        let slack_max = stages
            .iter()
            .enumerate()
            .filter(|(_, st)| st.n_ineq() > 0)
            .map(|(i, st)| res.z[i][st.n_var()])
            .fold(0.0f64, f64::max);
        if slack_max <= 1e-12 {
            let z: Vec<DVector<f64>> = stages
                .iter()
                .enumerate()
                .map(|(i, st)| res.z[i].rows(0, st.n_var()).into_owned())
                .collect();
            let working = res
                .working
                .into_iter()
                .filter(|id| id.row < stages[id.stage].n_ineq())
                .collect();
            return Ok((z, working, used));
        }
    }
    Err(Error::QpInfeasible)
}

/// Solves the structured QP by a primal active-set method.
///
/// `warm` is an optional initial working set (for example the previous
/// active set); rows that are unknown are ignored.
pub fn solve_qp(
    stages: &[StageQpData],
    initial_defect: &DVector<f64>,
    warm: Option<&[RowId]>,
    opts: &QpOptions,
) -> Result<QpSolution> {
    validate(stages, initial_defect)?;
    let n_rows: usize = stages.iter().map(|s| s.n_ineq()).sum();
    let max_iter = opts.max_iterations.unwrap_or(50 + 10 * n_rows);

    // starting point: EQP on the warm set, then on the empty set, else phase one
    let mut start: Option<(Vec<DVector<f64>>, Vec<RowId>)> = None;
    let mut phase_one_iters = 0;
    let mut candidates: Vec<Vec<RowId>> = Vec::new();
    if let Some(w) = warm {
        let mut w: Vec<RowId> = w
            .iter()
            .copied()
            .filter(|id| id.stage < stages.len() && id.row < stages[id.stage].n_ineq())
            .collect();
        w.sort();
        w.dedup();
        if !w.is_empty() {
            candidates.push(w);
        }
    }
    candidates.push(Vec::new());
    for w in candidates {
        match kkt_solve_structured(stages, initial_defect, &split_working(stages, &w)) {
            Ok(eqp) if feasible(stages, &eqp.dw, opts.feasibility_tol) => {
                start = Some((eqp.dw, w));
                break;
            }
            Ok(_) | Err(Error::QpDegenerate) => {}
            Err(e) => return Err(e),
        }
    }
    let (z, working) = match start {
        Some(s) => s,
        None => {
            let (z, w, it) = phase_one(stages, initial_defect, opts, max_iter)?;
            phase_one_iters = it;
            (z, w)
        }
    };
    let res = primal_active_set(stages, initial_defect, z, working, opts, max_iter)?;
    let order = working_order(stages, &res.working);
    let mut mu: Vec<DVector<f64>> = stages.iter().map(|s| DVector::zeros(s.n_ineq())).collect();
    for (k, id) in order.iter().enumerate() {
        mu[id.stage][id.row] = res.eqp.mu_working[k];
    }
    let mut active = res.working.clone();
    active.sort();
    let objective = qp_objective(stages, &res.z);
    Ok(QpSolution {
        dw: res.z,
        lambda: res.eqp.lambda,
        lambda_init: res.eqp.lambda_init,
        mu,
        eta: res.eqp.eta,
        active_set: active,
        iterations: res.iterations + phase_one_iters,
        objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(x)
    }

    /// Dense KKT oracle for equality-only problems.
    fn dense_eqp(stages: &[StageQpData], d0: &DVector<f64>) -> DVector<f64> {
        let nvar: usize = stages.iter().map(|s| s.n_var()).sum();
        let offs: Vec<usize> = stages
            .iter()
            .scan(0, |o, s| {
                let r = *o;
                *o += s.n_var();
                Some(r)
            })
            .collect();
        let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
        for r in 0..stages[0].n_state {
            let mut e = DVector::zeros(nvar);
            e[r] = 1.0;
            rows.push((e, d0[r]));
        }
        for (i, st) in stages.iter().enumerate() {
            for k in 0..st.n_eq() {
                let mut e = DVector::zeros(nvar);
                for c in 0..st.n_var() {
                    e[offs[i] + c] = st.eq_rows[(k, c)];
                }
                rows.push((e, st.eq_rhs[k]));
            }
            if let Some((a, d)) = &st.dynamics {
                for r in 0..a.nrows() {
                    let mut e = DVector::zeros(nvar);
                    for c in 0..st.n_var() {
                        e[offs[i] + c] = a[(r, c)];
                    }
                    e[offs[i + 1] + r] = -1.0;
                    rows.push((e, -d[r]));
                }
            }
        }
        let m = rows.len();
        let mut k = DMatrix::zeros(nvar + m, nvar + m);
        let mut rhs = DVector::zeros(nvar + m);
        for (i, st) in stages.iter().enumerate() {
            k.view_mut((offs[i], offs[i]), (st.n_var(), st.n_var()))
                .copy_from(&st.hessian);
            rhs.rows_mut(offs[i], st.n_var()).copy_from(&(-&st.gradient));
        }
        for (j, (e, b)) in rows.iter().enumerate() {
            for c in 0..nvar {
                k[(nvar + j, c)] = e[c];
                k[(c, nvar + j)] = e[c];
            }
            rhs[nvar + j] = *b;
        }
        k.lu().solve(&rhs).unwrap().rows(0, nvar).into_owned()
    }

    #[test]
    fn unconstrained_step() {
        let st = StageQpData::new(DMatrix::identity(3, 3), v(&[1.0, 1.0, 1.0]), 0);
        let sol = solve_qp(&[st], &DVector::zeros(0), None, &QpOptions::default()).unwrap();
        assert_eq!(sol.dw[0].as_slice(), &[-1.0, -1.0, -1.0]);
    }

    #[test]
    fn single_bound() {
        let st = StageQpData::new(DMatrix::identity(1, 1), v(&[-1.0]), 0)
            .with_inequalities(DMatrix::from_element(1, 1, 1.0), v(&[0.5]));
        let sol = solve_qp(&[st.clone()], &DVector::zeros(0), None, &QpOptions::default()).unwrap();
        assert!((sol.dw[0][0] - 0.5).abs() < 1e-14);
        assert!((sol.mu[0][0] - 0.5).abs() < 1e-14);
        assert_eq!(sol.active_set, vec![RowId { stage: 0, row: 0 }]);
        let r = qp_kkt_residual(&[st], &DVector::zeros(0), &sol);
        assert!(r < 1e-14);
    }

    #[test]
    fn zero_data_gives_zero_step() {
        let mk = |dyn_: bool| {
            let s = StageQpData::new(DMatrix::identity(3, 3), DVector::zeros(3), 2);
            if dyn_ {
                s.with_dynamics(DMatrix::from_element(2, 3, 0.3), DVector::zeros(2))
            } else {
                s
            }
        };
        let stages = vec![mk(true), mk(true), mk(false)];
        let eqp = kkt_solve_structured(&stages, &DVector::zeros(2), &[vec![], vec![], vec![]]).unwrap();
        for w in &eqp.dw {
            assert_eq!(w.amax(), 0.0);
        }
    }

    #[test]
    fn scalar_chain_matches_dense() {
        // N=1: w0 = (x0, u0), w1 = x1
        let s0 = StageQpData::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]), v(&[0.5, -1.0]), 1)
            .with_dynamics(DMatrix::from_row_slice(1, 2, &[0.9, 0.2]), v(&[0.1]));
        let s1 = StageQpData::new(DMatrix::from_element(1, 1, 3.0), v(&[0.3]), 1);
        let stages = vec![s0, s1];
        let d0 = v(&[0.4]);
        let eqp = kkt_solve_structured(&stages, &d0, &[vec![], vec![]]).unwrap();
        let dense = dense_eqp(&stages, &d0);
        assert!((eqp.dw[0][0] - dense[0]).abs() < 1e-12);
        assert!((eqp.dw[0][1] - dense[1]).abs() < 1e-12);
        assert!((eqp.dw[1][0] - dense[2]).abs() < 1e-12);
        // hand solution: x0 = 0.4, x1 = 0.1 + 0.36 + 0.2 u,
        // stationarity in u: u - 1 + 0.2 * (3 x1 + 0.3) = 0
        let u = (1.0 - 0.2 * (3.0 * 0.46 + 0.3)) / (1.0 + 0.2 * 0.2 * 3.0);
        assert!((eqp.dw[0][1] - u).abs() < 1e-12);
    }

    #[test]
    fn random_equality_instances_match_dense() {
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let nx = rng.random_range(1..4);
            let nu = rng.random_range(1..3);
            let n = rng.random_range(1..5);
            let mut stages = Vec::new();
            for i in 0..=n {
                let nw = if i < n { nx + nu } else { nx };
                let m = DMatrix::from_fn(nw, nw, |_, _| rng.random_range(-1.0..1.0));
                let h = &m * m.transpose() + DMatrix::identity(nw, nw) * 0.1;
                let g = DVector::from_fn(nw, |_, _| rng.random_range(-1.0..1.0));
                let mut st = StageQpData::new(h, g, nx);
                if i < n {
                    let a = DMatrix::from_fn(nx, nw, |_, _| rng.random_range(-1.0..1.0));
                    let d = DVector::from_fn(nx, |_, _| rng.random_range(-1.0..1.0));
                    st = st.with_dynamics(a, d);
                    if rng.random_bool(0.5) {
                        let q = DMatrix::from_fn(1, nw, |_, _| rng.random_range(-1.0..1.0));
                        st = st.with_equalities(q, v(&[rng.random_range(-1.0..1.0)]));
                    }
                }
                stages.push(st);
            }
            let d0 = DVector::from_fn(nx, |_, _| rng.random_range(-1.0..1.0));
            let eqp = kkt_solve_structured(&stages, &d0, &vec![vec![]; n + 1]).unwrap();
            let dense = dense_eqp(&stages, &d0);
            let flat: Vec<f64> = eqp.dw.iter().flat_map(|w| w.iter().copied()).collect();
            for (a, b) in flat.iter().zip(dense.iter()) {
                assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn infeasible_is_reported() {
        let st = StageQpData::new(DMatrix::identity(1, 1), v(&[0.0]), 0)
            .with_inequalities(DMatrix::from_column_slice(2, 1, &[1.0, -1.0]), v(&[-1.0, -1.0]));
        assert_eq!(
            solve_qp(&[st], &DVector::zeros(0), None, &QpOptions::default()).unwrap_err(),
            Error::QpInfeasible
        );
    }

    #[test]
    fn warm_start_reaches_same_solution() {
        let st = StageQpData::new(DMatrix::identity(2, 2), v(&[-2.0, -2.0]), 0)
            .with_inequalities(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]), v(&[1.0, 5.0]));
        let cold = solve_qp(&[st.clone()], &DVector::zeros(0), None, &QpOptions::default()).unwrap();
        let wrong = [RowId { stage: 0, row: 1 }];
        let warm = solve_qp(&[st], &DVector::zeros(0), Some(&wrong), &QpOptions::default()).unwrap();
        assert_eq!(cold.active_set, warm.active_set);
        assert!((&cold.dw[0] - &warm.dw[0]).amax() < 1e-14);
        assert_eq!(cold.dw[0].as_slice(), &[1.0, 2.0]);
    }
}
