//! Adjoint-based inexact SQP over the multiple-shooting problem.
//!
//! One iteration is split into a preparation phase (apply the pending
//! Jacobian/Hessian update, build the QP) and a feedback phase (solve the QP
//! for a given initial state, take the full step). [`run_sqp`] chains them.

mod updates;

pub use updates::*;

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::diagnostics::SolutionReference;
use crate::error::{Error, Result};
use crate::model::{gradient_correction, kkt_residual, Iterate, OcpModel};
use crate::qp::{solve_qp, QpOptions, QpSolution, RowId, StageQpData};

/// How the constraint Jacobian blocks are obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum JacobianStrategy {
    Exact,
    BlockTr1(Tr1Variant),
    DenseTr1(Tr1Variant),
    Broyden(BroydenVariant),
}

impl JacobianStrategy {
    pub const ALL: [JacobianStrategy; 7] = [
        JacobianStrategy::Exact,
        JacobianStrategy::BlockTr1(Tr1Variant::Forward),
        JacobianStrategy::BlockTr1(Tr1Variant::Adjoint),
        JacobianStrategy::BlockTr1(Tr1Variant::Dynamic),
        JacobianStrategy::DenseTr1(Tr1Variant::Adjoint),
        JacobianStrategy::Broyden(BroydenVariant::Good),
        JacobianStrategy::Broyden(BroydenVariant::Bad),
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Exact => "exact",
            Self::BlockTr1(Tr1Variant::Forward) => "block_tr1_forward",
            Self::BlockTr1(Tr1Variant::Adjoint) => "block_tr1_adjoint",
            Self::BlockTr1(Tr1Variant::Dynamic) => "block_tr1_dynamic",
            Self::DenseTr1(Tr1Variant::Forward) => "dense_tr1_forward",
            Self::DenseTr1(Tr1Variant::Adjoint) => "dense_tr1",
            Self::DenseTr1(Tr1Variant::Dynamic) => "dense_tr1_dynamic",
            Self::Broyden(BroydenVariant::Good) => "broyden_good",
            Self::Broyden(BroydenVariant::Bad) => "broyden_bad",
        }
    }
}

impl fmt::Display for JacobianStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for JacobianStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "exact" => Self::Exact,
            "block_tr1_forward" => Self::BlockTr1(Tr1Variant::Forward),
            "block_tr1_adjoint" => Self::BlockTr1(Tr1Variant::Adjoint),
            "block_tr1_dynamic" | "block_tr1" => Self::BlockTr1(Tr1Variant::Dynamic),
            "dense_tr1" | "dense_tr1_adjoint" => Self::DenseTr1(Tr1Variant::Adjoint),
            "dense_tr1_forward" => Self::DenseTr1(Tr1Variant::Forward),
            "dense_tr1_dynamic" => Self::DenseTr1(Tr1Variant::Dynamic),
            "broyden_good" => Self::Broyden(BroydenVariant::Good),
            "broyden_bad" => Self::Broyden(BroydenVariant::Bad),
            other => return Err(Error::Config(format!("unknown Jacobian strategy `{other}`"))),
        })
    }
}

impl TryFrom<String> for JacobianStrategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<JacobianStrategy> for String {
    fn from(s: JacobianStrategy) -> String {
        s.name().to_string()
    }
}

/// Hessian approximation used in the QP.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianScheme {
    #[default]
    GaussNewton,
    /// Block SR1 started from the Gauss-Newton blocks at the first iterate.
    BlockSr1,
}

/// Starting value of the Jacobian approximation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianInit {
    #[default]
    Exact,
    Zero,
}

/// Solver settings.
#[derive(Clone, Debug)]
pub struct SqpOptions {
    pub strategy: JacobianStrategy,
    pub hessian: HessianScheme,
    pub jacobian_init: JacobianInit,
    /// TR1 skipping constant.
    pub c1: f64,
    /// SR1 skipping constant.
    pub sr1_threshold: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Abort once the KKT residual exceeds this value.
    pub divergence_threshold: f64,
    pub qp: QpOptions,
}

impl Default for SqpOptions {
    fn default() -> Self {
        Self {
            strategy: JacobianStrategy::BlockTr1(Tr1Variant::Dynamic),
            hessian: HessianScheme::GaussNewton,
            jacobian_init: JacobianInit::Exact,
            c1: 1e-8,
            sr1_threshold: 1e-8,
            tol: 1e-8,
            max_iter: 100,
            divergence_threshold: 1e6,
            qp: QpOptions::default(),
        }
    }
}

/// Jacobian approximations of the continuity constraints.
#[derive(Clone, Debug)]
pub struct JacobianStore {
    pub strategy: JacobianStrategy,
    /// Per-interval blocks `A_i`.
    pub blocks: Vec<DMatrix<f64>>,
    /// Full constraint Jacobian, only for the dense strategy.
    pub full: Option<DMatrix<f64>>,
    /// Skipped updates per interval so far.
    pub skips: Vec<usize>,
}

impl JacobianStore {
    pub fn new(model: &OcpModel, it: &Iterate, strategy: JacobianStrategy, init: JacobianInit) -> Result<Self> {
        let n = model.n_intervals;
        let blocks = match (strategy, init) {
            (JacobianStrategy::Exact, _) | (_, JacobianInit::Exact) => exact_blocks(model, it)?,
            (_, JacobianInit::Zero) => vec![DMatrix::zeros(model.nx, model.nx + model.nu); n],
        };
        let full = match strategy {
            JacobianStrategy::DenseTr1(_) => Some(assemble_full(model, &blocks)),
            _ => None,
        };
        Ok(Self {
            strategy,
            blocks,
            full,
            skips: vec![0; n],
        })
    }

    /// Blocks as the QP sees them (diagonal blocks of the full matrix under
    /// the dense strategy).
    pub fn effective_blocks(&self, model: &OcpModel) -> Vec<DMatrix<f64>> {
        match &self.full {
            Some(full) => (0..model.n_intervals)
                .map(|i| full.view((i * model.nx, offset(model, i)), (model.nx, model.nx + model.nu)).into_owned())
                .collect(),
            None => self.blocks.clone(),
        }
    }

    /// Drops the first interval and duplicates the last one.
    pub fn shift(&mut self, model: &OcpModel) {
        if self.full.is_some() {
            self.blocks = self.effective_blocks(model);
        }
        if !self.blocks.is_empty() {
            self.blocks.remove(0);
            let last = self.blocks.last().cloned().unwrap_or_else(|| DMatrix::zeros(model.nx, model.nx + model.nu));
            self.blocks.push(last);
        }
        if self.full.is_some() {
            self.full = Some(assemble_full(model, &self.blocks));
        }
    }
}

fn exact_blocks(model: &OcpModel, it: &Iterate) -> Result<Vec<DMatrix<f64>>> {
    (0..model.n_intervals).map(|i| model.shooting_jacobian(&it.w(i))).collect()
}

fn offset(model: &OcpModel, i: usize) -> usize {
    i * (model.nx + model.nu)
}

fn n_total(model: &OcpModel) -> usize {
    offset(model, model.n_intervals) + model.nx
}

/// Stacked continuity Jacobian with `-I` on each successor state.
fn assemble_full(model: &OcpModel, blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let (nx, n) = (model.nx, model.n_intervals);
    let mut a = DMatrix::zeros(n * nx, n_total(model));
    for (i, b) in blocks.iter().enumerate() {
        a.view_mut((i * nx, offset(model, i)), (nx, nx + model.nu)).copy_from(b);
        for r in 0..nx {
            a[(i * nx + r, offset(model, i + 1) + r)] = -1.0;
        }
    }
    a
}

/// One row of the convergence record.
#[derive(Clone, Debug, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    /// KKT residual of the new iterate.
    pub kkt: f64,
    pub step_norm: f64,
    /// Largest per-stage projected Jacobian error; NaN without a reference.
    pub proj_jac_err: f64,
    #[serde(skip)]
    pub proj_errors: Vec<f64>,
    /// Per-stage Frobenius error without projection.
    #[serde(skip)]
    pub jac_errors: Vec<f64>,
    /// Distance of the new iterate to the reference solution (NaN without one).
    pub distance: f64,
    pub n_skipped: usize,
    pub active_set_size: usize,
    pub strategy: String,
    pub n_refactorizations: u64,
    pub matvec_count: u64,
    pub outer_product_count: u64,
}

/// Data carried from a feedback phase to the next update.
#[derive(Clone, Debug)]
struct Pending {
    old: Iterate,
    old_f: Vec<DVector<f64>>,
}

/// Summary of one feedback phase.
#[derive(Clone, Debug)]
pub struct FeedbackInfo {
    pub step_norm: f64,
    pub active_set: Vec<RowId>,
    pub qp_iterations: usize,
    /// First control of the new iterate.
    pub control: DVector<f64>,
}

/// How a run ended.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RunOutcome {
    Converged,
    MaxIterations,
    Diverged { iter: usize, residual: f64 },
}

/// Result of [`run_sqp`].
#[derive(Clone, Debug)]
pub struct SqpRun {
    pub solution: Iterate,
    pub records: Vec<IterationRecord>,
    pub outcome: RunOutcome,
    pub initial_kkt: f64,
    pub active_set: Vec<RowId>,
    pub jacobians: Vec<DMatrix<f64>>,
}

/// Instrumentation of solver phases.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PhaseCounters {
    pub qp_solves: u64,
    pub linearizations: u64,
}

/// SQP state across iterations.
#[derive(Clone, Debug)]
pub struct SqpSolver {
    pub model: OcpModel,
    pub options: SqpOptions,
    pub iterate: Iterate,
    pub jacobians: JacobianStore,
    /// SR1 blocks, present under [`HessianScheme::BlockSr1`].
    pub hessians: Option<Vec<DMatrix<f64>>>,
    pub active_set: Vec<RowId>,
    pub counters: PhaseCounters,
    f_values: Option<Vec<DVector<f64>>>,
    pending: Option<Pending>,
    prepared: Option<Vec<StageQpData>>,
    last_skips: usize,
}

impl SqpSolver {
    pub fn new(model: &OcpModel, iterate: Iterate, options: SqpOptions) -> Result<Self> {
        if !iterate.is_finite() {
            return Err(Error::NonFinite("initial iterate"));
        }
        let jacobians = JacobianStore::new(model, &iterate, options.strategy, options.jacobian_init)?;
        let hessians = match options.hessian {
            HessianScheme::GaussNewton => None,
            HessianScheme::BlockSr1 => Some(
                (0..=model.n_intervals)
                    .map(|i| model.costs[i].gauss_newton(&iterate.w(i)))
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        Ok(Self {
            model: model.clone(),
            options,
            iterate,
            jacobians,
            hessians,
            active_set: Vec::new(),
            counters: PhaseCounters::default(),
            f_values: None,
            pending: None,
            prepared: None,
            last_skips: 0,
        })
    }

    fn shooting_values(&mut self) -> Result<Vec<DVector<f64>>> {
        if self.f_values.is_none() {
            let f = (0..self.model.n_intervals)
                .map(|i| self.model.shoot(&self.iterate.w(i)))
                .collect::<Result<Vec<_>>>()?;
            self.f_values = Some(f);
        }
        Ok(self.f_values.clone().unwrap())
    }

    /// Whether a Jacobian/Hessian update is waiting for the next preparation.
    pub fn has_pending_update(&self) -> bool {
        self.pending.is_some()
    }

    /// Drops the pending update data, for instance after a failed QP.
    pub fn discard_pending_update(&mut self) {
        self.pending = None;
    }

    /// Applies the update prepared by the last feedback phase. Returns the
    /// number of skipped block updates.
    pub fn apply_pending_update(&mut self) -> Result<usize> {
        let Some(p) = self.pending.take() else {
            return Ok(0);
        };
        self.prepared = None;
        let model = self.model.clone();
        let n = model.n_intervals;
        let new_f = self.shooting_values()?;
        let it = &self.iterate;
        let mut skipped = 0;
        match self.jacobians.strategy {
            JacobianStrategy::Exact => {
                self.jacobians.blocks = exact_blocks(&model, it)?;
                self.counters.linearizations += 1;
            }
            JacobianStrategy::BlockTr1(variant) => {
                for i in 0..n {
                    let w = it.w(i);
                    let sigma = &it.lambda[i] - &p.old.lambda[i];
                    let uv = UpdateVectors {
                        s: &w - p.old.w(i),
                        gamma: model.shooting_vjp(&w, &sigma)?,
                        sigma,
                        y: &new_f[i] - &p.old_f[i],
                    };
                    let out = block_tr1_update(&mut self.jacobians.blocks[i], &uv, variant, self.options.c1);
                    if out.skipped {
                        skipped += 1;
                        self.jacobians.skips[i] += 1;
                    }
                }
            }
            JacobianStrategy::Broyden(variant) => {
                for i in 0..n {
                    let s = it.w(i) - p.old.w(i);
                    let y = &new_f[i] - &p.old_f[i];
                    if broyden_update(&mut self.jacobians.blocks[i], &s, &y, variant).skipped {
                        skipped += 1;
                        self.jacobians.skips[i] += 1;
                    }
                }
            }
            JacobianStrategy::DenseTr1(variant) => {
                let (nx, nw) = (model.nx, model.nx + model.nu);
                let total = n_total(&model);
                let s = it.primal_flat() - p.old.primal_flat();
                let mut sigma = DVector::zeros(n * nx);
                let mut y = DVector::zeros(n * nx);
                let mut gamma = DVector::zeros(total);
                for i in 0..n {
                    let si = &it.lambda[i] - &p.old.lambda[i];
                    let g = model.shooting_vjp(&it.w(i), &si)?;
                    let mut gv = gamma.rows_mut(offset(&model, i), nw);
                    gv += g;
                    let mut gx = gamma.rows_mut(offset(&model, i + 1), nx);
                    gx -= &si;
                    let dy = (&new_f[i] - &it.x[i + 1]) - (&p.old_f[i] - &p.old.x[i + 1]);
                    y.rows_mut(i * nx, nx).copy_from(&dy);
                    sigma.rows_mut(i * nx, nx).copy_from(&si);
                }
                let uv = UpdateVectors { s, sigma, y, gamma };
                let full = self.jacobians.full.as_mut().expect("dense store");
                if dense_tr1_update(full, &uv, variant, self.options.c1).skipped {
                    skipped = 1;
                }
            }
        }
        if let Some(hs) = self.hessians.as_mut() {
            for (i, h) in hs.iter_mut().enumerate() {
                let (w_new, w_old) = (it.w(i), p.old.w(i));
                let mut z = model.costs[i].gradient(&w_new)? - model.costs[i].gradient(&w_old)?;
                if i < n {
                    z += model.shooting_vjp(&w_new, &it.lambda[i])? - model.shooting_vjp(&w_old, &it.lambda[i])?;
                }
                block_sr1_hessian_update(h, &(&w_new - &w_old), &z, self.options.sr1_threshold);
            }
        }
        self.last_skips = skipped;
        Ok(skipped)
    }

    /// Preparation phase: pending update, then the QP data that do not depend
    /// on the measured initial state.
    pub fn prepare(&mut self) -> Result<()> {
        self.apply_pending_update()?;
        if self.prepared.is_some() {
            return Ok(());
        }
        let f = self.shooting_values()?;
        let model = &self.model;
        let it = &self.iterate;
        let n = model.n_intervals;
        let blocks = self.jacobians.effective_blocks(model);
        let regularized = self
            .hessians
            .as_ref()
            .map(|hs| regularize_reduced(hs, &blocks, model.nx, model.nu));
        let mut stages = Vec::with_capacity(n + 1);
        for i in 0..=n {
            let w = it.w(i);
            let mut g = model.costs[i].gradient(&w)?;
            let h = match &regularized {
                Some(hs) => hs[i].clone(),
                None => model.costs[i].gauss_newton(&w)?,
            };
            let bounds = &model.path_bounds[i] - &model.path_rows[i] * &w;
            if i < n && self.jacobians.full.is_none() {
                g += gradient_correction(model, &w, &it.lambda[i], &blocks[i])?;
            }
            let mut st = StageQpData::new(h, g, model.nx).with_inequalities(model.path_rows[i].clone(), bounds);
            if i < n {
                st = st.with_dynamics(blocks[i].clone(), &f[i] - &it.x[i + 1]);
            }
            stages.push(st);
        }
        if let Some(full) = &self.jacobians.full {
            stages = vec![self.dense_stage(&stages, full, &f)?];
        }
        self.prepared = Some(stages);
        Ok(())
    }

    /// Single-stage QP over the whole trajectory with the full Jacobian as
    /// equality rows.
    fn dense_stage(&self, stages: &[StageQpData], full: &DMatrix<f64>, f: &[DVector<f64>]) -> Result<StageQpData> {
        let model = &self.model;
        let it = &self.iterate;
        let (nx, n) = (model.nx, model.n_intervals);
        let total = n_total(model);
        let n_rows: usize = stages.iter().map(|s| s.n_ineq()).sum();
        let mut h = DMatrix::zeros(total, total);
        let mut g = DVector::zeros(total);
        let mut p = DMatrix::zeros(n_rows, total);
        let mut b = DVector::zeros(n_rows);
        let mut lam = DVector::zeros(n * nx);
        let mut c = DVector::zeros(n * nx);
        let mut r0 = 0;
        for (i, st) in stages.iter().enumerate() {
            let (o, nw) = (offset(model, i), st.n_var());
            h.view_mut((o, o), (nw, nw)).copy_from(&st.hessian);
            let mut gv = g.rows_mut(o, nw);
            gv += &st.gradient;
            let k = st.n_ineq();
            p.view_mut((r0, o), (k, nw)).copy_from(&st.ineq_rows);
            b.rows_mut(r0, k).copy_from(&st.ineq_bounds);
            r0 += k;
            if i < n {
                lam.rows_mut(i * nx, nx).copy_from(&it.lambda[i]);
                c.rows_mut(i * nx, nx).copy_from(&(&f[i] - &it.x[i + 1]));
                if it.lambda[i].iter().any(|&v| v != 0.0) {
                    let mut gv = g.rows_mut(o, nw);
                    gv += model.shooting_vjp(&it.w(i), &it.lambda[i])?;
                    let mut gx = g.rows_mut(offset(model, i + 1), nx);
                    gx -= &it.lambda[i];
                }
            }
        }
        g -= full.tr_mul(&lam);
        Ok(StageQpData::new(h, g, nx)
            .with_inequalities(p, b)
            .with_equalities(full.clone(), -c))
    }

    fn dense_row_id(&self, global: usize) -> RowId {
        let mut r = global;
        for i in 0..=self.model.n_intervals {
            let k = self.model.n_rows(i);
            if r < k {
                return RowId { stage: i, row: r };
            }
            r -= k;
        }
        unreachable!("row index out of range")
    }

    fn dense_global_row(&self, id: RowId) -> usize {
        (0..id.stage).map(|i| self.model.n_rows(i)).sum::<usize>() + id.row
    }

    /// The QP built by the last preparation phase.
    pub fn prepared_qp(&self) -> Option<&[StageQpData]> {
        self.prepared.as_deref()
    }

    /// Feedback phase: solve the prepared QP for initial state `x0_hat` and
    /// take the full step. Performs no linearization.
    pub fn feedback(&mut self, x0_hat: &DVector<f64>) -> Result<FeedbackInfo> {
        if self.prepared.is_none() {
            return Err(Error::InvalidArgument("feedback called before prepare".into()));
        }
        let d0 = x0_hat - &self.iterate.x[0];
        let dense = self.jacobians.full.is_some();
        let warm: Vec<RowId> = if dense {
            self.active_set
                .iter()
                .map(|&id| RowId {
                    stage: 0,
                    row: self.dense_global_row(id),
                })
                .collect()
        } else {
            self.active_set.clone()
        };
        let stages = self.prepared.as_ref().unwrap();
        self.counters.qp_solves += 1;
        let sol = solve_qp(stages, &d0, Some(&warm), &self.options.qp)?;
        let sol = if dense { self.split_dense(sol) } else { sol };
        let old = self.iterate.clone();
        let old_f = self.shooting_values()?;
        let mut step2 = 0.0;
        for (i, dw) in sol.dw.iter().enumerate() {
            step2 += dw.norm_squared();
            self.iterate.add_to_w(i, dw);
        }
        self.iterate.lambda = sol.lambda;
        self.iterate.lambda_init = sol.lambda_init;
        self.iterate.mu = sol.mu;
        if !self.iterate.is_finite() {
            return Err(Error::NonFinite("SQP step"));
        }
        self.active_set = sol.active_set;
        self.f_values = None;
        self.prepared = None;
        self.pending = Some(Pending { old, old_f });
        Ok(FeedbackInfo {
            step_norm: step2.sqrt(),
            active_set: self.active_set.clone(),
            qp_iterations: sol.iterations,
            control: self.iterate.u[0].clone(),
        })
    }

    fn split_dense(&self, sol: QpSolution) -> QpSolution {
        let model = &self.model;
        let (nx, n) = (model.nx, model.n_intervals);
        let dw0 = &sol.dw[0];
        let eta = &sol.eta[0];
        let mut r0 = 0;
        let mut mu = Vec::with_capacity(n + 1);
        for i in 0..=n {
            let k = model.n_rows(i);
            mu.push(sol.mu[0].rows(r0, k).into_owned());
            r0 += k;
        }
        QpSolution {
            dw: (0..=n).map(|i| dw0.rows(offset(model, i), model.n_w(i)).into_owned()).collect(),
            lambda: (0..n).map(|i| eta.rows(i * nx, nx).into_owned()).collect(),
            lambda_init: sol.lambda_init,
            mu,
            eta: vec![DVector::zeros(0); n + 1],
            active_set: sol.active_set.iter().map(|id| self.dense_row_id(id.row)).collect(),
            iterations: sol.iterations,
            objective: sol.objective,
        }
    }

    /// Replaces the iterate, e.g. after shifting; cached values are dropped.
    pub fn set_iterate(&mut self, it: Iterate) {
        self.iterate = it;
        self.f_values = None;
        self.prepared = None;
    }

    /// Shifts the iterate and the Jacobian blocks by one interval.
    pub fn shift(&mut self) -> Result<()> {
        self.apply_pending_update()?;
        let it = shift_iterate(&self.iterate);
        self.set_iterate(it);
        self.jacobians.shift(&self.model);
        if let Some(hs) = self.hessians.as_mut() {
            let n = hs.len() - 1;
            if n >= 2 {
                hs.remove(0);
                let last = hs[n - 2].clone();
                hs.insert(n - 1, last);
            }
        }
        Ok(())
    }

    /// Replaces the Jacobian blocks with exact ones at the current iterate.
    pub fn relinearize(&mut self) -> Result<()> {
        self.pending = None;
        self.prepared = None;
        self.jacobians.blocks = exact_blocks(&self.model, &self.iterate)?;
        if self.jacobians.full.is_some() {
            self.jacobians.full = Some(assemble_full(&self.model, &self.jacobians.blocks));
        }
        self.counters.linearizations += 1;
        Ok(())
    }

    pub fn last_skips(&self) -> usize {
        self.last_skips
    }
}

/// Symmetrized Hessian blocks plus `zeta I`, with `zeta` chosen so the
/// Hessian reduced onto the null space of the linearized dynamics (with
/// fixed initial state) has smallest eigenvalue at least 1e-8.
fn regularize_reduced(hs: &[DMatrix<f64>], blocks: &[DMatrix<f64>], nx: usize, nu: usize) -> Vec<DMatrix<f64>> {
    let sym: Vec<DMatrix<f64>> = hs.iter().map(|h| (h + h.transpose()) * 0.5).collect();
    let n = blocks.len();
    let nr = n * nu;
    if nr == 0 {
        return sym;
    }
    // stage-wise rows of the basis: x from forward propagation, u = identity slice
    let mut red = DMatrix::zeros(nr, nr);
    let mut x = DMatrix::zeros(nx, nr);
    for (k, h) in sym.iter().enumerate() {
        let mut z = DMatrix::zeros(h.nrows(), nr);
        z.rows_mut(0, nx).copy_from(&x);
        if k < n {
            for j in 0..nu {
                z[(nx + j, k * nu + j)] = 1.0;
            }
            x = &blocks[k] * &z;
        }
        red += z.tr_mul(&(h * &z));
    }
    let min = ((&red + red.transpose()) * 0.5).symmetric_eigenvalues().min();
    let zeta = (1e-8 - min).max(0.0);
    if zeta == 0.0 {
        return sym;
    }
    sym.into_iter()
        .map(|h| {
            let m = h.nrows();
            h + DMatrix::identity(m, m) * zeta
        })
        .collect()
}

/// Moves every trajectory one interval forward, repeating the last values.
pub fn shift_iterate(it: &Iterate) -> Iterate {
    fn shift<T: Clone>(v: &[T]) -> Vec<T> {
        if v.len() < 2 {
            return v.to_vec();
        }
        let mut out = v[1..].to_vec();
        out.push(v[v.len() - 1].clone());
        out
    }
    // the terminal stage has no control and a differently sized path block
    let mut mu = shift(&it.mu[..it.mu.len() - 1]);
    mu.push(it.mu[it.mu.len() - 1].clone());
    Iterate {
        x: shift(&it.x),
        u: shift(&it.u),
        lambda: shift(&it.lambda),
        lambda_init: it.lambda.first().cloned().unwrap_or_else(|| it.lambda_init.clone()),
        mu,
        k: it.k.as_ref().map(|k| shift(k)),
        omega: it.omega.as_ref().map(|o| shift(o)),
    }
}

fn record(
    solver: &SqpSolver,
    iter: usize,
    step_norm: f64,
    kkt: f64,
    reference: Option<&SolutionReference>,
) -> Result<IterationRecord> {
    let (proj_errors, jac_errors, distance) = match reference {
        Some(r) => {
            let blocks = solver.jacobians.effective_blocks(&solver.model);
            let proj = r.projected_errors(&blocks)?;
            let raw = blocks.iter().zip(&r.jacobians).map(|(a, j)| (a - j).norm()).collect();
            (proj, raw, r.distance(&solver.iterate))
        }
        None => (Vec::new(), Vec::new(), f64::NAN),
    };
    Ok(IterationRecord {
        iter,
        kkt,
        step_norm,
        proj_jac_err: proj_errors.iter().copied().fold(f64::NAN, f64::max),
        proj_errors,
        jac_errors,
        distance,
        n_skipped: solver.last_skips(),
        active_set_size: solver.active_set.len(),
        strategy: solver.options.strategy.name().to_string(),
        n_refactorizations: 0,
        matvec_count: 0,
        outer_product_count: 0,
    })
}

/// Runs SQP iterations from `init` until the KKT residual drops to
/// `options.tol`, the iteration cap is reached, or the residual blows up.
pub fn run_sqp(
    model: &OcpModel,
    init: Iterate,
    options: &SqpOptions,
    reference: Option<&SolutionReference>,
) -> Result<SqpRun> {
    if !(options.tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    let mut solver = SqpSolver::new(model, init, options.clone())?;
    let x0 = model.x0.clone();
    let initial_kkt = kkt_residual(model, &solver.iterate, &x0)?;
    let mut records = Vec::new();
    let mut outcome = RunOutcome::MaxIterations;
    if initial_kkt <= options.tol {
        outcome = RunOutcome::Converged;
    }
    let mut iter = 0;
    while iter < options.max_iter && outcome != RunOutcome::Converged {
        solver.prepare()?;
        let fb = solver.feedback(&x0)?;
        solver.apply_pending_update()?;
        iter += 1;
        let kkt = kkt_residual(model, &solver.iterate, &x0)?;
        records.push(record(&solver, iter, fb.step_norm, kkt, reference)?);
        if !(kkt <= options.divergence_threshold) {
            outcome = RunOutcome::Diverged { iter, residual: kkt };
            break;
        }
        if kkt <= options.tol {
            outcome = RunOutcome::Converged;
        }
    }
    Ok(SqpRun {
        jacobians: solver.jacobians.effective_blocks(model),
        active_set: solver.active_set.clone(),
        solution: solver.iterate,
        records,
        outcome,
        initial_kkt,
    })
}

/// Exact-Jacobian Gauss-Newton SQP to tight tolerance, packaged as the
/// reference for convergence diagnostics.
pub fn reference_solution(model: &OcpModel, init: Iterate, tol: f64, max_iter: usize) -> Result<SolutionReference> {
    let opts = SqpOptions {
        strategy: JacobianStrategy::Exact,
        tol,
        max_iter,
        ..Default::default()
    };
    let run = run_sqp(model, init, &opts, None)?;
    if run.outcome != RunOutcome::Converged {
        let residual = run.records.last().map(|r| r.kkt).unwrap_or(run.initial_kkt);
        return Err(Error::Divergence {
            iter: run.records.len(),
            residual,
        });
    }
    SolutionReference::new(model, run.solution, &run.active_set)
}
