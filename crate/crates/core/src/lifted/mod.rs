//! Lifted collocation SQP: collocation variables are condensed out of each
//! QP and expanded afterwards, with `[D C]`, `C^-1` and `E = C^-1 D` kept
//! current by rank-one updates.

mod direct;
mod update;

pub use direct::DirectCollocationSolver;
pub use update::{tr1_update_dc, LiftedStageState, OpCounters};

use nalgebra::{DMatrix, DVector};

use crate::autodiff::{self, check_dim};
use crate::error::{Error, Result};
use crate::model::{Iterate, OcpModel};
use crate::qp::{solve_qp, QpOptions, RowId, StageQpData};
use crate::sqp::{FeedbackInfo, IterationRecord, JacobianStrategy, PhaseCounters, RunOutcome, UpdateVectors};

/// Settings of the lifted method.
#[derive(Clone, Debug)]
pub struct LiftedOptions {
    /// `Exact` or one of the block TR1 variants.
    pub strategy: JacobianStrategy,
    pub c1: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub divergence_threshold: f64,
    pub qp: QpOptions,
    /// Check `C^-1 C = I` and `E = C^-1 D` after each update. The check
    /// itself costs matrix products, so timing runs switch it off.
    pub drift_check: bool,
    pub drift_tol: f64,
    /// Sherman-Morrison denominator threshold.
    pub sm_tol: f64,
}

impl Default for LiftedOptions {
    fn default() -> Self {
        Self {
            strategy: JacobianStrategy::BlockTr1(crate::sqp::Tr1Variant::Dynamic),
            c1: 1e-8,
            tol: 1e-8,
            max_iter: 100,
            divergence_threshold: 1e6,
            qp: QpOptions::default(),
            drift_check: true,
            drift_tol: 1e-8,
            sm_tol: 1e-12,
        }
    }
}

fn check_strategy(s: JacobianStrategy) -> Result<()> {
    match s {
        JacobianStrategy::Exact | JacobianStrategy::BlockTr1(_) => Ok(()),
        other => Err(Error::Config(format!("strategy `{other}` is not available for lifted collocation"))),
    }
}

/// Collocation residual and its exact transposed product at `(w, K)`.
pub(crate) fn stack_wk(w: &DVector<f64>, k: &DVector<f64>) -> DVector<f64> {
    let mut z = DVector::zeros(w.len() + k.len());
    z.rows_mut(0, w.len()).copy_from(w);
    z.rows_mut(w.len(), k.len()).copy_from(k);
    z
}

pub(crate) fn colloc_residual(model: &OcpModel, w: &DVector<f64>, k: &DVector<f64>) -> Result<DVector<f64>> {
    let v = model.collocation_fn().eval(stack_wk(w, k).as_slice())?;
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("collocation residual"));
    }
    Ok(v)
}

pub(crate) fn colloc_vjp(
    model: &OcpModel,
    w: &DVector<f64>,
    k: &DVector<f64>,
    seed: &DVector<f64>,
) -> Result<DVector<f64>> {
    if seed.iter().all(|&v| v == 0.0) {
        return Ok(DVector::zeros(w.len() + k.len()));
    }
    autodiff::vjp(model.collocation_fn(), stack_wk(w, k).as_slice(), seed.as_slice())
}

pub(crate) fn colloc_jacobians(
    model: &OcpModel,
    w: &DVector<f64>,
    k: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let j = autodiff::jacobian(model.collocation_fn(), stack_wk(w, k).as_slice())?;
    let nw = w.len();
    Ok((j.columns(0, nw).into_owned(), j.columns(nw, k.len()).into_owned()))
}

fn collocation_parts(it: &Iterate) -> Result<(&[DVector<f64>], &[DVector<f64>])> {
    match (&it.k, &it.omega) {
        (Some(k), Some(o)) => Ok((k, o)),
        _ => Err(Error::InvalidArgument("iterate has no collocation variables".into())),
    }
}

/// Exact `D`, `C` at the iterate, one factorization each.
pub fn lifted_initialize(model: &OcpModel, it: &Iterate) -> Result<Vec<LiftedStageState>> {
    let (ks, _) = collocation_parts(it)?;
    check_dim("collocation blocks", model.n_intervals, ks.len())?;
    (0..model.n_intervals)
        .map(|i| {
            let (d, c) = colloc_jacobians(model, &it.w(i), &ks[i])?;
            LiftedStageState::new(d, c)
        })
        .collect()
}

/// Max-norm KKT residual of the direct collocation problem.
pub fn collocation_kkt_residual(model: &OcpModel, it: &Iterate, x0_hat: &DVector<f64>) -> Result<f64> {
    let (ks, omegas) = collocation_parts(it)?;
    let (nx, n) = (model.nx, model.n_intervals);
    let st = model.collocation();
    let mut r = (&it.x[0] - x0_hat).amax();
    for i in 0..=n {
        let w = it.w(i);
        let mut grad = model.costs[i].gradient(&w)?;
        if i < n {
            let nw = w.len();
            let g = colloc_vjp(model, &w, &ks[i], &omegas[i])?;
            grad += g.rows(0, nw);
            let mut xs = grad.rows_mut(0, nx);
            xs += &it.lambda[i];
            let gk = g.rows(nw, st.nk()) + st.increment_transpose(&it.lambda[i]);
            r = r.max(gk.amax());
            let e = &it.x[i] + st.increment(&ks[i]) - &it.x[i + 1];
            r = r.max(e.amax());
            r = r.max(colloc_residual(model, &w, &ks[i])?.amax());
        }
        let prev = if i == 0 { &it.lambda_init } else { &it.lambda[i - 1] };
        let mut xs = grad.rows_mut(0, nx);
        xs -= prev;
        if model.n_rows(i) > 0 {
            grad += model.path_rows[i].tr_mul(&it.mu[i]);
            let slack = &model.path_rows[i] * &w - &model.path_bounds[i];
            for (j, &sl) in slack.iter().enumerate() {
                let m = it.mu[i][j];
                r = r.max(sl.max(0.0)).max((-m).max(0.0)).max((m * sl).abs());
            }
        }
        r = r.max(grad.amax());
    }
    Ok(r)
}

#[derive(Clone, Debug)]
struct Prepared {
    stages: Vec<StageQpData>,
    gamma_k: Vec<DVector<f64>>,
    residuals: Vec<DVector<f64>>,
}

#[derive(Clone, Debug)]
struct Pending {
    old: Iterate,
    dw: Vec<DVector<f64>>,
    gamma_k: Vec<DVector<f64>>,
    residuals: Vec<DVector<f64>>,
}

/// State of the lifted collocation method across iterations.
#[derive(Clone, Debug)]
pub struct LiftedSolver {
    pub model: OcpModel,
    pub options: LiftedOptions,
    pub iterate: Iterate,
    pub states: Vec<LiftedStageState>,
    pub active_set: Vec<RowId>,
    pub ops: OpCounters,
    pub counters: PhaseCounters,
    residuals: Option<Vec<DVector<f64>>>,
    prepared: Option<Prepared>,
    pending: Option<Pending>,
    last_skips: usize,
}

impl LiftedSolver {
    /// Adds collocation variables to the iterate if missing and factorizes
    /// the initial `C` blocks.
    pub fn new(model: &OcpModel, mut iterate: Iterate, options: LiftedOptions) -> Result<Self> {
        check_strategy(options.strategy)?;
        if iterate.k.is_none() || iterate.omega.is_none() {
            model.attach_collocation(&mut iterate)?;
        }
        if !iterate.is_finite() {
            return Err(Error::NonFinite("initial iterate"));
        }
        let states = lifted_initialize(model, &iterate)?;
        Ok(Self {
            model: model.clone(),
            options,
            iterate,
            states,
            active_set: Vec::new(),
            ops: OpCounters::default(),
            counters: PhaseCounters::default(),
            residuals: None,
            prepared: None,
            pending: None,
            last_skips: 0,
        })
    }

    fn residuals(&mut self) -> Result<Vec<DVector<f64>>> {
        if self.residuals.is_none() {
            let ks = self.iterate.k.as_ref().unwrap();
            let r = (0..self.model.n_intervals)
                .map(|i| colloc_residual(&self.model, &self.iterate.w(i), &ks[i]))
                .collect::<Result<Vec<_>>>()?;
            self.residuals = Some(r);
        }
        Ok(self.residuals.clone().unwrap())
    }

    pub fn last_skips(&self) -> usize {
        self.last_skips
    }

    pub fn has_pending_update(&self) -> bool {
        self.pending.is_some()
    }

    pub fn discard_pending_update(&mut self) {
        self.pending = None;
    }

    /// Expansion of the collocation variables and multipliers followed by
    /// the matrix updates. Returns the number of skipped interval updates.
    pub fn apply_pending_update(&mut self) -> Result<usize> {
        let Some(p) = self.pending.take() else {
            return Ok(0);
        };
        self.prepared = None;
        let model = self.model.clone();
        let st = model.collocation();
        let n = model.n_intervals;
        let mut dks = Vec::with_capacity(n);
        {
            let ops = &mut self.ops;
            let it = &mut self.iterate;
            let ks = it.k.as_mut().unwrap();
            let omegas = it.omega.as_mut().unwrap();
            for i in 0..n {
                let s = &self.states[i];
                let rhs = &p.residuals[i] + ops.mul(&s.d, &p.dw[i]);
                let dk = -ops.mul(&s.c_inv, &rhs);
                let v = &p.gamma_k[i] + st.increment_transpose(&it.lambda[i]);
                omegas[i] -= ops.tr_mul(&s.c_inv, &v);
                ks[i] += &dk;
                dks.push(dk);
            }
        }
        self.residuals = None;
        let new_res = self.residuals()?;
        let it = &self.iterate;
        let ks = it.k.as_ref().unwrap();
        let omegas = it.omega.as_ref().unwrap();
        let old_omegas = p.old.omega.as_ref().unwrap();
        let mut skipped = 0;
        for i in 0..n {
            let w = it.w(i);
            match self.options.strategy {
                JacobianStrategy::Exact => {
                    let (d, c) = colloc_jacobians(&model, &w, &ks[i])?;
                    self.states[i] = LiftedStageState::new(d, c)?;
                }
                JacobianStrategy::BlockTr1(variant) => {
                    let sigma = &omegas[i] - &old_omegas[i];
                    let uv = UpdateVectors {
                        s: stack_wk(&p.dw[i], &dks[i]),
                        gamma: colloc_vjp(&model, &w, &ks[i], &sigma)?,
                        sigma,
                        y: &new_res[i] - &p.residuals[i],
                    };
                    let out = tr1_update_dc(
                        &mut self.states[i],
                        &uv,
                        variant,
                        self.options.c1,
                        self.options.sm_tol,
                        &mut self.ops,
                    );
                    if out.skipped {
                        skipped += 1;
                    }
                    if self.options.drift_check {
                        let (a, b) = self.states[i].drift();
                        if a > self.options.drift_tol || b > self.options.drift_tol {
                            self.states[i].refresh()?;
                            self.ops.refactorizations += 1;
                        }
                    }
                }
                _ => unreachable!("checked at construction"),
            }
        }
        if self.options.strategy == JacobianStrategy::Exact {
            self.counters.linearizations += 1;
        }
        self.last_skips = skipped;
        Ok(skipped)
    }

    /// Preparation phase: pending expansion and update, then the condensed QP.
    pub fn prepare(&mut self) -> Result<()> {
        self.apply_pending_update()?;
        if self.prepared.is_some() {
            return Ok(());
        }
        let residuals = self.residuals()?;
        let model = &self.model;
        let st = model.collocation();
        let (nx, n) = (model.nx, model.n_intervals);
        let nw = nx + model.nu;
        let it = &self.iterate;
        let ks = it.k.as_ref().unwrap();
        let omegas = it.omega.as_ref().unwrap();
        let ops = &mut self.ops;
        let mut stages = Vec::with_capacity(n + 1);
        let mut gamma_k = Vec::with_capacity(n);
        for i in 0..=n {
            let w = it.w(i);
            let mut g = model.costs[i].gradient(&w)?;
            let h = model.costs[i].gauss_newton(&w)?;
            let bounds = &model.path_bounds[i] - &model.path_rows[i] * &w;
            let mut dynamics = None;
            if i < n {
                let s = &self.states[i];
                let gam = colloc_vjp(model, &w, &ks[i], &omegas[i])?;
                let gk = gam.rows(nw, st.nk()).into_owned();
                g += gam.rows(0, nw);
                g -= ops.tr_mul(&s.e, &gk);
                // [I 0] - B E, one column at a time
                let mut a = DMatrix::zeros(nx, nw);
                for r in 0..nx {
                    a[(r, r)] = 1.0;
                }
                for j in 0..nw {
                    let col = st.increment(&s.e.column(j).into_owned());
                    let mut aj = a.column_mut(j);
                    aj -= col;
                }
                ops.multiplies += (st.nk() * nw) as u64;
                let cinv_c = ops.mul(&s.c_inv, &residuals[i]);
                let defect = &it.x[i] + st.increment(&ks[i]) - &it.x[i + 1] - st.increment(&cinv_c);
                dynamics = Some((a, defect));
                gamma_k.push(gk);
            }
            let mut stage =
                StageQpData::new(h, g, nx).with_inequalities(model.path_rows[i].clone(), bounds);
            if let Some((a, defect)) = dynamics {
                stage = stage.with_dynamics(a, defect);
            }
            stages.push(stage);
        }
        self.prepared = Some(Prepared {
            stages,
            gamma_k,
            residuals,
        });
        Ok(())
    }

    pub fn prepared_qp(&self) -> Option<&[StageQpData]> {
        self.prepared.as_ref().map(|p| p.stages.as_slice())
    }

    /// Feedback phase: condensed QP solve and full step in `(w, lambda, mu)`.
    pub fn feedback(&mut self, x0_hat: &DVector<f64>) -> Result<FeedbackInfo> {
        let Some(prep) = self.prepared.take() else {
            return Err(Error::InvalidArgument("feedback called before prepare".into()));
        };
        let d0 = x0_hat - &self.iterate.x[0];
        self.counters.qp_solves += 1;
        let sol = match solve_qp(&prep.stages, &d0, Some(&self.active_set), &self.options.qp) {
            Ok(s) => s,
            Err(e) => {
                self.prepared = Some(prep);
                return Err(e);
            }
        };
        let old = self.iterate.clone();
        let mut step2 = 0.0;
        for (i, dw) in sol.dw.iter().enumerate() {
            step2 += dw.norm_squared();
            self.iterate.add_to_w(i, dw);
        }
        self.iterate.lambda = sol.lambda;
        self.iterate.lambda_init = sol.lambda_init;
        self.iterate.mu = sol.mu;
        if !self.iterate.is_finite() {
            return Err(Error::NonFinite("lifted step"));
        }
        self.active_set = sol.active_set;
        self.residuals = None;
        self.pending = Some(Pending {
            old,
            dw: sol.dw,
            gamma_k: prep.gamma_k,
            residuals: prep.residuals,
        });
        Ok(FeedbackInfo {
            step_norm: step2.sqrt(),
            active_set: self.active_set.clone(),
            qp_iterations: sol.iterations,
            control: self.iterate.u[0].clone(),
        })
    }

    pub fn set_iterate(&mut self, it: Iterate) {
        self.iterate = it;
        self.residuals = None;
        self.prepared = None;
    }

    /// Shifts the iterate (including `K`, `omega`) and the interval matrices.
    pub fn shift(&mut self) -> Result<()> {
        self.apply_pending_update()?;
        let it = crate::sqp::shift_iterate(&self.iterate);
        self.set_iterate(it);
        if self.states.len() > 1 {
            self.states.remove(0);
            let last = self.states.last().unwrap().clone();
            self.states.push(last);
        }
        Ok(())
    }

    /// Exact `D`, `C` and a fresh factorization at the current iterate.
    pub fn relinearize(&mut self) -> Result<()> {
        self.pending = None;
        self.prepared = None;
        self.states = lifted_initialize(&self.model, &self.iterate)?;
        self.counters.linearizations += 1;
        Ok(())
    }

    /// Largest drift of the maintained matrices over all intervals.
    pub fn max_drift(&self) -> (f64, f64) {
        self.states.iter().map(|s| s.drift()).fold((0.0f64, 0.0f64), |(a, b), (x, y)| (a.max(x), b.max(y)))
    }
}

/// Result of [`run_lifted`].
#[derive(Clone, Debug)]
pub struct LiftedRun {
    pub solution: Iterate,
    pub records: Vec<IterationRecord>,
    pub outcome: RunOutcome,
    pub initial_kkt: f64,
    pub states: Vec<LiftedStageState>,
    pub ops: OpCounters,
}

/// Lifted collocation SQP iterations until the collocation KKT residual
/// reaches `options.tol`.
pub fn run_lifted(model: &OcpModel, init: Iterate, options: &LiftedOptions) -> Result<LiftedRun> {
    if !(options.tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    let mut solver = LiftedSolver::new(model, init, options.clone())?;
    let x0 = model.x0.clone();
    let initial_kkt = collocation_kkt_residual(model, &solver.iterate, &x0)?;
    let mut outcome = if initial_kkt <= options.tol {
        RunOutcome::Converged
    } else {
        RunOutcome::MaxIterations
    };
    let mut records = Vec::new();
    let mut iter = 0;
    while iter < options.max_iter && outcome != RunOutcome::Converged {
        solver.prepare()?;
        let fb = solver.feedback(&x0)?;
        solver.apply_pending_update()?;
        iter += 1;
        let kkt = collocation_kkt_residual(model, &solver.iterate, &x0)?;
        records.push(IterationRecord {
            iter,
            kkt,
            step_norm: fb.step_norm,
            proj_jac_err: f64::NAN,
            proj_errors: Vec::new(),
            jac_errors: Vec::new(),
            distance: f64::NAN,
            n_skipped: solver.last_skips(),
            active_set_size: solver.active_set.len(),
            strategy: format!("lifted_{}", options.strategy),
            n_refactorizations: solver.ops.refactorizations,
            matvec_count: solver.ops.matvecs,
            outer_product_count: solver.ops.outer_products,
        });
        if !(kkt <= options.divergence_threshold) {
            outcome = RunOutcome::Diverged { iter, residual: kkt };
            break;
        }
        if kkt <= options.tol {
            outcome = RunOutcome::Converged;
        }
    }
    Ok(LiftedRun {
        solution: solver.iterate,
        records,
        outcome,
        initial_kkt,
        states: solver.states,
        ops: solver.ops,
    })
}
