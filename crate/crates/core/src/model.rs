//! Discrete-time optimal control problems: multiple-shooting data, iterates,
//! the chain-of-masses benchmark and KKT measurements.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, check_dim, DiffFn, Real, VectorFunction, WeightedResidual};
use crate::error::{Error, Result};
use crate::integrator::{self, CollocationFn, CollocationStage, Dynamics, Rk4Map};

/// Least-squares term `0.5 |R(w)|^2`.
#[derive(Clone, Debug)]
pub struct LeastSquares {
    pub residual: VectorFunction,
    constant_jacobian: Option<DMatrix<f64>>,
    constant_hessian: Option<DMatrix<f64>>,
}

impl LeastSquares {
    pub fn new(residual: VectorFunction) -> Self {
        let constant_jacobian = if residual.is_affine() {
            let zero = vec![0.0; residual.n_in()];
            Some(autodiff::jacobian(&residual, &zero).expect("dimension from function"))
        } else {
            None
        };
        let constant_hessian = constant_jacobian.as_ref().map(|j| j.tr_mul(j));
        Self {
            residual,
            constant_jacobian,
            constant_hessian,
        }
    }

    pub fn n_in(&self) -> usize {
        self.residual.n_in()
    }

    pub fn value(&self, w: &DVector<f64>) -> f64 {
        0.5 * self.residual.eval(w.as_slice()).unwrap().norm_squared()
    }

    fn jac(&self, w: &DVector<f64>) -> DMatrix<f64> {
        match &self.constant_jacobian {
            Some(j) => j.clone(),
            None => autodiff::jacobian(&self.residual, w.as_slice()).unwrap(),
        }
    }

    /// Gradient `J^T R`.
    pub fn gradient(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("least-squares argument", self.n_in(), w.len())?;
        let r = self.residual.eval(w.as_slice())?;
        Ok(match &self.constant_jacobian {
            Some(j) => j.tr_mul(&r),
            None => autodiff::vjp(&self.residual, w.as_slice(), r.as_slice())?,
        })
    }

    /// Gauss-Newton Hessian `J^T J`.
    pub fn gauss_newton(&self, w: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim("least-squares argument", self.n_in(), w.len())?;
        if let Some(h) = &self.constant_hessian {
            return Ok(h.clone());
        }
        let j = self.jac(w);
        Ok(j.tr_mul(&j))
    }
}

/// Multiple-shooting optimal control problem with least-squares costs and
/// affine path constraints `P_i w_i <= p_i`.
#[derive(Clone, Debug)]
pub struct OcpModel {
    pub nx: usize,
    pub nu: usize,
    pub n_intervals: usize,
    pub horizon: f64,
    pub dynamics: Dynamics,
    /// One term per stage, the last one over `x_N` only.
    pub costs: Vec<LeastSquares>,
    pub path_rows: Vec<DMatrix<f64>>,
    pub path_bounds: Vec<DVector<f64>>,
    pub x0: DVector<f64>,
    pub rk4_substeps: usize,
    /// Steady state `(x, u)` the objective tracks, when known.
    pub reference: Option<(DVector<f64>, DVector<f64>)>,
    shooting: Option<VectorFunction>,
    custom_shooting: bool,
    collocation: CollocationStage,
    collocation_fn: VectorFunction,
}

impl OcpModel {
    pub fn new(
        dynamics: Dynamics,
        n_intervals: usize,
        horizon: f64,
        stage_residuals: Vec<VectorFunction>,
        terminal_residual: VectorFunction,
        x0: DVector<f64>,
    ) -> Result<Self> {
        if n_intervals == 0 {
            return Err(Error::InvalidArgument("need at least one interval".into()));
        }
        if !(horizon > 0.0) {
            return Err(Error::InvalidArgument("horizon must be positive".into()));
        }
        let (nx, nu) = (dynamics.nx(), dynamics.nu());
        check_dim("stage residual count", n_intervals, stage_residuals.len())?;
        check_dim("initial state", nx, x0.len())?;
        for r in &stage_residuals {
            check_dim("stage residual input", nx + nu, r.n_in())?;
        }
        check_dim("terminal residual input", nx, terminal_residual.n_in())?;
        let mut costs: Vec<LeastSquares> = stage_residuals.into_iter().map(LeastSquares::new).collect();
        costs.push(LeastSquares::new(terminal_residual));
        let path_rows = (0..=n_intervals)
            .map(|i| DMatrix::zeros(0, if i < n_intervals { nx + nu } else { nx }))
            .collect();
        let path_bounds = vec![DVector::zeros(0); n_intervals + 1];
        let collocation = CollocationStage::gauss_legendre(2, horizon / n_intervals as f64, nx)?;
        let collocation_fn = VectorFunction::new(CollocationFn {
            dynamics: dynamics.clone(),
            stage: collocation.clone(),
        });
        let mut m = Self {
            nx,
            nu,
            n_intervals,
            horizon,
            dynamics,
            costs,
            path_rows,
            path_bounds,
            x0,
            rk4_substeps: 10,
            reference: None,
            shooting: None,
            custom_shooting: false,
            collocation,
            collocation_fn,
        };
        m.rebuild()?;
        Ok(m)
    }

    fn rebuild(&mut self) -> Result<()> {
        if self.custom_shooting {
            // keep the user map
        } else if self.dynamics.is_explicit() {
            self.shooting = Some(VectorFunction::new(Rk4Map::new(
                &self.dynamics,
                self.interval(),
                self.rk4_substeps,
            )?));
        } else {
            self.shooting = None;
        }
        self.collocation = CollocationStage::new(self.collocation.tableau.clone(), self.interval(), self.nx);
        self.collocation_fn = VectorFunction::new(CollocationFn {
            dynamics: self.dynamics.clone(),
            stage: self.collocation.clone(),
        });
        Ok(())
    }

    pub fn with_path_constraints(
        mut self,
        rows: Vec<DMatrix<f64>>,
        bounds: Vec<DVector<f64>>,
    ) -> Result<Self> {
        check_dim("path row blocks", self.n_intervals + 1, rows.len())?;
        check_dim("path bound blocks", self.n_intervals + 1, bounds.len())?;
        for (i, (p, b)) in rows.iter().zip(&bounds).enumerate() {
            check_dim("path row width", self.n_w(i), p.ncols())?;
            check_dim("path bound length", p.nrows(), b.len())?;
        }
        self.path_rows = rows;
        self.path_bounds = bounds;
        Ok(self)
    }

    /// Replaces the RK4 shooting map by a given discrete-time map
    /// `(x_i, u_i) -> x_{i+1}`.
    pub fn with_shooting_map(mut self, map: VectorFunction) -> Result<Self> {
        check_dim("shooting map input", self.nx + self.nu, map.n_in())?;
        check_dim("shooting map output", self.nx, map.n_out())?;
        self.shooting = Some(map);
        self.custom_shooting = true;
        Ok(self)
    }

    pub fn with_rk4_substeps(mut self, n: usize) -> Result<Self> {
        self.rk4_substeps = n;
        self.rebuild()?;
        Ok(self)
    }

    pub fn with_collocation_stages(mut self, s: usize) -> Result<Self> {
        self.collocation = CollocationStage::gauss_legendre(s, self.interval(), self.nx)?;
        self.rebuild()?;
        Ok(self)
    }

    /// Length of one shooting interval.
    pub fn interval(&self) -> f64 {
        self.horizon / self.n_intervals as f64
    }

    /// Size of stage variable `w_i`.
    pub fn n_w(&self, i: usize) -> usize {
        if i < self.n_intervals {
            self.nx + self.nu
        } else {
            self.nx
        }
    }

    pub fn n_rows(&self, i: usize) -> usize {
        self.path_rows[i].nrows()
    }

    pub fn collocation(&self) -> &CollocationStage {
        &self.collocation
    }

    pub fn collocation_fn(&self) -> &VectorFunction {
        &self.collocation_fn
    }

    pub fn shooting_fn(&self) -> Result<&VectorFunction> {
        self.shooting.as_ref().ok_or(Error::ImplicitOnly)
    }

    /// `F_i(w_i)`.
    pub fn shoot(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        let v = self.shooting_fn()?.eval(w.as_slice())?;
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("shooting map"));
        }
        Ok(v)
    }

    /// `dF_i/dw_i`.
    pub fn shooting_jacobian(&self, w: &DVector<f64>) -> Result<DMatrix<f64>> {
        autodiff::jacobian(self.shooting_fn()?, w.as_slice())
    }

    /// `(dF_i/dw_i)^T seed`.
    pub fn shooting_vjp(&self, w: &DVector<f64>, seed: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("shooting argument", self.nx + self.nu, w.len())?;
        if self.custom_shooting {
            return autodiff::vjp(self.shooting_fn()?, w.as_slice(), seed.as_slice());
        }
        integrator::rk4_adjoint(
            &self.dynamics,
            self.interval(),
            &w.rows(0, self.nx).into_owned(),
            &w.rows(self.nx, self.nu).into_owned(),
            self.rk4_substeps,
            seed,
        )
    }

    /// Objective value at an iterate.
    pub fn objective(&self, it: &Iterate) -> f64 {
        (0..=self.n_intervals).map(|i| self.costs[i].value(&it.w(i))).sum()
    }

    /// Zero-multiplier iterate with constant state and control trajectories.
    pub fn constant_iterate(&self, x: &DVector<f64>, u: &DVector<f64>) -> Iterate {
        Iterate {
            x: vec![x.clone(); self.n_intervals + 1],
            u: vec![u.clone(); self.n_intervals],
            lambda: vec![DVector::zeros(self.nx); self.n_intervals],
            lambda_init: DVector::zeros(self.nx),
            mu: (0..=self.n_intervals).map(|i| DVector::zeros(self.n_rows(i))).collect(),
            k: None,
            omega: None,
        }
    }

    /// Default initial guess: the initial state held over the horizon with
    /// the reference control (or zero).
    pub fn initial_guess(&self) -> Iterate {
        let u = match &self.reference {
            Some((_, u)) => u.clone(),
            None => DVector::zeros(self.nu),
        };
        self.constant_iterate(&self.x0, &u)
    }

    /// Adds collocation variables, each interval solved for its own `(x_i, u_i)`,
    /// and zero collocation multipliers.
    pub fn attach_collocation(&self, it: &mut Iterate) -> Result<()> {
        let st = &self.collocation;
        let mut ks = Vec::with_capacity(self.n_intervals);
        for i in 0..self.n_intervals {
            let guess = integrator::collocation_guess(&self.dynamics, st, &it.x[i], &it.u[i]);
            ks.push(integrator::collocation_solve(
                &self.dynamics,
                st,
                &it.x[i],
                &it.u[i],
                Some(&guess),
            )?);
        }
        it.k = Some(ks);
        it.omega = Some(vec![DVector::zeros(st.nk()); self.n_intervals]);
        Ok(())
    }

    fn check_iterate(&self, it: &Iterate) -> Result<()> {
        check_dim("iterate states", self.n_intervals + 1, it.x.len())?;
        check_dim("iterate controls", self.n_intervals, it.u.len())?;
        check_dim("iterate multipliers", self.n_intervals, it.lambda.len())?;
        check_dim("iterate path multipliers", self.n_intervals + 1, it.mu.len())?;
        for x in &it.x {
            check_dim("state", self.nx, x.len())?;
        }
        for u in &it.u {
            check_dim("control", self.nu, u.len())?;
        }
        for (i, m) in it.mu.iter().enumerate() {
            check_dim("path multiplier", self.n_rows(i), m.len())?;
        }
        Ok(())
    }
}

/// Primal-dual state of the SQP method.
#[derive(Clone, Debug, PartialEq)]
pub struct Iterate {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    /// Continuity multipliers, one per interval.
    pub lambda: Vec<DVector<f64>>,
    /// Multiplier of the initial-value constraint.
    pub lambda_init: DVector<f64>,
    /// Path-constraint multipliers, one block per stage.
    pub mu: Vec<DVector<f64>>,
    pub k: Option<Vec<DVector<f64>>>,
    pub omega: Option<Vec<DVector<f64>>>,
}

impl Iterate {
    pub fn n_intervals(&self) -> usize {
        self.u.len()
    }

    /// Stage variable `w_i = (x_i, u_i)`, or `x_N` for the last stage.
    pub fn w(&self, i: usize) -> DVector<f64> {
        if i < self.u.len() {
            let (nx, nu) = (self.x[i].len(), self.u[i].len());
            let mut w = DVector::zeros(nx + nu);
            w.rows_mut(0, nx).copy_from(&self.x[i]);
            w.rows_mut(nx, nu).copy_from(&self.u[i]);
            w
        } else {
            self.x[i].clone()
        }
    }

    pub fn add_to_w(&mut self, i: usize, dw: &DVector<f64>) {
        let nx = self.x[i].len();
        self.x[i] += dw.rows(0, nx);
        if i < self.u.len() {
            let nu = self.u[i].len();
            self.u[i] += dw.rows(nx, nu);
        }
    }

    /// All primal and dual entries flattened, for comparisons.
    pub fn flatten(&self) -> DVector<f64> {
        let mut v: Vec<f64> = Vec::new();
        for x in &self.x {
            v.extend(x.iter());
        }
        for u in &self.u {
            v.extend(u.iter());
        }
        for l in &self.lambda {
            v.extend(l.iter());
        }
        v.extend(self.lambda_init.iter());
        for m in &self.mu {
            v.extend(m.iter());
        }
        if let Some(k) = &self.k {
            for kk in k {
                v.extend(kk.iter());
            }
        }
        if let Some(o) = &self.omega {
            for oo in o {
                v.extend(oo.iter());
            }
        }
        DVector::from_vec(v)
    }

    pub fn primal_flat(&self) -> DVector<f64> {
        let mut v: Vec<f64> = Vec::new();
        for i in 0..=self.n_intervals() {
            v.extend(self.w(i).iter());
        }
        DVector::from_vec(v)
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

/// Objective gradient with the adjoint correction
/// `grad l_i + (dF_i/dw_i - A_i)^T lambda_i`, one vector per stage.
pub fn evaluate_lagrangian_gradient(
    model: &OcpModel,
    it: &Iterate,
    jacobians: &[DMatrix<f64>],
) -> Result<Vec<DVector<f64>>> {
    model.check_iterate(it)?;
    check_dim("jacobian blocks", model.n_intervals, jacobians.len())?;
    let mut out = Vec::with_capacity(model.n_intervals + 1);
    for i in 0..=model.n_intervals {
        let w = it.w(i);
        let mut g = model.costs[i].gradient(&w)?;
        if i < model.n_intervals {
            g += gradient_correction(model, &w, &it.lambda[i], &jacobians[i])?;
        }
        out.push(g);
    }
    Ok(out)
}

/// `(dF/dw - A)^T lambda` for one stage.
pub fn gradient_correction(
    model: &OcpModel,
    w: &DVector<f64>,
    lambda: &DVector<f64>,
    a: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    if lambda.iter().all(|&l| l == 0.0) {
        return Ok(DVector::zeros(w.len()));
    }
    Ok(model.shooting_vjp(w, lambda)? - a.tr_mul(lambda))
}

/// Components of the NLP KKT residual, each in max norm.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KktBreakdown {
    pub stationarity: f64,
    pub defects: f64,
    pub feasibility: f64,
    pub dual_sign: f64,
    pub complementarity: f64,
}

impl KktBreakdown {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.defects)
            .max(self.feasibility)
            .max(self.dual_sign)
            .max(self.complementarity)
    }
}

/// KKT residual of the multiple-shooting NLP for initial state `x0_hat`.
pub fn kkt_breakdown(model: &OcpModel, it: &Iterate, x0_hat: &DVector<f64>) -> Result<KktBreakdown> {
    model.check_iterate(it)?;
    check_dim("initial state", model.nx, x0_hat.len())?;
    let (nx, n) = (model.nx, model.n_intervals);
    let mut k = KktBreakdown {
        defects: (&it.x[0] - x0_hat).amax(),
        ..Default::default()
    };
    for i in 0..=n {
        let w = it.w(i);
        let mut grad = model.costs[i].gradient(&w)?;
        if i < n {
            grad += model.shooting_vjp(&w, &it.lambda[i])?;
            let defect = model.shoot(&w)? - &it.x[i + 1];
            k.defects = k.defects.max(defect.amax());
        }
        let prev = if i == 0 { &it.lambda_init } else { &it.lambda[i - 1] };
        let mut xs = grad.rows_mut(0, nx);
        xs -= prev;
        if model.n_rows(i) > 0 {
            grad += model.path_rows[i].tr_mul(&it.mu[i]);
            let slack = &model.path_rows[i] * &w - &model.path_bounds[i];
            for (r, &sl) in slack.iter().enumerate() {
                let m = it.mu[i][r];
                k.feasibility = k.feasibility.max(sl.max(0.0));
                k.dual_sign = k.dual_sign.max((-m).max(0.0));
                k.complementarity = k.complementarity.max((m * sl).abs());
            }
        }
        k.stationarity = k.stationarity.max(grad.amax());
    }
    Ok(k)
}

/// Max-norm KKT residual of the multiple-shooting NLP.
pub fn kkt_residual(model: &OcpModel, it: &Iterate, x0_hat: &DVector<f64>) -> Result<f64> {
    Ok(kkt_breakdown(model, it, x0_hat)?.max())
}

// ---------------------------------------------------------------------------
// Chain of masses

/// How the control enters the free end of the chain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainInput {
    /// The end mass's acceleration is the control.
    #[default]
    Velocity,
    /// The control is a force on the end mass.
    Force,
}

/// Physical and problem parameters of the chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainParams {
    pub mass: f64,
    pub spring: f64,
    pub rest_length: f64,
    pub gravity: [f64; 3],
    pub wall_y: f64,
    /// Position the free end is pinned at for the steady state.
    pub anchor: [f64; 3],
    pub input: ChainInput,
    pub terminal_weight: f64,
    pub state_weight: f64,
    pub control_weight: f64,
    /// Control offset applied during the pre-simulation that perturbs the
    /// initial state away from rest.
    pub perturbation: [f64; 3],
    pub perturbation_time: f64,
}

impl Default for ChainParams {
    fn default() -> Self {
        Self {
            mass: 0.03,
            spring: 0.1,
            rest_length: 0.033,
            gravity: [0.0, 0.0, -9.81],
            wall_y: -0.01,
            anchor: [1.0, 0.0, 0.0],
            input: ChainInput::Velocity,
            terminal_weight: 1.0,
            state_weight: 0.1,
            control_weight: 0.05,
            perturbation: [-1.0, 1.0, 1.0],
            perturbation_time: 0.4,
        }
    }
}

/// Right-hand side of the chain; state per free mass is `(p, v)`.
#[derive(Clone, Debug)]
pub struct ChainRhs {
    pub n_masses: usize,
    pub params: ChainParams,
}

/// `D (1 - L/|d|) d` for spring extension `d`.
fn spring_force<S: Real>(d: &[S; 3], stiffness: f64, rest: f64) -> [S; 3] {
    let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let scale = (S::cst(1.0) - S::cst(rest) / len) * stiffness;
    [d[0] * scale, d[1] * scale, d[2] * scale]
}

impl ChainRhs {
    fn free(&self) -> usize {
        self.n_masses - 1
    }

    /// Accelerations of all free masses given their positions.
    fn accelerations<S: Real>(&self, pos: &[[S; 3]], u: &[S]) -> Vec<[S; 3]> {
        let p = &self.params;
        let nf = pos.len();
        // force[j] is the spring force pulling mass j towards mass j-1's side,
        // i.e. the force between masses j and j+1 (origin is mass 0)
        let mut springs = Vec::with_capacity(nf);
        for j in 0..nf {
            let prev = if j == 0 {
                [S::zero(); 3]
            } else {
                pos[j - 1]
            };
            let d = [pos[j][0] - prev[0], pos[j][1] - prev[1], pos[j][2] - prev[2]];
            springs.push(spring_force(&d, p.spring, p.rest_length));
        }
        let mut acc = Vec::with_capacity(nf);
        for j in 0..nf {
            let mut a = [S::zero(); 3];
            let last = j + 1 == nf;
            if last && p.input == ChainInput::Velocity {
                for c in 0..3 {
                    a[c] = u[c];
                }
            } else {
                for c in 0..3 {
                    let mut f = -springs[j][c];
                    if !last {
                        f += springs[j + 1][c];
                    } else {
                        f += u[c];
                    }
                    a[c] = f / p.mass + p.gravity[c];
                }
            }
            acc.push(a);
        }
        acc
    }
}

impl DiffFn for ChainRhs {
    fn n_in(&self) -> usize {
        6 * self.free() + 3
    }
    fn n_out(&self) -> usize {
        6 * self.free()
    }
    fn eval<S: Real>(&self, xu: &[S], out: &mut [S]) {
        let nf = self.free();
        let pos: Vec<[S; 3]> = (0..nf)
            .map(|j| [xu[6 * j], xu[6 * j + 1], xu[6 * j + 2]])
            .collect();
        let acc = self.accelerations(&pos, &xu[6 * nf..]);
        for j in 0..nf {
            for c in 0..3 {
                out[6 * j + c] = xu[6 * j + 3 + c];
                out[6 * j + 3 + c] = acc[j][c];
            }
        }
    }
}

/// Force balance on the intermediate masses with the end pinned.
struct ChainBalance<'a> {
    rhs: &'a ChainRhs,
}

impl DiffFn for ChainBalance<'_> {
    fn n_in(&self) -> usize {
        3 * (self.rhs.free() - 1)
    }
    fn n_out(&self) -> usize {
        3 * (self.rhs.free() - 1)
    }
    fn eval<S: Real>(&self, q: &[S], out: &mut [S]) {
        let nf = self.rhs.free();
        let a = self.rhs.params.anchor;
        let mut pos: Vec<[S; 3]> = (0..nf - 1)
            .map(|j| [q[3 * j], q[3 * j + 1], q[3 * j + 2]])
            .collect();
        pos.push([S::cst(a[0]), S::cst(a[1]), S::cst(a[2])]);
        let zero = [S::zero(); 3];
        let acc = self.rhs.accelerations(&pos, &zero);
        for j in 0..nf - 1 {
            for c in 0..3 {
                out[3 * j + c] = acc[j][c];
            }
        }
    }
}

// the balance borrows the rhs, so it is evaluated directly rather than boxed
fn balance_jacobian(b: &ChainBalance<'_>, q: &[f64]) -> DMatrix<f64> {
    use crate::autodiff::Dual;
    let n = q.len();
    let mut j = DMatrix::zeros(n, n);
    let mut x: Vec<Dual> = q.iter().map(|&v| Dual::cst(v)).collect();
    let mut out = vec![Dual::default(); n];
    for c in 0..n {
        x[c].deriv = 1.0;
        b.eval(&x, &mut out);
        x[c].deriv = 0.0;
        for r in 0..n {
            j[(r, c)] = out[r].deriv;
        }
    }
    j
}

/// Rest configuration of the chain: state (zero velocities) and control.
pub fn chain_steady_state(n_masses: usize, params: &ChainParams) -> Result<(DVector<f64>, DVector<f64>)> {
    if n_masses < 2 {
        return Err(Error::InvalidArgument("chain needs at least two masses".into()));
    }
    let rhs = ChainRhs {
        n_masses,
        params: params.clone(),
    };
    let nf = n_masses - 1;
    let a = params.anchor;
    // straight line from the origin to the anchor, sagging slightly
    let mut q = DVector::from_fn(3 * (nf - 1), |k, _| {
        let j = (k / 3 + 1) as f64 / nf as f64;
        let c = k % 3;
        a[c] * j - if c == 2 { 0.1 * j * (1.0 - j) } else { 0.0 }
    });
    let bal = ChainBalance { rhs: &rhs };
    let resid = |q: &DVector<f64>| {
        let mut out = vec![0.0; q.len()];
        bal.eval(q.as_slice(), &mut out);
        DVector::from_vec(out)
    };
    if !q.is_empty() {
        let mut r = resid(&q);
        let mut converged = r.amax() <= 1e-10;
        for _ in 0..200 {
            if converged {
                break;
            }
            let j = balance_jacobian(&bal, q.as_slice());
            let dq = j.lu().solve(&r).ok_or(Error::Singular("chain balance"))?;
            let mut t = 1.0;
            loop {
                let trial = &q - &dq * t;
                let rt = resid(&trial);
                if rt.norm() < (1.0 - 1e-4 * t) * r.norm() || t < 1e-8 {
                    q = trial;
                    r = rt;
                    break;
                }
                t *= 0.5;
            }
            converged = r.amax() <= 1e-10;
        }
        if !converged {
            return Err(Error::NewtonFailure("chain steady state"));
        }
    }
    let mut x = DVector::zeros(6 * nf);
    for j in 0..nf - 1 {
        for c in 0..3 {
            x[6 * j + c] = q[3 * j + c];
        }
    }
    for c in 0..3 {
        x[6 * (nf - 1) + c] = a[c];
    }
    let mut u = DVector::zeros(3);
    if params.input == ChainInput::Force {
        // hold the end mass: u = spring pull - m g
        let prev: [f64; 3] = if nf == 1 {
            [0.0; 3]
        } else {
            [x[6 * (nf - 2)], x[6 * (nf - 2) + 1], x[6 * (nf - 2) + 2]]
        };
        let d = [a[0] - prev[0], a[1] - prev[1], a[2] - prev[2]];
        let f = spring_force(&d, params.spring, params.rest_length);
        for c in 0..3 {
            u[c] = f[c] - params.mass * params.gravity[c];
        }
    }
    Ok((x, u))
}

/// Chain-of-masses tracking problem with a wall constraint on every free
/// mass's `y` position.
pub fn chain_of_masses(n_masses: usize, n_intervals: usize, horizon: f64) -> Result<OcpModel> {
    chain_of_masses_with(n_masses, n_intervals, horizon, &ChainParams::default())
}

pub fn chain_of_masses_with(
    n_masses: usize,
    n_intervals: usize,
    horizon: f64,
    params: &ChainParams,
) -> Result<OcpModel> {
    if n_masses < 2 {
        return Err(Error::InvalidArgument("chain needs at least two masses".into()));
    }
    let nf = n_masses - 1;
    let (nx, nu) = (6 * nf, 3);
    let rhs = ChainRhs {
        n_masses,
        params: params.clone(),
    };
    let dynamics = Dynamics::explicit(VectorFunction::new(rhs), nx, nu)?;
    let (xs, us) = chain_steady_state(n_masses, params)?;

    let mut weights = DVector::from_element(nx + nu, params.state_weight.sqrt());
    weights.rows_mut(nx, nu).fill(params.control_weight.sqrt());
    let mut reference = DVector::zeros(nx + nu);
    reference.rows_mut(0, nx).copy_from(&xs);
    reference.rows_mut(nx, nu).copy_from(&us);
    let stage = VectorFunction::new(WeightedResidual {
        weights,
        reference,
    });
    let terminal = VectorFunction::new(WeightedResidual {
        weights: DVector::from_element(nx, params.terminal_weight.sqrt()),
        reference: xs.clone(),
    });

    // perturbed start: hold an offset control for a short while
    let pert = DVector::from_fn(3, |c, _| us[c] + params.perturbation[c]);
    let x0 = if params.perturbation_time > 0.0 {
        let steps = ((params.perturbation_time / 0.01).ceil() as usize).max(1);
        integrator::rk4_map(&dynamics, params.perturbation_time, &xs, &pert, steps)?
    } else {
        xs.clone()
    };

    let wall_rows = |width: usize| {
        let mut p = DMatrix::zeros(nf, width);
        for j in 0..nf {
            p[(j, 6 * j + 1)] = -1.0;
        }
        p
    };
    let mut rows = Vec::with_capacity(n_intervals + 1);
    let mut bounds = Vec::with_capacity(n_intervals + 1);
    for i in 0..=n_intervals {
        let width = if i < n_intervals { nx + nu } else { nx };
        if i == 0 {
            rows.push(DMatrix::zeros(0, width));
            bounds.push(DVector::zeros(0));
        } else {
            rows.push(wall_rows(width));
            bounds.push(DVector::from_element(nf, -params.wall_y));
        }
    }
    let mut m = OcpModel::new(dynamics, n_intervals, horizon, vec![stage; n_intervals], terminal, x0)?
        .with_path_constraints(rows, bounds)?;
    m.reference = Some((xs, us));
    Ok(m)
}

/// Problem section of an experiment configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub problem: String,
    pub n_m: usize,
    #[serde(rename = "N")]
    pub n_intervals: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(default = "default_wall")]
    pub wall_y: f64,
    #[serde(default)]
    pub input: ChainInput,
    #[serde(default)]
    pub mass: Option<f64>,
    #[serde(default)]
    pub spring: Option<f64>,
    #[serde(default)]
    pub rest_length: Option<f64>,
    #[serde(default)]
    pub perturbation: Option<[f64; 3]>,
    #[serde(default)]
    pub perturbation_time: Option<f64>,
}

fn default_wall() -> f64 {
    ChainParams::default().wall_y
}

impl ProblemConfig {
    pub fn chain(n_m: usize, n_intervals: usize, horizon: f64) -> Self {
        Self {
            problem: "chain".into(),
            n_m,
            n_intervals,
            horizon,
            wall_y: default_wall(),
            input: ChainInput::Velocity,
            mass: None,
            spring: None,
            rest_length: None,
            perturbation: None,
            perturbation_time: None,
        }
    }

    pub fn params(&self) -> ChainParams {
        let d = ChainParams::default();
        ChainParams {
            mass: self.mass.unwrap_or(d.mass),
            spring: self.spring.unwrap_or(d.spring),
            rest_length: self.rest_length.unwrap_or(d.rest_length),
            wall_y: self.wall_y,
            input: self.input,
            perturbation: self.perturbation.unwrap_or(d.perturbation),
            perturbation_time: self.perturbation_time.unwrap_or(d.perturbation_time),
            ..d
        }
    }

    pub fn build(&self) -> Result<OcpModel> {
        if self.problem != "chain" {
            return Err(Error::Config(format!("unknown problem `{}`", self.problem)));
        }
        chain_of_masses_with(self.n_m, self.n_intervals, self.horizon, &self.params())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}
