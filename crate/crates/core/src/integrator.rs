//! Discretization of the dynamics: explicit RK4 shooting maps and
//! Gauss-Legendre collocation residuals.

use nalgebra::{DMatrix, DVector};

use crate::autodiff::{self, check_dim, DiffFn, Real, VectorFunction};
use crate::error::{Error, Result};

/// Continuous-time dynamics.
#[derive(Clone, Debug)]
pub enum Dynamics {
    /// `xdot = phi(x, u)`; the function maps `(x, u)` to `xdot`.
    Explicit {
        rhs: VectorFunction,
        nx: usize,
        nu: usize,
    },
    /// `f(xdot, x, u) = 0`; the function maps `(xdot, x, u)` to the residual.
    Implicit {
        residual: VectorFunction,
        nx: usize,
        nu: usize,
    },
}

impl Dynamics {
    pub fn explicit(rhs: VectorFunction, nx: usize, nu: usize) -> Result<Self> {
        check_dim("explicit rhs input", nx + nu, rhs.n_in())?;
        check_dim("explicit rhs output", nx, rhs.n_out())?;
        Ok(Dynamics::Explicit { rhs, nx, nu })
    }

    pub fn implicit(residual: VectorFunction, nx: usize, nu: usize) -> Result<Self> {
        check_dim("implicit residual input", 2 * nx + nu, residual.n_in())?;
        check_dim("implicit residual output", nx, residual.n_out())?;
        Ok(Dynamics::Implicit { residual, nx, nu })
    }

    pub fn nx(&self) -> usize {
        match self {
            Dynamics::Explicit { nx, .. } | Dynamics::Implicit { nx, .. } => *nx,
        }
    }

    pub fn nu(&self) -> usize {
        match self {
            Dynamics::Explicit { nu, .. } | Dynamics::Implicit { nu, .. } => *nu,
        }
    }

    pub fn is_explicit(&self) -> bool {
        matches!(self, Dynamics::Explicit { .. })
    }

    fn explicit_rhs(&self) -> Result<&VectorFunction> {
        match self {
            Dynamics::Explicit { rhs, .. } => Ok(rhs),
            Dynamics::Implicit { .. } => Err(Error::ImplicitOnly),
        }
    }

    /// Implicit-form residual `f(xdot, x, u)` at generic scalars.
    fn implicit_residual<S: Real>(&self, xdot: &[S], x: &[S], u: &[S], out: &mut [S]) {
        match self {
            Dynamics::Explicit { rhs, .. } => {
                let mut xu = Vec::with_capacity(x.len() + u.len());
                xu.extend_from_slice(x);
                xu.extend_from_slice(u);
                rhs.call(&xu, out);
                for (o, &d) in out.iter_mut().zip(xdot) {
                    *o = d - *o;
                }
            }
            Dynamics::Implicit { residual, .. } => {
                let mut arg = Vec::with_capacity(2 * x.len() + u.len());
                arg.extend_from_slice(xdot);
                arg.extend_from_slice(x);
                arg.extend_from_slice(u);
                residual.call(&arg, out);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// RK4

/// The map `(x, u) -> x_next` of `n_steps` classical RK4 steps over `duration`.
#[derive(Clone, Debug)]
pub struct Rk4Map {
    rhs: VectorFunction,
    nx: usize,
    nu: usize,
    duration: f64,
    n_steps: usize,
}

impl Rk4Map {
    pub fn new(dynamics: &Dynamics, duration: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::InvalidArgument("RK4 needs at least one step".into()));
        }
        Ok(Self {
            rhs: dynamics.explicit_rhs()?.clone(),
            nx: dynamics.nx(),
            nu: dynamics.nu(),
            duration,
            n_steps,
        })
    }
}

impl DiffFn for Rk4Map {
    fn n_in(&self) -> usize {
        self.nx + self.nu
    }
    fn n_out(&self) -> usize {
        self.nx
    }
    fn is_affine(&self) -> bool {
        self.rhs.is_affine()
    }
    fn eval<S: Real>(&self, w: &[S], out: &mut [S]) {
        let nx = self.nx;
        let h = self.duration / self.n_steps as f64;
        let mut x = w[..nx].to_vec();
        let mut arg = w.to_vec();
        let mut k = [
            vec![S::zero(); nx],
            vec![S::zero(); nx],
            vec![S::zero(); nx],
            vec![S::zero(); nx],
        ];
        let offsets = [0.0, 0.5 * h, 0.5 * h, h];
        for _ in 0..self.n_steps {
            for st in 0..4 {
                for j in 0..nx {
                    arg[j] = if st == 0 {
                        x[j]
                    } else {
                        x[j] + k[st - 1][j] * offsets[st]
                    };
                }
                self.rhs.call(&arg, &mut k[st]);
            }
            for j in 0..nx {
                x[j] += (k[0][j] + k[1][j] * 2.0 + k[2][j] * 2.0 + k[3][j]) * (h / 6.0);
            }
        }
        out.copy_from_slice(&x);
    }
}

/// Propagates `(x, u)` over `duration` with `n_steps` RK4 steps.
pub fn rk4_map(
    dynamics: &Dynamics,
    duration: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    n_steps: usize,
) -> Result<DVector<f64>> {
    let map = Rk4Map::new(dynamics, duration, n_steps)?;
    check_dim("rk4 state", map.nx, x.len())?;
    check_dim("rk4 control", map.nu, u.len())?;
    let w = stack(x, u);
    let mut out = vec![0.0; map.nx];
    map.eval(w.as_slice(), &mut out);
    Ok(DVector::from_vec(out))
}

/// Exact sensitivity `d x_next / d(x, u)` by forward propagation.
pub fn rk4_jacobian(
    dynamics: &Dynamics,
    duration: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    n_steps: usize,
) -> Result<DMatrix<f64>> {
    let map = Rk4Map::new(dynamics, duration, n_steps)?;
    check_dim("rk4 state", map.nx, x.len())?;
    check_dim("rk4 control", map.nu, u.len())?;
    autodiff::jacobian(&VectorFunction::new(map), stack(x, u).as_slice())
}

/// `J^T seed` for the RK4 map by a reverse sweep over the stored stages.
pub fn rk4_adjoint(
    dynamics: &Dynamics,
    duration: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    n_steps: usize,
    seed: &DVector<f64>,
) -> Result<DVector<f64>> {
    let rhs = dynamics.explicit_rhs()?;
    if n_steps == 0 {
        return Err(Error::InvalidArgument("RK4 needs at least one step".into()));
    }
    let (nx, nu) = (dynamics.nx(), dynamics.nu());
    check_dim("rk4 state", nx, x.len())?;
    check_dim("rk4 control", nu, u.len())?;
    check_dim("rk4 adjoint seed", nx, seed.len())?;
    let h = duration / n_steps as f64;

    // forward sweep, storing the stage evaluation points
    let mut points: Vec<[DVector<f64>; 4]> = Vec::with_capacity(n_steps);
    let mut xk = x.clone();
    let mut arg = vec![0.0; nx + nu];
    arg[nx..].copy_from_slice(u.as_slice());
    let eval = |arg: &mut Vec<f64>, z: &DVector<f64>| -> DVector<f64> {
        arg[..nx].copy_from_slice(z.as_slice());
        let mut out = vec![0.0; nx];
        rhs.call(arg.as_slice(), &mut out);
        DVector::from_vec(out)
    };
    for _ in 0..n_steps {
        let z1 = xk.clone();
        let k1 = eval(&mut arg, &z1);
        let z2 = &xk + &k1 * (0.5 * h);
        let k2 = eval(&mut arg, &z2);
        let z3 = &xk + &k2 * (0.5 * h);
        let k3 = eval(&mut arg, &z3);
        let z4 = &xk + &k3 * h;
        let k4 = eval(&mut arg, &z4);
        xk += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        points.push([z1, z2, z3, z4]);
    }

    // reverse sweep
    let mut xbar = seed.clone();
    let mut ubar = DVector::zeros(nu);
    let local_vjp = |z: &DVector<f64>, kbar: &DVector<f64>| -> DVector<f64> {
        let mut p = Vec::with_capacity(nx + nu);
        p.extend_from_slice(z.as_slice());
        p.extend_from_slice(u.as_slice());
        autodiff::vjp(rhs, &p, kbar.as_slice()).expect("stage dimensions checked above")
    };
    for [z1, z2, z3, z4] in points.iter().rev() {
        let k4bar = &xbar * (h / 6.0);
        let mut k3bar = &xbar * (h / 3.0);
        let mut k2bar = &xbar * (h / 3.0);
        let mut k1bar = &xbar * (h / 6.0);
        let g4 = local_vjp(z4, &k4bar);
        xbar += g4.rows(0, nx);
        k3bar += g4.rows(0, nx) * h;
        ubar += g4.rows(nx, nu);
        let g3 = local_vjp(z3, &k3bar);
        xbar += g3.rows(0, nx);
        k2bar += g3.rows(0, nx) * (0.5 * h);
        ubar += g3.rows(nx, nu);
        let g2 = local_vjp(z2, &k2bar);
        xbar += g2.rows(0, nx);
        k1bar += g2.rows(0, nx) * (0.5 * h);
        ubar += g2.rows(nx, nu);
        let g1 = local_vjp(z1, &k1bar);
        xbar += g1.rows(0, nx);
        ubar += g1.rows(nx, nu);
    }
    Ok(stack(&xbar, &ubar))
}

// ---------------------------------------------------------------------------
// Butcher tableaus

/// Runge-Kutta coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct ButcherTableau {
    pub stages: usize,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: DVector<f64>,
}

impl ButcherTableau {
    /// Classical explicit RK4.
    pub fn rk4() -> Self {
        let mut a = DMatrix::zeros(4, 4);
        a[(1, 0)] = 0.5;
        a[(2, 1)] = 0.5;
        a[(3, 2)] = 1.0;
        Self {
            stages: 4,
            a,
            b: DVector::from_vec(vec![1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0]),
            c: DVector::from_vec(vec![0.0, 0.5, 0.5, 1.0]),
        }
    }
}

/// Legendre polynomial P_n and its derivative at `x` by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Gauss-Legendre collocation tableau with `s` stages (order 2s).
pub fn gauss_legendre_tableau(s: usize) -> Result<ButcherTableau> {
    if !(1..=4).contains(&s) {
        return Err(Error::UnsupportedStages(s));
    }
    // bracket roots on a fine grid, bisect, then polish with Newton
    let grid = 400;
    let mut roots = Vec::with_capacity(s);
    for g in 0..grid {
        let mut lo = -1.0 + 2.0 * g as f64 / grid as f64;
        let mut hi = -1.0 + 2.0 * (g + 1) as f64 / grid as f64;
        let (flo, _) = legendre(s, lo);
        let (fhi, _) = legendre(s, hi);
        if flo == 0.0 {
            roots.push(lo);
            continue;
        }
        if flo * fhi > 0.0 {
            continue;
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            let (fm, _) = legendre(s, mid);
            if fm * legendre(s, lo).0 <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let mut r = 0.5 * (lo + hi);
        for _ in 0..5 {
            let (p, dp) = legendre(s, r);
            if dp == 0.0 {
                break;
            }
            let step = p / dp;
            r -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        roots.push(r);
    }
    roots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    roots.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    if roots.len() != s {
        return Err(Error::NewtonFailure("Legendre root search"));
    }
    let c = DVector::from_iterator(s, roots.iter().map(|r| 0.5 * (r + 1.0)));

    // V[k][l] = c_l^k; b solves V b = 1/(k+1), row j of A solves V a_j = c_j^(k+1)/(k+1)
    let v = DMatrix::from_fn(s, s, |k, l| c[l].powi(k as i32));
    let lu = v.lu();
    let rhs_b = DVector::from_fn(s, |k, _| 1.0 / (k as f64 + 1.0));
    let b = lu.solve(&rhs_b).ok_or(Error::Singular("Vandermonde system"))?;
    let mut a = DMatrix::zeros(s, s);
    for j in 0..s {
        let rhs = DVector::from_fn(s, |k, _| c[j].powi(k as i32 + 1) / (k as f64 + 1.0));
        let row = lu.solve(&rhs).ok_or(Error::Singular("Vandermonde system"))?;
        for l in 0..s {
            a[(j, l)] = row[l];
        }
    }
    Ok(ButcherTableau { stages: s, a, b, c })
}

// ---------------------------------------------------------------------------
// Collocation

/// One collocation interval: tableau, step and the map from stage
/// derivatives to the state increment.
#[derive(Clone, Debug)]
pub struct CollocationStage {
    pub h: f64,
    pub tableau: ButcherTableau,
    pub nx: usize,
}

impl CollocationStage {
    pub fn new(tableau: ButcherTableau, h: f64, nx: usize) -> Self {
        Self { h, tableau, nx }
    }

    pub fn gauss_legendre(s: usize, h: f64, nx: usize) -> Result<Self> {
        Ok(Self::new(gauss_legendre_tableau(s)?, h, nx))
    }

    pub fn stages(&self) -> usize {
        self.tableau.stages
    }

    /// Number of stacked collocation variables.
    pub fn nk(&self) -> usize {
        self.tableau.stages * self.nx
    }

    /// `h (b^T kron I)`.
    pub fn b_matrix(&self) -> DMatrix<f64> {
        let nx = self.nx;
        let mut m = DMatrix::zeros(nx, self.nk());
        for j in 0..self.stages() {
            for r in 0..nx {
                m[(r, j * nx + r)] = self.h * self.tableau.b[j];
            }
        }
        m
    }

    /// `B K` without forming `B`.
    pub fn increment(&self, k: &DVector<f64>) -> DVector<f64> {
        let nx = self.nx;
        let mut out = DVector::zeros(nx);
        for j in 0..self.stages() {
            out.axpy(self.h * self.tableau.b[j], &k.rows(j * nx, nx), 1.0);
        }
        out
    }

    /// `B^T v` without forming `B`.
    pub fn increment_transpose(&self, v: &DVector<f64>) -> DVector<f64> {
        let nx = self.nx;
        let mut out = DVector::zeros(self.nk());
        for j in 0..self.stages() {
            out.rows_mut(j * nx, nx)
                .copy_from(&(v * (self.h * self.tableau.b[j])));
        }
        out
    }
}

/// The collocation residual as a function of the stacked `(x, u, K)`.
#[derive(Clone, Debug)]
pub struct CollocationFn {
    pub dynamics: Dynamics,
    pub stage: CollocationStage,
}

impl DiffFn for CollocationFn {
    fn n_in(&self) -> usize {
        self.dynamics.nx() + self.dynamics.nu() + self.stage.nk()
    }
    fn n_out(&self) -> usize {
        self.stage.nk()
    }
    fn eval<S: Real>(&self, input: &[S], out: &mut [S]) {
        let nx = self.dynamics.nx();
        let nu = self.dynamics.nu();
        let s = self.stage.stages();
        let h = self.stage.h;
        let x = &input[..nx];
        let u = &input[nx..nx + nu];
        let k = &input[nx + nu..];
        let mut z = vec![S::zero(); nx];
        for j in 0..s {
            for r in 0..nx {
                let mut acc = x[r];
                for l in 0..s {
                    let a = self.stage.tableau.a[(j, l)];
                    if a != 0.0 {
                        acc += k[l * nx + r] * (h * a);
                    }
                }
                z[r] = acc;
            }
            self.dynamics.implicit_residual(
                &k[j * nx..(j + 1) * nx],
                &z,
                u,
                &mut out[j * nx..(j + 1) * nx],
            );
        }
    }
}

fn stack(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut v = DVector::zeros(a.len() + b.len());
    v.rows_mut(0, a.len()).copy_from(a);
    v.rows_mut(a.len(), b.len()).copy_from(b);
    v
}

fn stack3(a: &DVector<f64>, b: &DVector<f64>, c: &DVector<f64>) -> DVector<f64> {
    stack(&stack(a, b), c)
}

fn check_colloc(
    dynamics: &Dynamics,
    stage: &CollocationStage,
    x: &DVector<f64>,
    u: &DVector<f64>,
    k: &DVector<f64>,
) -> Result<()> {
    check_dim("collocation state", dynamics.nx(), x.len())?;
    check_dim("collocation control", dynamics.nu(), u.len())?;
    check_dim("collocation stage dimension", dynamics.nx(), stage.nx)?;
    check_dim("collocation variables", stage.nk(), k.len())
}

/// Collocation residual `G(x, u, K)`.
pub fn collocation_residual(
    dynamics: &Dynamics,
    stage: &CollocationStage,
    x: &DVector<f64>,
    u: &DVector<f64>,
    k: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_colloc(dynamics, stage, x, u, k)?;
    let f = CollocationFn {
        dynamics: dynamics.clone(),
        stage: stage.clone(),
    };
    let mut out = vec![0.0; stage.nk()];
    f.eval(stack3(x, u, k).as_slice(), &mut out);
    Ok(DVector::from_vec(out))
}

/// Exact `(dG/d(x,u), dG/dK)`.
pub fn collocation_jacobians(
    dynamics: &Dynamics,
    stage: &CollocationStage,
    x: &DVector<f64>,
    u: &DVector<f64>,
    k: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_colloc(dynamics, stage, x, u, k)?;
    let nw = dynamics.nx() + dynamics.nu();
    let f = VectorFunction::new(CollocationFn {
        dynamics: dynamics.clone(),
        stage: stage.clone(),
    });
    let j = autodiff::jacobian(&f, stack3(x, u, k).as_slice())?;
    let nk = stage.nk();
    Ok((
        j.columns(0, nw).into_owned(),
        j.columns(nw, nk).into_owned(),
    ))
}

/// `[dG/d(x,u) dG/dK]^T seed` by a reverse sweep.
pub fn collocation_adjoint(
    dynamics: &Dynamics,
    stage: &CollocationStage,
    x: &DVector<f64>,
    u: &DVector<f64>,
    k: &DVector<f64>,
    seed: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_colloc(dynamics, stage, x, u, k)?;
    check_dim("collocation adjoint seed", stage.nk(), seed.len())?;
    let f = VectorFunction::new(CollocationFn {
        dynamics: dynamics.clone(),
        stage: stage.clone(),
    });
    autodiff::vjp(&f, stack3(x, u, k).as_slice(), seed.as_slice())
}

/// Solves `G(x, u, K) = 0` for `K` by Newton's method with the exact `dG/dK`.
pub fn collocation_solve(
    dynamics: &Dynamics,
    stage: &CollocationStage,
    x: &DVector<f64>,
    u: &DVector<f64>,
    k_guess: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    let nk = stage.nk();
    let mut k = match k_guess {
        Some(k) => k.clone(),
        None => DVector::zeros(nk),
    };
    for _ in 0..50 {
        let g = collocation_residual(dynamics, stage, x, u, &k)?;
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("collocation residual"));
        }
        if g.amax() <= 1e-10 {
            return Ok(k);
        }
        let (_, c) = collocation_jacobians(dynamics, stage, x, u, &k)?;
        let dk = c
            .lu()
            .solve(&g)
            .ok_or(Error::Singular("collocation Newton matrix"))?;
        k -= dk;
    }
    let g = collocation_residual(dynamics, stage, x, u, &k)?;
    if g.amax() <= 1e-10 {
        Ok(k)
    } else {
        Err(Error::NewtonFailure("collocation solve"))
    }
}

/// One collocation step: returns `(x + B K, K)`.
pub fn collocation_step(
    dynamics: &Dynamics,
    stage: &CollocationStage,
    x: &DVector<f64>,
    u: &DVector<f64>,
    k_guess: Option<&DVector<f64>>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let k = collocation_solve(dynamics, stage, x, u, k_guess)?;
    Ok((x + stage.increment(&k), k))
}

/// Initial guess for the collocation variables: every stage derivative set
/// to the right-hand side at `(x, u)` for explicit models, zero otherwise.
pub fn collocation_guess(
    dynamics: &Dynamics,
    stage: &CollocationStage,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> DVector<f64> {
    let nx = dynamics.nx();
    let mut k = DVector::zeros(stage.nk());
    if let Dynamics::Explicit { rhs, .. } = dynamics {
        let xdot = rhs.eval(stack(x, u).as_slice()).expect("dimensions set by model");
        for j in 0..stage.stages() {
            k.rows_mut(j * nx, nx).copy_from(&xdot);
        }
    }
    k
}

/// Propagates over `duration` with `substeps` collocation steps.
pub fn collocation_simulate(
    dynamics: &Dynamics,
    tableau: &ButcherTableau,
    duration: f64,
    substeps: usize,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<DVector<f64>> {
    let stage = CollocationStage::new(tableau.clone(), duration / substeps as f64, dynamics.nx());
    let mut xk = x.clone();
    for _ in 0..substeps {
        let guess = collocation_guess(dynamics, &stage, &xk, u);
        xk = collocation_step(dynamics, &stage, &xk, u, Some(&guess))?.0;
    }
    Ok(xk)
}
