//! Per-interval matrices of the lifted method and their rank-one maintenance.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::sqp::{tr1_scaling, Tr1Variant, UpdateOutcome, UpdateVectors};

/// Operation counters of the lifted update and condensing steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounters {
    /// Scalar multiplications in matrix-vector and outer products.
    pub multiplies: u64,
    pub matvecs: u64,
    pub outer_products: u64,
    /// Exact factorizations triggered by the drift check.
    pub refactorizations: u64,
}

impl OpCounters {
    pub(crate) fn mul(&mut self, m: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
        self.matvecs += 1;
        self.multiplies += (m.nrows() * m.ncols()) as u64;
        m * v
    }

    pub(crate) fn tr_mul(&mut self, m: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
        self.matvecs += 1;
        self.multiplies += (m.nrows() * m.ncols()) as u64;
        m.tr_mul(v)
    }

    pub(crate) fn ger(&mut self, m: &mut DMatrix<f64>, alpha: f64, x: &DVector<f64>, y: &DVector<f64>) {
        self.outer_products += 1;
        self.multiplies += (m.nrows() * m.ncols()) as u64;
        m.ger(alpha, x, y, 1.0);
    }
}

/// Collocation Jacobian approximations `[D C]` of one interval, the
/// maintained inverse of `C` and the condensed Jacobian `E = C^-1 D`.
#[derive(Clone, Debug)]
pub struct LiftedStageState {
    pub d: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub c_inv: DMatrix<f64>,
    pub e: DMatrix<f64>,
}

impl LiftedStageState {
    /// Factorizes `C` once and forms `C^-1` and `E`.
    pub fn new(d: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let c_inv = c.clone().try_inverse().ok_or(Error::Singular("collocation matrix"))?;
        if !c_inv.iter().all(|v| v.is_finite()) {
            return Err(Error::Singular("collocation matrix"));
        }
        let e = &c_inv * &d;
        Ok(Self { d, c, c_inv, e })
    }

    /// `(|C^-1 C - I|_max, |E - C^-1 D|_max)`.
    pub fn drift(&self) -> (f64, f64) {
        let n = self.c.nrows();
        let inv = (&self.c_inv * &self.c - DMatrix::identity(n, n)).amax();
        let cond = (&self.e - &self.c_inv * &self.d).amax();
        (inv, cond)
    }

    /// Recomputes `C^-1` and `E` from `C` and `D`.
    pub fn refresh(&mut self) -> Result<()> {
        *self = Self::new(self.d.clone(), self.c.clone())?;
        Ok(())
    }
}

/// TR1 update of `[D C]` with the matching Sherman-Morrison update of `C^-1`
/// and rank-one update of `E`. `uv.s` stacks `(dw, dK)`.
///
/// The whole update is skipped, leaving all four matrices untouched, when
/// the TR1 skipping rule fires or `|1 + alpha tau_C' C^-1 rho| < sm_tol`.
pub fn tr1_update_dc(
    st: &mut LiftedStageState,
    uv: &UpdateVectors,
    variant: Tr1Variant,
    c1: f64,
    sm_tol: f64,
    ops: &mut OpCounters,
) -> UpdateOutcome {
    let skip = UpdateOutcome {
        skipped: true,
        alpha: 0.0,
        variant: None,
    };
    let unchanged = UpdateOutcome {
        skipped: false,
        alpha: 0.0,
        variant: None,
    };
    let nw = st.d.ncols();
    let nk = st.c.ncols();
    let zero = |v: &DVector<f64>| v.iter().all(|&x| x == 0.0);
    if zero(&uv.s) || zero(&uv.sigma) {
        return skip;
    }
    let s_w = uv.s.rows(0, nw).into_owned();
    let s_k = uv.s.rows(nw, nk).into_owned();
    let rho = &uv.y - ops.mul(&st.d, &s_w) - ops.mul(&st.c, &s_k);
    let tau_d = uv.gamma.rows(0, nw) - ops.tr_mul(&st.d, &uv.sigma);
    let tau_c = uv.gamma.rows(nw, nk) - ops.tr_mul(&st.c, &uv.sigma);
    if zero(&rho) || (zero(&tau_d) && zero(&tau_c)) {
        return unchanged;
    }
    let mut tau = DVector::zeros(nw + nk);
    tau.rows_mut(0, nw).copy_from(&tau_d);
    tau.rows_mut(nw, nk).copy_from(&tau_c);
    let Some((used, alpha)) = tr1_scaling(uv, &rho, &tau, variant, c1) else {
        return skip;
    };

    let rho_t = ops.mul(&st.c_inv, &rho);
    let den = 1.0 + alpha * tau_c.dot(&rho_t);
    if !(den.abs() >= sm_tol) {
        return skip;
    }
    let beta = 1.0 / den;
    let q = ops.tr_mul(&st.c_inv, &tau_c);
    // tau_D - beta (E' tau_C + alpha (tau_C' rho~) tau_D)
    let et = ops.tr_mul(&st.e, &tau_c);
    let t = &tau_d - (et + &tau_d * (alpha * tau_c.dot(&rho_t))) * beta;

    ops.ger(&mut st.d, alpha, &rho, &tau_d);
    ops.ger(&mut st.c, alpha, &rho, &tau_c);
    ops.ger(&mut st.c_inv, -alpha * beta, &rho_t, &q);
    ops.ger(&mut st.e, alpha, &rho_t, &t);
    UpdateOutcome {
        skipped: false,
        alpha,
        variant: Some(used),
    }
}
