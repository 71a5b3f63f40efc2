//! Rank-one quasi-Newton updates for Jacobian and Hessian blocks.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Which secant condition a TR1 update enforces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tr1Variant {
    /// `A+ s = y`.
    Forward,
    /// `sigma' A+ = gamma'`.
    Adjoint,
    /// Per update, whichever of the two has the larger normalized denominator.
    Dynamic,
}

/// Secant data for one block.
#[derive(Clone, Debug)]
pub struct UpdateVectors {
    /// Primal step.
    pub s: DVector<f64>,
    /// Multiplier change.
    pub sigma: DVector<f64>,
    /// Function difference `F(w+) - F(w)`.
    pub y: DVector<f64>,
    /// `dF/dw(w+)' sigma`.
    pub gamma: DVector<f64>,
}

/// What a rank-one update did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateOutcome {
    pub skipped: bool,
    /// Scaling of the rank-one term; zero when nothing changed.
    pub alpha: f64,
    /// Variant actually applied (forward or adjoint) for TR1 updates.
    pub variant: Option<Tr1Variant>,
}

impl UpdateOutcome {
    fn skip() -> Self {
        Self {
            skipped: true,
            alpha: 0.0,
            variant: None,
        }
    }

    fn unchanged() -> Self {
        Self {
            skipped: false,
            alpha: 0.0,
            variant: None,
        }
    }
}

/// Residual vectors `rho = y - A s` and `tau = gamma - A' sigma`.
pub fn tr1_residuals(a: &DMatrix<f64>, uv: &UpdateVectors) -> (DVector<f64>, DVector<f64>) {
    (&uv.y - a * &uv.s, &uv.gamma - a.tr_mul(&uv.sigma))
}

/// Chooses the TR1 variant and scaling for given residuals, or `None` when
/// the skipping rule rejects the update.
pub fn tr1_scaling(
    uv: &UpdateVectors,
    rho: &DVector<f64>,
    tau: &DVector<f64>,
    variant: Tr1Variant,
    c1: f64,
) -> Option<(Tr1Variant, f64)> {
    let fwd_den = tau.dot(&uv.s);
    let adj_den = uv.sigma.dot(rho);
    let fwd_ok = fwd_den != 0.0 && fwd_den.abs() >= c1 * uv.sigma.norm() * rho.norm();
    let adj_ok = adj_den != 0.0 && adj_den.abs() >= c1 * uv.s.norm() * tau.norm();
    match variant {
        Tr1Variant::Forward => fwd_ok.then(|| (Tr1Variant::Forward, 1.0 / fwd_den)),
        Tr1Variant::Adjoint => adj_ok.then(|| (Tr1Variant::Adjoint, 1.0 / adj_den)),
        Tr1Variant::Dynamic => {
            let rf = fwd_den.abs() / (uv.sigma.norm() * rho.norm());
            let ra = adj_den.abs() / (uv.s.norm() * tau.norm());
            match (fwd_ok, adj_ok) {
                (true, true) if rf >= ra => Some((Tr1Variant::Forward, 1.0 / fwd_den)),
                (true, true) => Some((Tr1Variant::Adjoint, 1.0 / adj_den)),
                (true, false) => Some((Tr1Variant::Forward, 1.0 / fwd_den)),
                (false, true) => Some((Tr1Variant::Adjoint, 1.0 / adj_den)),
                (false, false) => None,
            }
        }
    }
}

fn is_zero(v: &DVector<f64>) -> bool {
    v.iter().all(|&x| x == 0.0)
}

/// Two-sided rank-one update `A+ = A + alpha rho tau'`, in place.
pub fn block_tr1_update(
    a: &mut DMatrix<f64>,
    uv: &UpdateVectors,
    variant: Tr1Variant,
    c1: f64,
) -> UpdateOutcome {
    if is_zero(&uv.s) || is_zero(&uv.sigma) {
        return UpdateOutcome::skip();
    }
    let (rho, tau) = tr1_residuals(a, uv);
    if is_zero(&rho) || is_zero(&tau) {
        return UpdateOutcome::unchanged();
    }
    match tr1_scaling(uv, &rho, &tau, variant, c1) {
        None => UpdateOutcome::skip(),
        Some((used, alpha)) => {
            a.ger(alpha, &rho, &tau, 1.0);
            UpdateOutcome {
                skipped: false,
                alpha,
                variant: Some(used),
            }
        }
    }
}

/// TR1 update of a full (unstructured) constraint Jacobian.
pub fn dense_tr1_update(
    a: &mut DMatrix<f64>,
    uv: &UpdateVectors,
    variant: Tr1Variant,
    c1: f64,
) -> UpdateOutcome {
    block_tr1_update(a, uv, variant, c1)
}

/// Classical Broyden variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BroydenVariant {
    /// `A+ = A + (y - A s) s' / (s' s)`.
    Good,
    /// `A+ = A + (y - A s) (y' A) / (y' A s)`, the inverse-form update
    /// rewritten for the Jacobian itself.
    Bad,
}

/// Broyden update enforcing `A+ s = y`, in place.
pub fn broyden_update(
    a: &mut DMatrix<f64>,
    s: &DVector<f64>,
    y: &DVector<f64>,
    variant: BroydenVariant,
) -> UpdateOutcome {
    if is_zero(s) {
        return UpdateOutcome::skip();
    }
    let as_ = &*a * s;
    let r = y - &as_;
    if is_zero(&r) {
        return UpdateOutcome::unchanged();
    }
    match variant {
        BroydenVariant::Good => {
            let den = s.norm_squared();
            a.ger(1.0 / den, &r, s, 1.0);
        }
        BroydenVariant::Bad => {
            let den = y.dot(&as_);
            if den.abs() <= 1e-14 * y.norm() * as_.norm() || den == 0.0 {
                return UpdateOutcome::skip();
            }
            let yta = a.tr_mul(y);
            a.ger(1.0 / den, &r, &yta, 1.0);
        }
    }
    UpdateOutcome {
        skipped: false,
        alpha: 1.0,
        variant: None,
    }
}

/// Symmetric rank-one update `H+ = H + v v' / (v' s)`, `v = z - H s`, in
/// place. Skipped when `|v' s| < r |v| |s|`.
pub fn block_sr1_hessian_update(
    h: &mut DMatrix<f64>,
    s: &DVector<f64>,
    z: &DVector<f64>,
    r: f64,
) -> UpdateOutcome {
    if is_zero(s) {
        return UpdateOutcome::skip();
    }
    let v = z - &*h * s;
    if is_zero(&v) {
        return UpdateOutcome::unchanged();
    }
    let den = v.dot(s);
    if den == 0.0 || den.abs() < r * v.norm() * s.norm() {
        return UpdateOutcome::skip();
    }
    h.ger(1.0 / den, &v, &v, 1.0);
    // keep exact symmetry
    for i in 0..h.nrows() {
        for j in 0..i {
            let m = 0.5 * (h[(i, j)] + h[(j, i)]);
            h[(i, j)] = m;
            h[(j, i)] = m;
        }
    }
    UpdateOutcome {
        skipped: false,
        alpha: 1.0 / den,
        variant: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(x)
    }

    fn scalar_uv() -> UpdateVectors {
        UpdateVectors {
            s: v(&[1.0]),
            sigma: v(&[1.0]),
            y: v(&[2.0]),
            gamma: v(&[3.0]),
        }
    }

    #[test]
    fn scalar_tr1_examples() {
        let mut a = DMatrix::zeros(1, 1);
        let out = block_tr1_update(&mut a, &scalar_uv(), Tr1Variant::Forward, 1e-8);
        assert!((out.alpha - 1.0 / 3.0).abs() < 1e-15);
        assert!((a[(0, 0)] - 2.0).abs() < 1e-15);
        let mut a = DMatrix::zeros(1, 1);
        let out = block_tr1_update(&mut a, &scalar_uv(), Tr1Variant::Adjoint, 1e-8);
        assert!((out.alpha - 0.5).abs() < 1e-15);
        assert!((a[(0, 0)] - 3.0).abs() < 1e-15);
        // dynamic: forward ratio 3/(1*2) beats adjoint 2/(1*3)
        let mut a = DMatrix::zeros(1, 1);
        let out = block_tr1_update(&mut a, &scalar_uv(), Tr1Variant::Dynamic, 1e-8);
        assert_eq!(out.variant, Some(Tr1Variant::Forward));
        let mut a = DMatrix::zeros(1, 1);
        dense_tr1_update(&mut a, &scalar_uv(), Tr1Variant::Adjoint, 1e-8);
        assert!((a[(0, 0)] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_rho_leaves_matrix() {
        let a0 = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let s = v(&[0.5, -1.0]);
        let uv = UpdateVectors {
            y: &a0 * &s,
            s,
            sigma: v(&[1.0, 1.0]),
            gamma: v(&[7.0, 1.0]),
        };
        for var in [Tr1Variant::Forward, Tr1Variant::Adjoint, Tr1Variant::Dynamic] {
            let mut a = a0.clone();
            block_tr1_update(&mut a, &uv, var, 1e-8);
            assert_eq!(a, a0);
        }
    }

    #[test]
    fn degenerate_vectors_skip() {
        let mut a = DMatrix::from_element(1, 1, 1.0);
        let mut uv = scalar_uv();
        uv.s[0] = 0.0;
        assert!(block_tr1_update(&mut a, &uv, Tr1Variant::Forward, 1e-8).skipped);
        let mut uv = scalar_uv();
        uv.sigma[0] = 0.0;
        assert!(block_tr1_update(&mut a, &uv, Tr1Variant::Adjoint, 1e-8).skipped);
        assert_eq!(a[(0, 0)], 1.0);
    }

    #[test]
    fn skipping_threshold() {
        // tau' s = 0 while rho and sigma are not: forward skips
        let mut a = DMatrix::zeros(2, 2);
        let uv = UpdateVectors {
            s: v(&[1.0, 0.0]),
            sigma: v(&[1.0, 0.0]),
            y: v(&[1.0, 0.0]),
            gamma: v(&[0.0, 1.0]),
        };
        assert!(block_tr1_update(&mut a, &uv, Tr1Variant::Forward, 1e-8).skipped);
        assert_eq!(a, DMatrix::zeros(2, 2));
        let out = block_tr1_update(&mut a, &uv, Tr1Variant::Dynamic, 1e-8);
        assert_eq!(out.variant, Some(Tr1Variant::Adjoint));
    }

    #[test]
    fn broyden_examples() {
        for var in [BroydenVariant::Good, BroydenVariant::Bad] {
            let mut a = DMatrix::from_element(1, 1, if var == BroydenVariant::Bad { 1.0 } else { 0.0 });
            broyden_update(&mut a, &v(&[1.0]), &v(&[2.0]), var);
            assert!((a[(0, 0)] - 2.0).abs() < 1e-15);
        }
        let a0 = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0, -1.0, 3.0, 0.5]);
        let s = v(&[0.3, 0.2, -0.1]);
        let mut a = a0.clone();
        broyden_update(&mut a, &s, &(&a0 * &s), BroydenVariant::Good);
        assert_eq!(a, a0);
        let y = v(&[1.0, -2.0]);
        for var in [BroydenVariant::Good, BroydenVariant::Bad] {
            let mut a = a0.clone();
            assert!(!broyden_update(&mut a, &s, &y, var).skipped);
            assert!((&a * &s - &y).amax() < 1e-12);
        }
    }

    #[test]
    fn sr1_examples() {
        let mut h = DMatrix::zeros(1, 1);
        block_sr1_hessian_update(&mut h, &v(&[1.0]), &v(&[2.0]), 1e-8);
        assert!((h[(0, 0)] - 2.0).abs() < 1e-15);
        let h0 = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let s = v(&[1.0, -1.0]);
        let mut h = h0.clone();
        block_sr1_hessian_update(&mut h, &s, &(&h0 * &s), 1e-8);
        assert_eq!(h, h0);
        let z = v(&[0.3, 2.0]);
        let mut h = h0.clone();
        block_sr1_hessian_update(&mut h, &s, &z, 1e-8);
        assert_eq!(h, h.transpose());
        assert!((&h * &s - &z).amax() < 1e-13);
    }
}
