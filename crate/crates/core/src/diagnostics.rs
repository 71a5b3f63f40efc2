//! Measurements used to check convergence behaviour: null-space bases of
//! active constraints, projected Jacobian errors, contraction-rate estimates
//! and reduced KKT matrix errors.

use nalgebra::{DMatrix, DVector};

use crate::autodiff::check_dim;
use crate::error::{Error, Result};
use crate::model::{Iterate, OcpModel};
use crate::qp::RowId;

/// Orthonormal basis of `{ v : P v = 0 }` via Householder QR of `P'`.
pub fn null_space(p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (k, n) = p.shape();
    if k == 0 {
        return Ok(DMatrix::identity(n, n));
    }
    if k > n {
        return Err(Error::Licq);
    }
    let qr = p.transpose().qr();
    let r = qr.r();
    let scale = r.diagonal().amax().max(1e-300);
    for j in 0..k {
        if r[(j, j)].abs() <= 1e-12 * scale {
            return Err(Error::Licq);
        }
    }
    let mut qt = DMatrix::identity(n, n);
    qr.q_tr_mul(&mut qt);
    Ok(qt.transpose().columns(k, n - k).into_owned())
}

/// Frobenius norm of `(A - J) N`.
pub fn projected_jacobian_error(
    approx: &DMatrix<f64>,
    exact: &DMatrix<f64>,
    basis: &DMatrix<f64>,
) -> Result<f64> {
    check_dim("Jacobian rows", exact.nrows(), approx.nrows())?;
    check_dim("Jacobian cols", exact.ncols(), approx.ncols())?;
    check_dim("null-space rows", approx.ncols(), basis.nrows())?;
    if basis.ncols() == 0 {
        return Ok(0.0);
    }
    Ok(((approx - exact) * basis).norm())
}

/// Outcome of [`estimate_rate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateEstimate {
    /// Geometric mean of the last quotients `e_{k+1} / e_k`.
    pub rate: f64,
    /// Set when one of those quotients is at least one.
    pub insufficient_decay: bool,
}

/// Asymptotic linear rate from the last `tail` quotients of an error sequence.
pub fn estimate_rate(errors: &[f64], tail: usize) -> Result<RateEstimate> {
    if tail == 0 || errors.len() < tail + 1 {
        return Err(Error::InvalidArgument(format!(
            "need at least {} errors, got {}",
            tail + 1,
            errors.len()
        )));
    }
    let last = &errors[errors.len() - tail - 1..];
    if last.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
        return Err(Error::InvalidArgument("errors must be positive".into()));
    }
    let mut log_sum = 0.0;
    let mut insufficient = false;
    for k in 0..tail {
        let q = last[k + 1] / last[k];
        insufficient |= q >= 1.0;
        log_sum += q.ln();
    }
    Ok(RateEstimate {
        rate: (log_sum / tail as f64).exp(),
        insufficient_decay: insufficient,
    })
}

/// Frobenius norm of the difference between the reduced KKT matrices
/// `[[N' H N, N' A'], [A N, 0]]` built from approximate and exact data.
pub fn reduced_kkt_error(
    hessian: &DMatrix<f64>,
    jacobian: &DMatrix<f64>,
    exact_hessian: &DMatrix<f64>,
    exact_jacobian: &DMatrix<f64>,
    basis: &DMatrix<f64>,
) -> Result<f64> {
    let n = basis.nrows();
    check_dim("Hessian size", n, hessian.nrows())?;
    check_dim("exact Hessian size", n, exact_hessian.nrows())?;
    check_dim("Jacobian cols", n, jacobian.ncols())?;
    check_dim("exact Jacobian cols", n, exact_jacobian.ncols())?;
    check_dim("Jacobian rows", exact_jacobian.nrows(), jacobian.nrows())?;
    let dh = basis.transpose() * (hessian - exact_hessian) * basis;
    let da = (jacobian - exact_jacobian) * basis;
    // the off-diagonal block appears twice
    Ok((dh.norm_squared() + 2.0 * da.norm_squared()).sqrt())
}

/// Hessian of `lambda' F(w)` by central differences of exact adjoint products.
pub fn constraint_curvature(model: &OcpModel, w: &DVector<f64>, lambda: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = w.len();
    let mut h = DMatrix::zeros(n, n);
    let eps = 1e-6;
    for j in 0..n {
        let mut a = w.clone();
        let mut b = w.clone();
        a[j] += eps;
        b[j] -= eps;
        let col = (model.shooting_vjp(&a, lambda)? - model.shooting_vjp(&b, lambda)?) / (2.0 * eps);
        h.set_column(j, &col);
    }
    Ok((&h + h.transpose()) * 0.5)
}

/// Solution data the convergence diagnostics compare against.
#[derive(Clone, Debug)]
pub struct SolutionReference {
    pub solution: Iterate,
    /// Exact shooting Jacobians at the solution.
    pub jacobians: Vec<DMatrix<f64>>,
    /// Per-stage null-space bases of the active rows (stage 0 includes the
    /// initial-value rows).
    pub null_spaces: Vec<DMatrix<f64>>,
    pub active_set: Vec<RowId>,
}

impl SolutionReference {
    pub fn new(model: &OcpModel, solution: Iterate, active_set: &[RowId]) -> Result<Self> {
        let mut jacobians = Vec::with_capacity(model.n_intervals);
        let mut null_spaces = Vec::with_capacity(model.n_intervals);
        for i in 0..model.n_intervals {
            let w = solution.w(i);
            jacobians.push(model.shooting_jacobian(&w)?);
            let mut rows: Vec<DVector<f64>> = Vec::new();
            if i == 0 {
                for r in 0..model.nx {
                    let mut e = DVector::zeros(model.n_w(0));
                    e[r] = 1.0;
                    rows.push(e);
                }
            }
            for id in active_set.iter().filter(|id| id.stage == i) {
                rows.push(model.path_rows[i].row(id.row).transpose());
            }
            let p = if rows.is_empty() {
                DMatrix::zeros(0, model.n_w(i))
            } else {
                DMatrix::from_fn(rows.len(), model.n_w(i), |r, c| rows[r][c])
            };
            null_spaces.push(null_space(&p)?);
        }
        Ok(Self {
            solution,
            jacobians,
            null_spaces,
            active_set: active_set.to_vec(),
        })
    }

    /// Per-stage projected Jacobian errors.
    pub fn projected_errors(&self, jacobians: &[DMatrix<f64>]) -> Result<Vec<f64>> {
        check_dim("Jacobian blocks", self.jacobians.len(), jacobians.len())?;
        jacobians
            .iter()
            .zip(&self.jacobians)
            .zip(&self.null_spaces)
            .map(|((a, j), n)| projected_jacobian_error(a, j, n))
            .collect()
    }

    /// Euclidean distance of primal variables and continuity multipliers.
    pub fn distance(&self, it: &Iterate) -> f64 {
        let mut d = 0.0;
        for (a, b) in it.x.iter().zip(&self.solution.x) {
            d += (a - b).norm_squared();
        }
        for (a, b) in it.u.iter().zip(&self.solution.u) {
            d += (a - b).norm_squared();
        }
        for (a, b) in it.lambda.iter().zip(&self.solution.lambda) {
            d += (a - b).norm_squared();
        }
        d.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn null_space_examples() {
        let n = null_space(&DMatrix::zeros(0, 3)).unwrap();
        assert_eq!(n, DMatrix::identity(3, 3));
        let n = null_space(&DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap();
        assert_eq!(n.shape(), (2, 1));
        assert!(n[(0, 0)].abs() < 1e-15);
        assert!((n[(1, 0)].abs() - 1.0).abs() < 1e-15);
        assert!(null_space(&DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0])).is_err());
        let full = null_space(&DMatrix::identity(2, 2)).unwrap();
        assert_eq!(full.ncols(), 0);
    }

    #[test]
    fn projected_error_examples() {
        let j = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 0.0, 0.5, -1.0, 3.0]);
        let p = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let n = null_space(&p).unwrap();
        assert_eq!(projected_jacobian_error(&j, &j, &n).unwrap(), 0.0);
        assert_eq!(
            projected_jacobian_error(&j, &j, &DMatrix::zeros(3, 0)).unwrap(),
            0.0
        );
        // rank-one perturbation delta u v' with v in range(N)
        let u = DVector::from_vec(vec![0.6, 0.8]);
        let v = DVector::from_vec(vec![0.0, 1.0, 2.0]);
        let delta = 0.3;
        let a = &j + &u * v.transpose() * delta;
        let e = projected_jacobian_error(&a, &j, &n).unwrap();
        let expect = delta * u.norm() * n.tr_mul(&v).norm();
        assert!((e - expect).abs() < 1e-14);
    }

    #[test]
    fn rate_examples() {
        let e: Vec<f64> = (0..10).map(|k| 0.5f64.powi(k)).collect();
        let r = estimate_rate(&e, 5).unwrap();
        assert!((r.rate - 0.5).abs() < 1e-14);
        assert!(!r.insufficient_decay);
        let e: Vec<f64> = (0..10).map(|k| 3.0 * 0.25f64.powi(k)).collect();
        assert!((estimate_rate(&e, 5).unwrap().rate - 0.25).abs() < 1e-14);
        assert!(estimate_rate(&e[..3], 5).is_err());
        assert!(estimate_rate(&[1.0, 2.0, 1.0], 2).unwrap().insufficient_decay);
    }

    #[test]
    fn reduced_kkt_examples() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.1, 0.1, 1.0]);
        let a = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let n = DMatrix::identity(2, 2);
        assert_eq!(reduced_kkt_error(&h, &a, &h, &a, &n).unwrap(), 0.0);
        let pert = DMatrix::from_row_slice(1, 2, &[0.0, 0.2]);
        let nb = null_space(&DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap();
        let e = reduced_kkt_error(&h, &(&a + &pert), &h, &a, &nb).unwrap();
        let expect = (2.0 * (&pert * &nb).norm_squared()).sqrt();
        assert!((e - expect).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn basis_is_orthonormal(vals in prop::collection::vec(-1.0f64..1.0, 10)) {
            let p = DMatrix::from_row_slice(2, 5, &vals);
            if let Ok(n) = null_space(&p) {
                let eye = n.tr_mul(&n);
                prop_assert!((eye - DMatrix::identity(n.ncols(), n.ncols())).amax() <= 1e-12);
                prop_assert!((&p * &n).amax() <= 1e-12);
            }
        }

        #[test]
        fn rate_is_scale_invariant(scale in 1e-6f64..1e6, q in 0.05f64..0.95) {
            let e: Vec<f64> = (0..8).map(|k| q.powi(k) * (1.0 + 0.1 * (k as f64).sin())).collect();
            let s: Vec<f64> = e.iter().map(|v| v * scale).collect();
            let a = estimate_rate(&e, 5).unwrap().rate;
            let b = estimate_rate(&s, 5).unwrap().rate;
            prop_assert!((a - b).abs() <= 1e-13 * a);
        }

        #[test]
        fn projection_ignores_row_space_perturbation(
            vals in prop::collection::vec(-1.0f64..1.0, 8),
            m in prop::collection::vec(-1.0f64..1.0, 4),
        ) {
            let p = DMatrix::from_row_slice(2, 4, &vals);
            if let Ok(n) = null_space(&p) {
                let j = DMatrix::from_fn(2, 4, |r, c| (r as f64 + 1.0) * (c as f64 - 1.5));
                let a = &j + DMatrix::from_row_slice(2, 2, &m) * &p;
                let e = projected_jacobian_error(&a, &j, &n).unwrap();
                prop_assert!(e <= 1e-12 * (1.0 + p.norm() * 4.0));
            }
        }
    }
}
