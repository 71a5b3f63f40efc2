//! SQP on the direct collocation problem, with `(x, u, K)` as stage
//! variables and `[D C]` as the approximated stage Jacobian. Serves as the
//! reference the lifted method must reproduce.

use nalgebra::{DMatrix, DVector};

use super::{colloc_jacobians, colloc_residual, colloc_vjp};
use crate::error::{Error, Result};
use crate::model::{Iterate, OcpModel};
use crate::qp::{solve_qp, QpOptions, RowId, StageQpData};
use crate::sqp::{block_tr1_update, JacobianStrategy, UpdateVectors};

#[derive(Clone, Debug)]
pub struct DirectCollocationSolver {
    pub model: OcpModel,
    pub iterate: Iterate,
    /// `[D C]` per interval.
    pub blocks: Vec<DMatrix<f64>>,
    pub strategy: JacobianStrategy,
    pub c1: f64,
    pub qp: QpOptions,
    pub active_set: Vec<RowId>,
}

impl DirectCollocationSolver {
    pub fn new(model: &OcpModel, mut iterate: Iterate, strategy: JacobianStrategy, c1: f64) -> Result<Self> {
        super::check_strategy(strategy)?;
        if iterate.k.is_none() || iterate.omega.is_none() {
            model.attach_collocation(&mut iterate)?;
        }
        let blocks = Self::exact_blocks(model, &iterate)?;
        Ok(Self {
            model: model.clone(),
            iterate,
            blocks,
            strategy,
            c1,
            qp: QpOptions::default(),
            active_set: Vec::new(),
        })
    }

    fn exact_blocks(model: &OcpModel, it: &Iterate) -> Result<Vec<DMatrix<f64>>> {
        let ks = it.k.as_ref().unwrap();
        (0..model.n_intervals)
            .map(|i| {
                let (d, c) = colloc_jacobians(model, &it.w(i), &ks[i])?;
                let mut m = DMatrix::zeros(d.nrows(), d.ncols() + c.ncols());
                m.columns_mut(0, d.ncols()).copy_from(&d);
                m.columns_mut(d.ncols(), c.ncols()).copy_from(&c);
                Ok(m)
            })
            .collect()
    }

    /// One full SQP iteration for initial state `x0_hat`; returns the step norm.
    pub fn iterate(&mut self, x0_hat: &DVector<f64>) -> Result<f64> {
        let model = self.model.clone();
        let st = model.collocation();
        let b = st.b_matrix();
        let (nx, n) = (model.nx, model.n_intervals);
        let nw = nx + model.nu;
        let nk = st.nk();
        let it = &self.iterate;
        let ks = it.k.as_ref().unwrap();
        let omegas = it.omega.as_ref().unwrap();
        let mut residuals = Vec::with_capacity(n);
        let mut stages = Vec::with_capacity(n + 1);
        for i in 0..=n {
            let w = it.w(i);
            let grad = model.costs[i].gradient(&w)?;
            let gn = model.costs[i].gauss_newton(&w)?;
            let bounds = &model.path_bounds[i] - &model.path_rows[i] * &w;
            if i == n {
                stages.push(StageQpData::new(gn, grad, nx).with_inequalities(model.path_rows[i].clone(), bounds));
                continue;
            }
            let nz = nw + nk;
            let mut h = DMatrix::zeros(nz, nz);
            h.view_mut((0, 0), (nw, nw)).copy_from(&gn);
            // objective gradient with the correction (G' - [D C])' omega
            let mut g = colloc_vjp(&model, &w, &ks[i], &omegas[i])? - self.blocks[i].tr_mul(&omegas[i]);
            let mut gw = g.rows_mut(0, nw);
            gw += grad;
            let mut a = DMatrix::zeros(nx, nz);
            for r in 0..nx {
                a[(r, r)] = 1.0;
            }
            a.view_mut((0, nw), (nx, nk)).copy_from(&b);
            let defect = &it.x[i] + &b * &ks[i] - &it.x[i + 1];
            let mut p = DMatrix::zeros(model.n_rows(i), nz);
            p.columns_mut(0, nw).copy_from(&model.path_rows[i]);
            let c = colloc_residual(&model, &w, &ks[i])?;
            stages.push(
                StageQpData::new(h, g, nx)
                    .with_dynamics(a, defect)
                    .with_inequalities(p, bounds)
                    .with_equalities(self.blocks[i].clone(), -&c),
            );
            residuals.push(c);
        }
        let d0 = x0_hat - &it.x[0];
        let sol = solve_qp(&stages, &d0, Some(&self.active_set), &self.qp)?;

        let old = self.iterate.clone();
        let steps = sol.dw.clone();
        let mut step2 = 0.0;
        {
            let it = &mut self.iterate;
            let ks = it.k.as_mut().unwrap();
            let omegas = it.omega.as_mut().unwrap();
            for i in 0..=n {
                let dz = &sol.dw[i];
                step2 += dz.norm_squared();
                it.x[i] += dz.rows(0, nx);
                if i < n {
                    it.u[i] += dz.rows(nx, model.nu);
                    ks[i] += dz.rows(nw, nk);
                    omegas[i].copy_from(&sol.eta[i]);
                }
            }
            it.lambda = sol.lambda;
            it.lambda_init = sol.lambda_init;
            it.mu = sol.mu;
        }
        if !self.iterate.is_finite() {
            return Err(Error::NonFinite("direct collocation step"));
        }
        self.active_set = sol.active_set;

        match self.strategy {
            JacobianStrategy::Exact => self.blocks = Self::exact_blocks(&model, &self.iterate)?,
            JacobianStrategy::BlockTr1(variant) => {
                let it = &self.iterate;
                let ks = it.k.as_ref().unwrap();
                let omegas = it.omega.as_ref().unwrap();
                let old_omegas = old.omega.as_ref().unwrap();
                for i in 0..n {
                    let w = it.w(i);
                    let sigma = &omegas[i] - &old_omegas[i];
                    let uv = UpdateVectors {
                        s: steps[i].clone(),
                        gamma: colloc_vjp(&model, &w, &ks[i], &sigma)?,
                        sigma,
                        y: colloc_residual(&model, &w, &ks[i])? - &residuals[i],
                    };
                    block_tr1_update(&mut self.blocks[i], &uv, variant, self.c1);
                }
            }
            _ => unreachable!("checked at construction"),
        }
        Ok(step2.sqrt())
    }
}
