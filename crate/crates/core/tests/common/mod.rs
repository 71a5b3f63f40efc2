#![allow(dead_code)]

use blocktr1::qp::{kkt_solve_structured, qp_objective, StageQpData};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

pub fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

/// Random convex stage QP with at most `max_rows` inequality rows in total.
/// Bounds are placed around a trajectory that satisfies the dynamics, so every
/// instance is feasible.
pub fn random_qp(rng: &mut ChaCha8Rng, max_rows: usize) -> (Vec<StageQpData>, DVector<f64>) {
    let n_int = rng.random_range(1..=2);
    let nx = rng.random_range(1..=2);
    let nu = rng.random_range(1..=2);
    let n_stages = n_int + 1;
    let mut rows_left = rng.random_range(1..=max_rows);
    let d0 = random_vector(rng, nx);
    let mut z: Vec<DVector<f64>> = Vec::new();
    let mut x = d0.clone();
    let mut stages = Vec::new();
    for i in 0..n_stages {
        let last = i == n_int;
        let nv = if last { nx } else { nx + nu };
        let m = random_matrix(rng, nv, nv);
        let h = &m * m.transpose() + DMatrix::identity(nv, nv) * 0.5;
        let g = random_vector(rng, nv);
        let mut zi = DVector::zeros(nv);
        zi.rows_mut(0, nx).copy_from(&x);
        if !last {
            zi.rows_mut(nx, nu).copy_from(&random_vector(rng, nu));
        }
        let n_rows = if last { rows_left } else { rng.random_range(0..=rows_left.min(3)) };
        rows_left -= n_rows;
        let p = random_matrix(rng, n_rows, nv);
        let slack = DVector::from_fn(n_rows, |_, _| rng.random_range(0.05..1.0));
        let mut stage = StageQpData::new(h, g, nx).with_inequalities(p.clone(), &p * &zi + slack);
        if !last {
            let a = random_matrix(rng, nx, nv);
            let defect = random_vector(rng, nx);
            x = &a * &zi + &defect;
            stage = stage.with_dynamics(a, defect);
        }
        z.push(zi);
        stages.push(stage);
    }
    (stages, d0)
}

/// Minimum objective over all working sets whose equality-constrained
/// solution is primal feasible with nonnegative multipliers.
pub fn brute_force(stages: &[StageQpData], d0: &DVector<f64>) -> Option<(f64, Vec<DVector<f64>>)> {
    let rows: Vec<(usize, usize)> = stages
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.n_ineq()).map(move |r| (i, r)))
        .collect();
    let mut best: Option<(f64, Vec<DVector<f64>>)> = None;
    for mask in 0u32..(1 << rows.len()) {
        let mut working = vec![Vec::new(); stages.len()];
        for (b, &(i, r)) in rows.iter().enumerate() {
            if mask & (1 << b) != 0 {
                working[i].push(r);
            }
        }
        let Ok(sol) = kkt_solve_structured(stages, d0, &working) else {
            continue;
        };
        if sol.mu_working.iter().any(|&m| m < -1e-9) {
            continue;
        }
        let feasible = stages.iter().zip(&sol.dw).all(|(s, dw)| {
            (&s.ineq_rows * dw - &s.ineq_bounds).iter().all(|&v| v <= 1e-9)
        });
        if !feasible {
            continue;
        }
        let obj = qp_objective(stages, &sol.dw);
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, sol.dw));
        }
    }
    best
}
