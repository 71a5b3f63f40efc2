//! Phase timings and scaling fits.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::config::Scheme;
use crate::error::{Error, Result};
use crate::lifted::{LiftedOptions, LiftedSolver};
use crate::model::OcpModel;
use crate::rti::RtiSolver;
use crate::sqp::{JacobianStrategy, SqpOptions, SqpSolver};

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument("slope fit needs two or more paired points".into()));
    }
    if x.iter().chain(y).any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidArgument("slope fit needs positive values".into()));
    }
    let n = x.len();
    let a = DMatrix::from_fn(n, 2, |r, c| if c == 0 { 1.0 } else { x[r].ln() });
    let b = DVector::from_iterator(n, y.iter().map(|v| v.ln()));
    let sol = a
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|_| Error::Singular("slope fit"))?;
    Ok(sol[1])
}

/// Median phase times of one configuration.
#[derive(Clone, Debug, Serialize)]
pub struct ScalingRow {
    pub scheme: String,
    pub strategy: String,
    pub n_m: usize,
    pub nx: usize,
    pub prep_ns: f64,
    pub fb_ns: f64,
    /// Scalar multiplications of one lifted update per interval (lifted only).
    pub update_multiplies: Option<f64>,
}

fn time_phases<S: RtiSolver + Clone>(base: &S, x0: &DVector<f64>, reps: usize) -> Result<(f64, f64)> {
    let mut prep = Vec::with_capacity(reps);
    let mut fb = Vec::with_capacity(reps);
    for _ in 0..reps {
        let mut s = base.clone();
        let t = Instant::now();
        s.prepare()?;
        prep.push(t.elapsed().as_nanos() as f64);
        let t = Instant::now();
        s.feedback(x0)?;
        fb.push(t.elapsed().as_nanos() as f64);
    }
    Ok((median(&prep), median(&fb)))
}

/// Times preparation and feedback of one RTI step, measured from a solver
/// that has completed one iteration so the preparation includes the pending
/// update. The lifted drift check is disabled: it is a cubic diagnostic, not
/// part of the method.
pub fn bench_point(model: &OcpModel, n_m: usize, scheme: Scheme, strategy: JacobianStrategy, reps: usize) -> Result<ScalingRow> {
    let x0 = model.x0.clone();
    let n = model.n_intervals as f64;
    let (prep_ns, fb_ns, update_multiplies) = match scheme {
        Scheme::MultipleShooting => {
            let opts = SqpOptions {
                strategy,
                ..Default::default()
            };
            let mut s = SqpSolver::new(model, model.initial_guess(), opts)?;
            s.prepare()?;
            s.feedback(&x0)?;
            let (p, f) = time_phases(&s, &x0, reps)?;
            (p, f, None)
        }
        Scheme::Lifted => {
            let opts = LiftedOptions {
                strategy,
                drift_check: false,
                ..Default::default()
            };
            let mut s = LiftedSolver::new(model, model.initial_guess(), opts)?;
            s.prepare()?;
            s.feedback(&x0)?;
            let mut probe = s.clone();
            let before = probe.ops.multiplies;
            probe.apply_pending_update()?;
            let per_interval = (probe.ops.multiplies - before) as f64 / n;
            let (p, f) = time_phases(&s, &x0, reps)?;
            (p, f, Some(per_interval))
        }
    };
    Ok(ScalingRow {
        scheme: scheme.name().into(),
        strategy: strategy.name().into(),
        n_m,
        nx: model.nx,
        prep_ns,
        fb_ns,
        update_multiplies,
    })
}

/// Runs [`bench_point`] for every chain length, scheme and strategy.
pub fn scaling_sweep(
    build: impl Fn(usize) -> Result<OcpModel>,
    sweep: &[usize],
    schemes: &[Scheme],
    strategies: &[JacobianStrategy],
    reps: usize,
) -> Result<Vec<ScalingRow>> {
    if sweep.is_empty() {
        return Err(Error::Config("n_m sweep is empty".into()));
    }
    let mut rows = Vec::new();
    for &n_m in sweep {
        let model = build(n_m)?;
        for &scheme in schemes {
            for &strategy in strategies {
                if scheme == Scheme::Lifted && !matches!(strategy, JacobianStrategy::Exact | JacobianStrategy::BlockTr1(_)) {
                    continue;
                }
                rows.push(bench_point(&model, n_m, scheme, strategy, reps)?);
            }
        }
    }
    Ok(rows)
}

/// Log-log slopes for one scheme/strategy: phase times against the chain
/// length `n_m`, update multiplications against `n_x`.
#[derive(Clone, Debug, Serialize)]
pub struct SlopeSummary {
    pub scheme: String,
    pub strategy: String,
    pub prep_slope: f64,
    pub fb_slope: f64,
    /// Same fits against `n_x`.
    pub prep_slope_nx: f64,
    pub fb_slope_nx: f64,
    pub update_multiply_slope: Option<f64>,
}

pub fn fit_slopes(rows: &[ScalingRow]) -> Result<Vec<SlopeSummary>> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows {
        let k = (r.scheme.clone(), r.strategy.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(scheme, strategy)| {
            let sel: Vec<&ScalingRow> = rows.iter().filter(|r| r.scheme == scheme && r.strategy == strategy).collect();
            let nx: Vec<f64> = sel.iter().map(|r| r.nx as f64).collect();
            let nm: Vec<f64> = sel.iter().map(|r| r.n_m as f64).collect();
            let prep: Vec<f64> = sel.iter().map(|r| r.prep_ns).collect();
            let fb: Vec<f64> = sel.iter().map(|r| r.fb_ns).collect();
            let mults: Option<Vec<f64>> = sel.iter().map(|r| r.update_multiplies).collect();
            let update_multiply_slope = match mults {
                Some(m) if m.iter().all(|&v| v > 0.0) => Some(loglog_slope(&nx, &m)?),
                _ => None,
            };
            Ok(SlopeSummary {
                prep_slope: loglog_slope(&nm, &prep)?,
                fb_slope: loglog_slope(&nm, &fb)?,
                prep_slope_nx: loglog_slope(&nx, &prep)?,
                fb_slope_nx: loglog_slope(&nx, &fb)?,
                update_multiply_slope,
                scheme,
                strategy,
            })
        })
        .collect()
}
