//! Real-time iteration NMPC: one SQP iteration per sample, split into a
//! preparation phase (updates, QP construction) and a feedback phase (QP
//! solve for the measured state), plus a closed-loop plant simulation.

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{collocation_simulate, gauss_legendre_tableau, ButcherTableau};
use crate::lifted::{collocation_kkt_residual, LiftedSolver};
use crate::model::{kkt_residual, Iterate, OcpModel};
use crate::sqp::{shift_iterate, FeedbackInfo, PhaseCounters, SqpSolver};

/// Operations the RTI loop needs from an iteration scheme.
pub trait RtiSolver {
    fn model(&self) -> &OcpModel;
    fn iterate(&self) -> &Iterate;
    fn prepare(&mut self) -> Result<()>;
    fn feedback(&mut self, x0_hat: &DVector<f64>) -> Result<FeedbackInfo>;
    fn shift(&mut self) -> Result<()>;
    fn relinearize(&mut self) -> Result<()>;
    fn counters(&self) -> PhaseCounters;
    /// KKT residual of the current iterate for initial state `x0_hat`.
    fn kkt(&self, x0_hat: &DVector<f64>) -> Result<f64>;
}

impl RtiSolver for SqpSolver {
    fn model(&self) -> &OcpModel {
        &self.model
    }
    fn iterate(&self) -> &Iterate {
        &self.iterate
    }
    fn prepare(&mut self) -> Result<()> {
        SqpSolver::prepare(self)
    }
    fn feedback(&mut self, x0_hat: &DVector<f64>) -> Result<FeedbackInfo> {
        SqpSolver::feedback(self, x0_hat)
    }
    fn shift(&mut self) -> Result<()> {
        SqpSolver::shift(self)
    }
    fn relinearize(&mut self) -> Result<()> {
        SqpSolver::relinearize(self)
    }
    fn counters(&self) -> PhaseCounters {
        self.counters
    }
    fn kkt(&self, x0_hat: &DVector<f64>) -> Result<f64> {
        kkt_residual(&self.model, &self.iterate, x0_hat)
    }
}

impl RtiSolver for LiftedSolver {
    fn model(&self) -> &OcpModel {
        &self.model
    }
    fn iterate(&self) -> &Iterate {
        &self.iterate
    }
    fn prepare(&mut self) -> Result<()> {
        LiftedSolver::prepare(self)
    }
    fn feedback(&mut self, x0_hat: &DVector<f64>) -> Result<FeedbackInfo> {
        LiftedSolver::feedback(self, x0_hat)
    }
    fn shift(&mut self) -> Result<()> {
        LiftedSolver::shift(self)
    }
    fn relinearize(&mut self) -> Result<()> {
        LiftedSolver::relinearize(self)
    }
    fn counters(&self) -> PhaseCounters {
        self.counters
    }
    fn kkt(&self, x0_hat: &DVector<f64>) -> Result<f64> {
        collocation_kkt_residual(&self.model, &self.iterate, x0_hat)
    }
}

/// Warm start between samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftPolicy {
    /// Move trajectories one interval forward, repeating the last stage.
    #[default]
    Shift,
    /// Reuse the previous trajectories unchanged.
    Keep,
}

/// Outcome of one RTI sample.
#[derive(Clone, Debug)]
pub struct RtiStep {
    pub control: DVector<f64>,
    pub prep_ns: u64,
    pub fb_ns: u64,
    pub step_norm: f64,
    pub active_set_size: usize,
    /// The QP failed and the previous control was held.
    pub qp_failed: bool,
}

/// RTI controller around one solver instance.
#[derive(Clone, Debug)]
pub struct RtiController<S> {
    pub solver: S,
    pub shift: ShiftPolicy,
    last_control: DVector<f64>,
    started: bool,
    relinearize_next: bool,
}

impl<S: RtiSolver> RtiController<S> {
    /// The first held control is the first control of the initial iterate.
    pub fn new(solver: S, shift: ShiftPolicy) -> Self {
        let last_control = solver.iterate().u[0].clone();
        Self {
            solver,
            shift,
            last_control,
            started: false,
            relinearize_next: false,
        }
    }

    pub fn last_control(&self) -> &DVector<f64> {
        &self.last_control
    }

    /// Warm start, pending updates and QP construction. Runs before the
    /// measurement is known; [`Self::rti_step`] calls it when needed.
    pub fn preparation(&mut self) -> Result<u64> {
        let t = Instant::now();
        if self.started && self.shift == ShiftPolicy::Shift {
            self.solver.shift()?;
        }
        if self.relinearize_next {
            self.solver.relinearize()?;
            self.relinearize_next = false;
        }
        self.solver.prepare()?;
        Ok(t.elapsed().as_nanos() as u64)
    }

    /// Preparation followed by the feedback phase for measured state `x0_hat`.
    ///
    /// A failed QP holds the previous control and forces an exact
    /// linearization in the next preparation phase.
    pub fn rti_step(&mut self, x0_hat: &DVector<f64>) -> Result<RtiStep> {
        let prep_ns = self.preparation()?;
        self.started = true;
        let t = Instant::now();
        let fb = self.solver.feedback(x0_hat);
        let fb_ns = t.elapsed().as_nanos() as u64;
        match fb {
            Ok(info) => {
                self.last_control = info.control.clone();
                Ok(RtiStep {
                    control: info.control,
                    prep_ns,
                    fb_ns,
                    step_norm: info.step_norm,
                    active_set_size: info.active_set.len(),
                    qp_failed: false,
                })
            }
            Err(Error::QpInfeasible | Error::QpMaxIterations(_) | Error::QpDegenerate) => {
                self.relinearize_next = true;
                Ok(RtiStep {
                    control: self.last_control.clone(),
                    prep_ns,
                    fb_ns,
                    step_norm: 0.0,
                    active_set_size: 0,
                    qp_failed: true,
                })
            }
            Err(e) => Err(e),
        }
    }
}

/// One-interval shift of an iterate; the terminal stage is repeated.
pub fn shift_warm_start(it: &Iterate) -> Iterate {
    shift_iterate(it)
}

/// Simulated process: the model's ODE integrated with a Gauss-Legendre
/// scheme over the sampling period.
#[derive(Clone, Debug)]
pub struct Plant {
    pub tableau: ButcherTableau,
    pub substeps: usize,
}

impl Plant {
    /// Four-stage Gauss-Legendre with four times the controller's substeps.
    pub fn accurate(model: &OcpModel) -> Result<Self> {
        Ok(Self {
            tableau: gauss_legendre_tableau(4)?,
            substeps: 4 * model.rk4_substeps.max(1),
        })
    }

    pub fn step(&self, model: &OcpModel, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let xn = collocation_simulate(&model.dynamics, &self.tableau, model.interval(), self.substeps, x, u)?;
        if !xn.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("plant state"));
        }
        Ok(xn)
    }
}

/// One sample of a closed-loop run. `x` is the measured plant state the
/// control was computed for.
#[derive(Clone, Debug, Serialize)]
pub struct TraceSample {
    pub t: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub kkt: f64,
    pub prep_ns: u64,
    pub fb_ns: u64,
    pub active_set_size: usize,
    /// Largest violation of the state-only path constraints at `x`.
    pub violation: f64,
    pub violated: bool,
    pub qp_failed: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ClosedLoopTrace {
    pub samples: Vec<TraceSample>,
    /// Set when the run stopped early; `samples` holds everything before.
    pub error: Option<Error>,
}

impl ClosedLoopTrace {
    pub fn states(&self) -> Vec<DVector<f64>> {
        self.samples.iter().map(|s| DVector::from_column_slice(&s.x)).collect()
    }

    pub fn max_violation(&self) -> f64 {
        self.samples.iter().map(|s| s.violation).fold(0.0, f64::max)
    }
}

/// Violation of the terminal-stage (state-only) path constraints.
pub fn state_violation(model: &OcpModel, x: &DVector<f64>) -> f64 {
    let n = model.n_intervals;
    let r = &model.path_rows[n] * x - &model.path_bounds[n];
    r.iter().copied().fold(0.0, f64::max)
}

/// Alternates RTI steps and plant propagation for `steps` samples starting
/// from plant state `x_init`. `disturbance(k)` is added to the plant state
/// after the `k`-th propagation.
pub fn simulate_closed_loop<S: RtiSolver>(
    ctrl: &mut RtiController<S>,
    plant: &Plant,
    x_init: &DVector<f64>,
    steps: usize,
    disturbance: Option<&dyn Fn(usize) -> DVector<f64>>,
) -> ClosedLoopTrace {
    let model = ctrl.solver.model().clone();
    let dt = model.interval();
    let mut trace = ClosedLoopTrace::default();
    let mut x = x_init.clone();
    for k in 0..steps {
        let step = match ctrl.rti_step(&x) {
            Ok(s) => s,
            Err(e) => {
                trace.error = Some(e);
                return trace;
            }
        };
        let kkt = ctrl.solver.kkt(&x).unwrap_or(f64::NAN);
        let violation = state_violation(&model, &x);
        trace.samples.push(TraceSample {
            t: k as f64 * dt,
            x: x.as_slice().to_vec(),
            u: step.control.as_slice().to_vec(),
            kkt,
            prep_ns: step.prep_ns,
            fb_ns: step.fb_ns,
            active_set_size: step.active_set_size,
            violation,
            violated: violation > 1e-6,
            qp_failed: step.qp_failed,
        });
        x = match plant.step(&model, &x, &step.control) {
            Ok(xn) => xn,
            Err(e) => {
                trace.error = Some(e);
                return trace;
            }
        };
        if let Some(d) = disturbance {
            x += d(k);
        }
    }
    trace
}

/// Largest plant-state deviation between two traces relative to the larger
/// state magnitude seen in either.
pub fn relative_deviation(a: &ClosedLoopTrace, b: &ClosedLoopTrace) -> f64 {
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (sa, sb) in a.samples.iter().zip(&b.samples) {
        for (p, q) in sa.x.iter().zip(&sb.x) {
            diff = diff.max((p - q).abs());
            scale = scale.max(p.abs()).max(q.abs());
        }
    }
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
