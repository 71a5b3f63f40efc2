//! Experiment configuration read from JSON.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lifted::LiftedOptions;
use crate::model::{OcpModel, ProblemConfig};
use crate::rti::ShiftPolicy;
use crate::sqp::{HessianScheme, JacobianInit, JacobianStrategy, SqpOptions, Tr1Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorConfig {
    pub rk4_substeps: usize,
    pub collocation_stages: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            rk4_substeps: 10,
            collocation_stages: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub tol: f64,
    pub max_iter: usize,
    pub c1: f64,
    pub sr1_threshold: f64,
    pub divergence_threshold: f64,
    /// Tolerance of the exact run that provides the reference solution.
    pub reference_tol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            c1: 1e-8,
            sr1_threshold: 1e-8,
            divergence_threshold: 1e6,
            reference_tol: 1e-12,
        }
    }
}

/// Discretization the controller or benchmark iterates on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// RK4 multiple shooting.
    #[default]
    MultipleShooting,
    /// Lifted Gauss-Legendre collocation.
    Lifted,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Self::MultipleShooting => "multiple_shooting",
            Self::Lifted => "lifted",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmpcConfig {
    pub steps: usize,
    pub scheme: Scheme,
    pub shift: ShiftPolicy,
    /// Substeps of the four-stage Gauss-Legendre plant per sample; zero
    /// means four times the controller's RK4 substeps.
    pub plant_substeps: usize,
}

impl Default for NmpcConfig {
    fn default() -> Self {
        Self {
            steps: 60,
            scheme: Scheme::MultipleShooting,
            shift: ShiftPolicy::Shift,
            plant_substeps: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub nm_sweep: Vec<usize>,
    pub reps: usize,
    pub schemes: Vec<Scheme>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            nm_sweep: (2..=6).collect(),
            reps: 20,
            schemes: vec![Scheme::MultipleShooting, Scheme::Lifted],
        }
    }
}

fn default_strategies() -> Vec<JacobianStrategy> {
    vec![JacobianStrategy::Exact, JacobianStrategy::BlockTr1(Tr1Variant::Dynamic)]
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<JacobianStrategy>,
    #[serde(default)]
    pub hessian: HessianScheme,
    #[serde(default)]
    pub jacobian_init: JacobianInit,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub nmpc: NmpcConfig,
    #[serde(default)]
    pub bench: BenchConfig,
}

impl ExperimentConfig {
    pub fn new(problem: ProblemConfig) -> Self {
        Self {
            problem,
            integrator: IntegratorConfig::default(),
            strategies: default_strategies(),
            hessian: HessianScheme::default(),
            jacobian_init: JacobianInit::default(),
            tolerances: Tolerances::default(),
            out_dir: default_out(),
            seed: 0,
            nmpc: NmpcConfig::default(),
            bench: BenchConfig::default(),
        }
    }

    /// Parses and validates; returns the config and any warnings.
    pub fn from_json(text: &str) -> Result<(Self, Vec<String>)> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let warnings = cfg.validate()?;
        Ok((cfg, warnings))
    }

    /// Checks value ranges and removes duplicate strategies, reporting each
    /// removal as a warning.
    pub fn validate(&mut self) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        if self.strategies.is_empty() {
            return Err(Error::Config("strategy list is empty".into()));
        }
        let mut seen = Vec::new();
        for s in &self.strategies {
            if seen.contains(s) {
                warnings.push(format!("duplicate strategy `{s}` ignored"));
            } else {
                seen.push(*s);
            }
        }
        self.strategies = seen;
        let p = &self.problem;
        if p.n_m < 2 || p.n_intervals == 0 || !(p.horizon > 0.0) {
            return Err(Error::Config("problem needs n_m >= 2, N >= 1 and T > 0".into()));
        }
        if self.integrator.rk4_substeps == 0 {
            return Err(Error::Config("rk4_substeps must be positive".into()));
        }
        if !(1..=4).contains(&self.integrator.collocation_stages) {
            return Err(Error::Config("collocation_stages must be in 1..=4".into()));
        }
        let t = &self.tolerances;
        if !(t.tol > 0.0) || !(t.reference_tol > 0.0) || !(t.c1 > 0.0 && t.c1 < 1.0) {
            return Err(Error::Config("tolerances must be positive and c1 in (0, 1)".into()));
        }
        if self.bench.reps == 0 {
            return Err(Error::Config("reps must be positive".into()));
        }
        if self.bench.reps == 1 {
            warnings.push("reps = 1: timings carry no variance estimate".into());
        }
        Ok(warnings)
    }

    pub fn build_model(&self) -> Result<OcpModel> {
        self.build_model_with(self.problem.n_m)
    }

    /// The configured problem with a different chain length.
    pub fn build_model_with(&self, n_m: usize) -> Result<OcpModel> {
        let mut p = self.problem.clone();
        p.n_m = n_m;
        p.build()?
            .with_rk4_substeps(self.integrator.rk4_substeps)?
            .with_collocation_stages(self.integrator.collocation_stages)
    }

    pub fn sqp_options(&self, strategy: JacobianStrategy) -> SqpOptions {
        let t = &self.tolerances;
        SqpOptions {
            strategy,
            hessian: self.hessian,
            jacobian_init: self.jacobian_init,
            c1: t.c1,
            sr1_threshold: t.sr1_threshold,
            tol: t.tol,
            max_iter: t.max_iter,
            divergence_threshold: t.divergence_threshold,
            ..Default::default()
        }
    }

    pub fn lifted_options(&self, strategy: JacobianStrategy) -> LiftedOptions {
        let t = &self.tolerances;
        LiftedOptions {
            strategy,
            c1: t.c1,
            tol: t.tol,
            max_iter: t.max_iter,
            divergence_threshold: t.divergence_threshold,
            ..Default::default()
        }
    }
}
