use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use blocktr1::bench::{fit_slopes, median, scaling_sweep};
use blocktr1::config::{ExperimentConfig, Scheme};
use blocktr1::diagnostics::SolutionReference;
use blocktr1::integrator::gauss_legendre_tableau;
use blocktr1::lifted::{run_lifted, LiftedSolver};
use blocktr1::model::OcpModel;
use blocktr1::rti::{relative_deviation, simulate_closed_loop, ClosedLoopTrace, Plant, RtiController, RtiSolver};
use blocktr1::sqp::{reference_solution, run_sqp, IterationRecord, JacobianStrategy, RunOutcome, SqpSolver};
use blocktr1::Error;
use serde::Serialize;

use crate::output::{ensure_dir, write_rows, write_sidecar, write_table};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Numerical(_) => 3,
            Self::Io(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(m) => write!(f, "configuration: {m}"),
            Self::Numerical(m) => write!(f, "numerical failure: {m}"),
            Self::Io(m) => write!(f, "i/o: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Self::Config(m),
            other => Self::Numerical(other.to_string()),
        }
    }
}

/// Reads the config, applies command-line overrides, then validates once.
fn load(path: &Path, overrides: impl FnOnce(&mut ExperimentConfig)) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
    overrides(&mut cfg);
    for w in cfg.validate()? {
        log::warn!("{w}");
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let dir = out.unwrap_or_else(|| cfg.out_dir.clone());
    ensure_dir(&dir)?;
    Ok(dir)
}

fn threads() -> usize {
    std::env::var("BLOCKTR1_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Maps `f` over `items` on up to `threads` scoped threads, keeping order.
fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let n = threads.min(items.len()).max(1);
    if n <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(n);
    thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

#[derive(Serialize)]
struct IterRow<'a> {
    iter: usize,
    kkt_inf_norm: f64,
    step_norm: f64,
    proj_jac_err: f64,
    n_skipped: usize,
    active_set_size: usize,
    strategy: &'a str,
    n_refactorizations: u64,
    matvec_count: u64,
    outer_product_count: u64,
}

impl<'a> From<&'a IterationRecord> for IterRow<'a> {
    fn from(r: &'a IterationRecord) -> Self {
        Self {
            iter: r.iter,
            kkt_inf_norm: r.kkt,
            step_norm: r.step_norm,
            proj_jac_err: r.proj_jac_err,
            n_skipped: r.n_skipped,
            active_set_size: r.active_set_size,
            strategy: &r.strategy,
            n_refactorizations: r.n_refactorizations,
            matvec_count: r.matvec_count,
            outer_product_count: r.outer_product_count,
        }
    }
}

fn solve_one(
    model: &OcpModel,
    cfg: &ExperimentConfig,
    strategy: JacobianStrategy,
    lifted: bool,
    reference: Option<&SolutionReference>,
) -> Result<(Vec<IterationRecord>, RunOutcome), Error> {
    let init = model.initial_guess();
    if lifted {
        let run = run_lifted(model, init, &cfg.lifted_options(strategy))?;
        Ok((run.records, run.outcome))
    } else {
        let run = run_sqp(model, init, &cfg.sqp_options(strategy), reference)?;
        Ok((run.records, run.outcome))
    }
}

pub fn solve(config: &Path, out: Option<PathBuf>, lifted: bool) -> Result<(), CliError> {
    let cfg = load(config, |_| {})?;
    let dir = out_dir(&cfg, out)?;
    let model = cfg.build_model()?;
    let reference = if lifted {
        None
    } else {
        let t = &cfg.tolerances;
        match reference_solution(&model, model.initial_guess(), t.reference_tol, t.max_iter.max(200)) {
            Ok(r) => Some(r),
            Err(e) => {
                log::warn!("no reference solution ({e}); projected errors are NaN");
                None
            }
        }
    };
    let results = parallel_map(&cfg.strategies, threads(), |&s| solve_one(&model, &cfg, s, lifted, reference.as_ref()));

    let mut files = Vec::new();
    let mut merged: Vec<IterRow> = Vec::new();
    let mut failures = Vec::new();
    for (strategy, result) in cfg.strategies.iter().zip(&results) {
        match result {
            Ok((records, outcome)) => {
                let rows: Vec<IterRow> = records.iter().map(IterRow::from).collect();
                let path = dir.join(format!("solve_{strategy}.csv"));
                write_rows(&path, &rows)?;
                files.push(path);
                merged.extend(records.iter().map(IterRow::from));
                let last = records.last().map_or(f64::NAN, |r| r.kkt);
                println!("{strategy}: {outcome:?} after {} iterations, KKT {last:.3e}", records.len());
                if let RunOutcome::Diverged { iter, residual } = outcome {
                    failures.push(format!("{strategy} diverged at iteration {iter} (residual {residual:e})"));
                }
            }
            Err(e) => {
                println!("{strategy}: failed: {e}");
                failures.push(format!("{strategy}: {e}"));
            }
        }
    }
    let path = dir.join("solve.csv");
    write_rows(&path, &merged)?;
    files.push(path);
    write_sidecar(&dir, "solve", &cfg, &files)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(failures.join("; ")))
    }
}

/// Accepts `a..b` (inclusive), `a..=b` or a comma-separated list.
pub fn parse_sweep(text: &str) -> Result<Vec<usize>, CliError> {
    let bad = || CliError::Config(format!("invalid n_m sweep `{text}`"));
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    let sweep: Vec<usize> = if let Some((a, b)) = text.split_once("..") {
        let (a, b) = (num(a)?, num(b.strip_prefix('=').unwrap_or(b))?);
        (a..=b).collect()
    } else {
        text.split(',').map(num).collect::<Result<_, _>>()?
    };
    if sweep.is_empty() {
        return Err(CliError::Config("n_m sweep is empty".into()));
    }
    Ok(sweep)
}

pub fn bench(config: &Path, sweep: Option<&str>, reps: Option<usize>, out: Option<PathBuf>) -> Result<(), CliError> {
    let sweep = sweep.map(parse_sweep).transpose()?;
    let cfg = load(config, |c| {
        if let Some(s) = sweep {
            c.bench.nm_sweep = s;
        }
        if let Some(r) = reps {
            c.bench.reps = r;
        }
    })?;
    let dir = out_dir(&cfg, out)?;
    let rows = scaling_sweep(
        |n_m| cfg.build_model_with(n_m),
        &cfg.bench.nm_sweep,
        &cfg.bench.schemes,
        &cfg.strategies,
        cfg.bench.reps,
    )?;
    let path = dir.join("bench.csv");
    write_rows(&path, &rows)?;
    let mut files = vec![path];
    if cfg.bench.nm_sweep.len() >= 2 {
        let slopes = fit_slopes(&rows)?;
        for s in &slopes {
            println!(
                "{} {}: prep slope {:.2}, feedback slope {:.2}",
                s.scheme, s.strategy, s.prep_slope, s.fb_slope
            );
        }
        let path = dir.join("bench_slopes.csv");
        write_rows(&path, &slopes)?;
        files.push(path);
    } else {
        log::warn!("a single chain length gives no slope fit");
    }
    write_sidecar(&dir, "bench", &cfg, &files)
}

fn run_trace<S: RtiSolver>(solver: S, cfg: &ExperimentConfig, plant: &Plant, model: &OcpModel) -> ClosedLoopTrace {
    let mut ctrl = RtiController::new(solver, cfg.nmpc.shift);
    simulate_closed_loop(&mut ctrl, plant, &model.x0, cfg.nmpc.steps, None)
}

fn trace_table(trace: &ClosedLoopTrace, nx: usize, nu: usize) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["t".to_string()];
    header.extend((0..nx).map(|i| format!("x{i}")));
    header.extend((0..nu).map(|i| format!("u{i}")));
    header.extend(["kkt", "prep_ns", "fb_ns", "active_set_size", "violated"].map(String::from));
    let rows = trace
        .samples
        .iter()
        .map(|s| {
            let mut r = vec![s.t.to_string()];
            r.extend(s.x.iter().map(|v| v.to_string()));
            r.extend(s.u.iter().map(|v| v.to_string()));
            r.push(s.kkt.to_string());
            r.push(s.prep_ns.to_string());
            r.push(s.fb_ns.to_string());
            r.push(s.active_set_size.to_string());
            r.push(s.violated.to_string());
            r
        })
        .collect();
    (header, rows)
}

#[derive(Serialize)]
struct SummaryRow {
    variant: String,
    samples: usize,
    /// Relative max-norm state deviation from the first variant's trace.
    relative_deviation: f64,
    max_violation: f64,
    qp_failures: usize,
    median_prep_ns: f64,
    median_fb_ns: f64,
    error: String,
}

pub fn nmpc(config: &Path, variants: Option<&str>, out: Option<PathBuf>) -> Result<(), CliError> {
    let variants: Option<Vec<JacobianStrategy>> = variants
        .map(|v| {
            v.split(',')
                .map(|s| s.trim().parse::<JacobianStrategy>().map_err(|e| CliError::Config(e.to_string())))
                .collect()
        })
        .transpose()?;
    let cfg = load(config, |c| {
        if let Some(v) = variants {
            c.strategies = v;
        }
    })?;
    let dir = out_dir(&cfg, out)?;
    let model = cfg.build_model()?;
    let plant = match cfg.nmpc.plant_substeps {
        0 => Plant::accurate(&model)?,
        n => Plant {
            tableau: gauss_legendre_tableau(4)?,
            substeps: n,
        },
    };
    let traces = parallel_map(&cfg.strategies, threads(), |&s| -> Result<ClosedLoopTrace, Error> {
        Ok(match cfg.nmpc.scheme {
            Scheme::MultipleShooting => run_trace(SqpSolver::new(&model, model.initial_guess(), cfg.sqp_options(s))?, &cfg, &plant, &model),
            Scheme::Lifted => run_trace(LiftedSolver::new(&model, model.initial_guess(), cfg.lifted_options(s))?, &cfg, &plant, &model),
        })
    });

    let mut files = Vec::new();
    let mut summary = Vec::new();
    let mut failures = Vec::new();
    let first = traces.iter().find_map(|t| t.as_ref().ok());
    for (strategy, trace) in cfg.strategies.iter().zip(&traces) {
        let trace = match trace {
            Ok(t) => t,
            Err(e) => {
                failures.push(format!("{strategy}: {e}"));
                continue;
            }
        };
        let (header, rows) = trace_table(trace, model.nx, model.nu);
        let path = dir.join(format!("nmpc_{strategy}.csv"));
        write_table(&path, &header, &rows)?;
        files.push(path);
        let prep: Vec<f64> = trace.samples.iter().map(|s| s.prep_ns as f64).collect();
        let fb: Vec<f64> = trace.samples.iter().map(|s| s.fb_ns as f64).collect();
        let row = SummaryRow {
            variant: strategy.to_string(),
            samples: trace.samples.len(),
            relative_deviation: first.map_or(f64::NAN, |f| relative_deviation(f, trace)),
            max_violation: trace.max_violation(),
            qp_failures: trace.samples.iter().filter(|s| s.qp_failed).count(),
            median_prep_ns: median(&prep),
            median_fb_ns: median(&fb),
            error: trace.error.as_ref().map(|e| e.to_string()).unwrap_or_default(),
        };
        println!(
            "{}: {} samples, deviation {:.3e}, max violation {:.3e}, {} QP failures",
            row.variant, row.samples, row.relative_deviation, row.max_violation, row.qp_failures
        );
        if let Some(e) = &trace.error {
            failures.push(format!("{strategy}: {e}"));
        }
        summary.push(row);
    }
    let path = dir.join("nmpc_summary.csv");
    write_rows(&path, &summary)?;
    files.push(path);
    write_sidecar(&dir, "nmpc", &cfg, &files)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(failures.join("; ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_syntax() {
        assert_eq!(parse_sweep("2..5").unwrap(), vec![2, 3, 4, 5]);
        assert_eq!(parse_sweep("2..=3").unwrap(), vec![2, 3]);
        assert_eq!(parse_sweep("2, 4,6").unwrap(), vec![2, 4, 6]);
        assert!(matches!(parse_sweep("5..2"), Err(CliError::Config(_))));
        assert!(parse_sweep("a..b").is_err());
    }

    #[test]
    fn library_errors_map_to_exit_codes() {
        assert_eq!(CliError::from(Error::Config("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(Error::QpInfeasible).exit_code(), 3);
    }

    #[test]
    fn parallel_map_keeps_order() {
        let v: Vec<usize> = (0..7).collect();
        for n in [1, 3, 16] {
            assert_eq!(parallel_map(&v, n, |x| x * 2), vec![0, 2, 4, 6, 8, 10, 12]);
        }
    }
}
