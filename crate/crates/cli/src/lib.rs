//! Batch front end for `qpkam`: configuration loading and the four commands.
//!
//! Each command writes its artifacts into an output directory and returns
//! an [`Outcome`] carrying the process exit code and a short summary.

pub mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use qpkam::hill::{self, FrequencyReport, HillVerdict};
use qpkam::invariants::{self, SuiteSystem};
use qpkam::kam::{self, ReductionResult};
use qpkam::{diophantine, homological, oracle, IntegratorConfig};
use serde::Serialize;
use thiserror::Error;

pub use config::{ConfigError, Problem, ProblemConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot write {path}: {message}")]
    Output { path: String, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_USAGE,
            CliError::Output { .. } => EXIT_FAILURE,
        }
    }
}

/// Flags shared by every command; `None` falls back to the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub horizon: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub exit_code: i32,
    pub summary: String,
    pub files: Vec<PathBuf>,
}

struct Output {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Output {
    fn new(cfg: &ProblemConfig, ov: &Overrides) -> Result<Self, CliError> {
        let dir = ov.out.clone().or_else(|| cfg.out.as_ref().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("qpkam-out"));
        std::fs::create_dir_all(&dir).map_err(|e| output_error(&dir, e))?;
        Ok(Output { dir, files: Vec::new() })
    }

    fn write(&mut self, name: &str, body: impl FnOnce(&mut dyn Write) -> Result<(), String>) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(|e| output_error(&path, e))?;
        let mut w = BufWriter::new(file);
        body(&mut w).and_then(|_| w.flush().map_err(|e| e.to_string())).map_err(|message| CliError::Output { path: path.display().to_string(), message })?;
        self.files.push(path);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value).map_err(|e| e.to_string())?;
            writeln!(w).map_err(|e| e.to_string())
        })
    }
}

fn output_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Output { path: path.display().to_string(), message: e.to_string() }
}

fn integrator(horizon: f64) -> IntegratorConfig {
    IntegratorConfig::default().with_horizon(horizon)
}

#[derive(Serialize)]
struct OracleSummary {
    horizon: f64,
    /// `max ‖Φ(t) − ψ(t)e^{Bt}ψ(0)⁻¹‖` over the samples.
    agreement: Option<f64>,
    det_drift: Option<f64>,
    symplectic_drift: Option<f64>,
    error: Option<String>,
}

#[derive(Serialize)]
struct ReduceReport<'a> {
    command: &'static str,
    status: &'a str,
    /// `det B` when `B` is 2×2 with a `±i√b` pair.
    b: Option<f64>,
    oracle: OracleSummary,
    reduction: &'a ReductionResult,
}

/// Reduction at a single `ε`, compared against the integrated flow.
/// Writes `reduce_report.json`, `oracle_samples.csv` and `divisors.csv`.
pub fn cmd_reduce(cfg: &ProblemConfig, ov: &Overrides) -> Result<Outcome, CliError> {
    let eps = cfg.eps.ok_or_else(|| ConfigError::Field { field: "run.eps".into(), message: "reduce needs a single ε".into() })?;
    let horizon = ov.horizon.unwrap_or(cfg.horizon);
    let mut out = Output::new(cfg, ov)?;
    let (a, q) = cfg.problem.system();
    let res = kam::reduce(&a, &q, eps, &cfg.schedule);

    let sol = oracle::integrate_fundamental(&a, &q, eps, &integrator(horizon));
    let oracle_summary = match &sol {
        Ok(s) => OracleSummary {
            horizon,
            agreement: if res.is_reduced() { oracle::compare_with_reduction(s, &res).ok() } else { None },
            det_drift: Some(s.det_drift),
            symplectic_drift: Some(s.symplectic_drift()),
            error: None,
        },
        Err(e) => OracleSummary { horizon, agreement: None, det_drift: None, symplectic_drift: None, error: Some(e.to_string()) },
    };
    let b = if res.is_reduced() && res.dim() == 2 { hill::extract_b(&res.b, 1e-10) } else { None };
    let reason = match &res.status {
        kam::ReductionStatus::Failed { reason, step } => Some(format!("{reason:?} at step {step}")),
        _ => None,
    };
    let report = ReduceReport { command: "reduce", status: res.status.label(), b, oracle: oracle_summary, reduction: &res };
    out.json("reduce_report.json", &report)?;
    if let Ok(s) = &sol {
        out.write("oracle_samples.csv", |w| s.write_csv(w).map_err(|e| e.to_string()))?;
    }
    if let Some(first) = res.trace.first() {
        let sched = &cfg.schedule;
        let table = homological::divisor_scan(&first.eigenvalues, &cfg.omega, first.k_trunc, sched.alpha_at(0), sched.tau);
        out.write("divisors.csv", |w| table.write_csv(w, cfg.omega.dim()).map_err(|e| e.to_string()))?;
    }

    let mut summary = format!("status: {}\nsteps: {}\nfinal residual: {:e}\n", res.status.label(), res.trace.len(), res.final_residual);
    if let Some(r) = &reason {
        summary.push_str(&format!("reason: {r}\n"));
    }
    if let Some(b) = b {
        summary.push_str(&format!("b: {b:e}\n"));
    }
    if let Some(ag) = report.oracle.agreement {
        summary.push_str(&format!("oracle agreement: {ag:e}\n"));
    }
    let exit_code = if res.is_reduced() { EXIT_OK } else { EXIT_FAILURE };
    Ok(Outcome { exit_code, summary, files: out.files })
}

/// `ε`-grid sweep on `(0, ε₀]`. Writes `sweep.csv` and `sweep_summary.json`.
pub fn cmd_sweep(cfg: &ProblemConfig, ov: &Overrides) -> Result<Outcome, CliError> {
    let eps0 = cfg.eps0.ok_or_else(|| ConfigError::Field { field: "run.eps0".into(), message: "sweep needs an ε range".into() })?;
    let mut out = Output::new(cfg, ov)?;
    let (a, q) = cfg.problem.system();
    let rep = diophantine::sweep(&a, &q, eps0, cfg.grid, &cfg.schedule);
    out.write("sweep.csv", |w| rep.write_csv(w, cfg.omega.dim()).map_err(|e| e.to_string()))?;
    out.json("sweep_summary.json", &rep.summary())?;
    let mut summary = format!("grid: {}\nsuccess fraction: {}\n", rep.eps_grid.len(), rep.success_fraction);
    for c in &rep.failure_clusters {
        let k = c.k.as_ref().map_or("-".to_string(), |k| format!("{:?}", k.components()));
        summary.push_str(&format!("failure cluster: [{:e}, {:e}] count {} k {k}\n", c.eps_lo, c.eps_hi, c.count));
    }
    Ok(Outcome { exit_code: EXIT_OK, summary, files: out.files })
}

#[derive(Serialize)]
struct HillEntry<'a> {
    verdict: &'a HillVerdict,
    frequency: Option<&'a FrequencyReport>,
}

#[derive(Serialize)]
struct HillReport<'a> {
    command: &'static str,
    a_bar: f64,
    averaging_coefficient: f64,
    horizon: f64,
    frequency_horizon: f64,
    verdicts: Vec<HillEntry<'a>>,
    fit: Option<hill::BFit>,
}

/// Hill verdicts at each configured `ε`, the optional `b(ε)` fit and the
/// frequency analysis of every stable verdict. Writes `hill_report.json`
/// and `hill_verdicts.csv`; exits 1 unless every verdict reduced.
pub fn cmd_hill(cfg: &ProblemConfig, ov: &Overrides) -> Result<Outcome, CliError> {
    let Problem::Hill(p) = &cfg.problem else {
        return Err(ConfigError::Field { field: "hill".into(), message: "the hill command needs a [hill] section".into() }.into());
    };
    let mut eps_list = cfg.eps_list.clone();
    eps_list.extend(cfg.eps);
    if eps_list.is_empty() && cfg.fit.is_none() {
        return Err(ConfigError::Field { field: "run.eps".into(), message: "give run.eps, run.eps_list or run.fit".into() }.into());
    }
    let horizon = ov.horizon.unwrap_or(cfg.horizon);
    let mut out = Output::new(cfg, ov)?;
    let icfg = integrator(horizon);
    let verdicts: Vec<HillVerdict> = eps_list.iter().map(|&e| hill::run(p, e, &cfg.schedule, &icfg)).collect();
    let freqs: Vec<Option<FrequencyReport>> =
        verdicts.iter().map(|v| hill::frequency_analysis(p, v, cfg.frequency_horizon, &cfg.schedule, &icfg).ok()).collect();
    let fit = cfg.fit.map(|(lo, hi, n)| hill::b_scaling_fit(p, &hill::log_spaced(lo, hi, n), &cfg.schedule));

    let report = HillReport {
        command: "hill",
        a_bar: p.a_bar,
        averaging_coefficient: p.averaging_coefficient(),
        horizon,
        frequency_horizon: cfg.frequency_horizon,
        verdicts: verdicts.iter().zip(&freqs).map(|(verdict, f)| HillEntry { verdict, frequency: f.as_ref() }).collect(),
        fit: fit.clone(),
    };
    out.json("hill_report.json", &report)?;
    out.write("hill_verdicts.csv", |w| hill::write_verdicts_csv(&verdicts, w).map_err(|e| e.to_string()))?;

    let mut summary = String::new();
    for (v, f) in verdicts.iter().zip(&freqs) {
        summary.push_str(&format!("eps {:e}: {} stable={}", v.eps, v.status(), v.stable));
        if let Some(b) = v.b {
            summary.push_str(&format!(" b={b:e}"));
        }
        if let Some(f) = f {
            summary.push_str(&format!(" peak={:.9} sqrt_b={:.9}", f.peak, f.sqrt_b));
        }
        summary.push('\n');
    }
    if let Some(f) = &fit {
        summary.push_str(&format!("fit: b ≈ {:.6}·ε + {:.6}·ε² (averaging predicts {:.6})\n", f.slope, f.curvature, p.averaging_coefficient()));
    }
    let all_reduced = verdicts.iter().all(|v| v.reduction.as_ref().is_some_and(|r| r.is_reduced()));
    Ok(Outcome { exit_code: if all_reduced { EXIT_OK } else { EXIT_FAILURE }, summary, files: out.files })
}

/// The named invariant suite, on the configured system when it carries an `ε`.
/// Writes `verify.json`; exits 1 on any failure.
pub fn cmd_verify(cfg: &ProblemConfig, ov: &Overrides) -> Result<Outcome, CliError> {
    let seed = ov.seed.unwrap_or(cfg.seed);
    let system = cfg.eps.map(|eps| {
        let (a, q) = cfg.problem.system();
        SuiteSystem { a, q, eps, sched: cfg.schedule.clone() }
    });
    let report = invariants::run_suite(seed, system.as_ref());
    let mut out = Output::new(cfg, ov)?;
    out.json("verify.json", &report)?;
    let failed = report.failures().count();
    let mut summary = report.table();
    summary.push_str(&format!("seed {seed}: {} passed, {failed} failed\n", report.results.len() - failed));
    Ok(Outcome { exit_code: if report.all_passed() { EXIT_OK } else { EXIT_FAILURE }, summary, files: out.files })
}
