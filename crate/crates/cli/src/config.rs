//! Problem configuration files.
//!
//! Numbers may be written as TOML numbers or as strings holding a decimal,
//! a rational `p/q`, or one of the constants `sqrt2`, `sqrt3`, `sqrt5`,
//! `golden`, `pi`, `e` (optionally negated with a leading `-`).

use std::path::Path;

use qpkam::linalg::{CMat, C64};
use qpkam::qpalg::{FrequencyVector, MultiIndex, QpMatrix};
use qpkam::{ConstMatrix, HillProblem, KamSchedule};
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid field `{field}`: {message}")]
    Field { field: String, message: String },
}

fn field(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Field { field: field.into(), message: message.into() }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum Number {
    Value(f64),
    Text(String),
}

impl Number {
    pub fn resolve(&self, name: &str) -> Result<f64, ConfigError> {
        let v = match self {
            Number::Value(v) => *v,
            Number::Text(s) => parse_literal(s).map_err(|m| field(name, m))?,
        };
        if !v.is_finite() {
            return Err(field(name, "value is not finite"));
        }
        Ok(v)
    }
}

/// Parses a numeric literal: decimal, `p/q`, or a named constant.
pub fn parse_literal(text: &str) -> Result<f64, String> {
    let s = text.trim();
    let (sign, body) = match s.strip_prefix('-') {
        Some(rest) => (-1.0, rest.trim()),
        None => (1.0, s),
    };
    let named = match body {
        "sqrt2" => Some(2f64.sqrt()),
        "sqrt3" => Some(3f64.sqrt()),
        "sqrt5" => Some(5f64.sqrt()),
        "golden" => Some(qpkam::hill::golden()),
        "pi" => Some(std::f64::consts::PI),
        "e" => Some(std::f64::consts::E),
        _ => None,
    };
    if let Some(v) = named {
        return Ok(sign * v);
    }
    if let Some((p, q)) = body.split_once('/') {
        let p: f64 = p.trim().parse().map_err(|_| format!("bad numerator in `{text}`"))?;
        let q: f64 = q.trim().parse().map_err(|_| format!("bad denominator in `{text}`"))?;
        if q == 0.0 {
            return Err(format!("zero denominator in `{text}`"));
        }
        return Ok(sign * p / q);
    }
    body.parse::<f64>().map(|v| sign * v).map_err(|_| format!("`{text}` is not a number, rational or known constant"))
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub omega: Vec<Number>,
    #[serde(default = "default_rho")]
    pub rho: Number,
    pub system: Option<SystemSection>,
    pub hill: Option<HillSection>,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub run: RunSection,
}

fn default_rho() -> Number {
    Number::Value(1.0)
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub a: Vec<Vec<Number>>,
    #[serde(default)]
    pub modes: Vec<MatrixMode>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixMode {
    pub k: Vec<i32>,
    pub re: Vec<Vec<Number>>,
    pub im: Option<Vec<Vec<Number>>>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HillSection {
    pub a_bar: Number,
    #[serde(default)]
    pub cosines: Vec<CosineTerm>,
    #[serde(default)]
    pub modes: Vec<ScalarMode>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CosineTerm {
    pub k: Vec<i32>,
    pub amplitude: Number,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalarMode {
    pub k: Vec<i32>,
    pub re: Number,
    #[serde(default = "zero")]
    pub im: Number,
}

fn zero() -> Number {
    Number::Value(0.0)
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub alpha: Option<Number>,
    pub tau: Option<Number>,
    pub delta: Option<Number>,
    pub max_steps: Option<usize>,
    pub k_cap: Option<usize>,
    pub target_residual: Option<Number>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub eps: Option<Number>,
    pub eps_list: Option<Vec<Number>>,
    pub eps0: Option<Number>,
    pub grid: Option<usize>,
    pub fit: Option<FitRange>,
    pub seed: Option<u64>,
    pub horizon: Option<Number>,
    pub frequency_horizon: Option<Number>,
    pub out: Option<String>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitRange {
    pub lo: Number,
    pub hi: Number,
    pub count: usize,
}

/// The problem the commands run on.
#[derive(Clone, Debug)]
pub enum Problem {
    Matrix { a: ConstMatrix, q: QpMatrix },
    Hill(HillProblem),
}

impl Problem {
    pub fn system(&self) -> (ConstMatrix, QpMatrix) {
        match self {
            Problem::Matrix { a, q } => (a.clone(), q.clone()),
            Problem::Hill(p) => qpkam::hill::build_system(p),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProblemConfig {
    pub problem: Problem,
    pub omega: FrequencyVector,
    pub schedule: KamSchedule,
    pub eps: Option<f64>,
    pub eps_list: Vec<f64>,
    pub eps0: Option<f64>,
    pub grid: usize,
    pub fit: Option<(f64, f64, usize)>,
    pub seed: u64,
    pub horizon: f64,
    pub frequency_horizon: f64,
    pub out: Option<String>,
}

pub const DEFAULT_SEED: u64 = 7;
const DEFAULT_ALPHA: f64 = 0.5;
const DEFAULT_TAU_MARGIN: f64 = 0.2;

impl ProblemConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse { path: path.display().to_string(), message },
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| ConfigError::Parse { path: "<config>".into(), message: e.to_string() })?;
        Self::from_file(file)
    }

    pub fn from_file(file: ConfigFile) -> Result<Self, ConfigError> {
        let omega_values = file
            .omega
            .iter()
            .enumerate()
            .map(|(j, n)| n.resolve(&format!("omega[{j}]")))
            .collect::<Result<Vec<_>, _>>()?;
        if omega_values.is_empty() {
            return Err(field("omega", "at least one frequency is required"));
        }
        let omega = FrequencyVector::new(omega_values).map_err(|e| field("omega", e.to_string()))?;
        let r = omega.dim();
        let rho = file.rho.resolve("rho")?;
        if !(rho > 0.0) {
            return Err(field("rho", format!("must be positive, got {rho}")));
        }

        let problem = match (&file.system, &file.hill) {
            (Some(_), Some(_)) => return Err(field("system", "give either [system] or [hill], not both")),
            (None, None) => return Err(field("system", "a [system] or [hill] section is required")),
            (Some(sys), None) => matrix_problem(sys, &omega, rho)?,
            (None, Some(h)) => hill_problem(h, &omega, rho)?,
        };

        let s = &file.schedule;
        let alpha = opt(&s.alpha, "schedule.alpha")?.unwrap_or(DEFAULT_ALPHA);
        let tau = opt(&s.tau, "schedule.tau")?.unwrap_or(r as f64 - 1.0 + DEFAULT_TAU_MARGIN);
        if !(alpha > 0.0) {
            return Err(field("schedule.alpha", format!("must be positive, got {alpha}")));
        }
        if !(tau > r as f64 - 1.0) {
            return Err(field("schedule.tau", format!("must exceed r − 1 = {}, got {tau}", r - 1)));
        }
        let delta = match (opt(&s.delta, "schedule.delta")?, &problem) {
            (Some(d), _) => d,
            (None, Problem::Hill(p)) => p.delta(),
            (None, Problem::Matrix { .. }) => return Err(field("schedule.delta", "required for [system] problems")),
        };
        if !(delta > 0.0) {
            return Err(field("schedule.delta", format!("must be positive, got {delta}")));
        }
        let mut schedule = KamSchedule::new(alpha, tau, rho, delta);
        if let Some(cap) = s.k_cap {
            if cap == 0 {
                return Err(field("schedule.k_cap", "must be at least 1"));
            }
            schedule = schedule.with_k_cap(cap);
        }
        if let Some(m) = s.max_steps {
            schedule.max_steps = m;
        }
        if let Some(t) = opt(&s.target_residual, "schedule.target_residual")? {
            if !(t > 0.0) {
                return Err(field("schedule.target_residual", "must be positive"));
            }
            schedule.target_residual = Some(t);
        }

        let run = &file.run;
        let positive = |v: Option<f64>, name: &str| -> Result<Option<f64>, ConfigError> {
            match v {
                Some(x) if !(x > 0.0) => Err(field(name, format!("must be positive, got {x}"))),
                other => Ok(other),
            }
        };
        let eps = positive(opt(&run.eps, "run.eps")?, "run.eps")?;
        let eps0 = positive(opt(&run.eps0, "run.eps0")?, "run.eps0")?;
        let eps_list = match &run.eps_list {
            Some(list) => list
                .iter()
                .enumerate()
                .map(|(j, n)| {
                    let name = format!("run.eps_list[{j}]");
                    positive(Some(n.resolve(&name)?), &name).map(|v| v.unwrap_or_default())
                })
                .collect::<Result<Vec<_>, _>>()?,
            None => Vec::new(),
        };
        let grid = run.grid.unwrap_or(200);
        if grid < 10 {
            return Err(field("run.grid", format!("needs at least 10 points, got {grid}")));
        }
        let fit = match &run.fit {
            Some(f) => {
                let (lo, hi) = (f.lo.resolve("run.fit.lo")?, f.hi.resolve("run.fit.hi")?);
                if !(lo > 0.0 && hi > lo) || f.count < 5 {
                    return Err(field("run.fit", "needs 0 < lo < hi and count ≥ 5"));
                }
                Some((lo, hi, f.count))
            }
            None => None,
        };
        let horizon = positive(opt(&run.horizon, "run.horizon")?, "run.horizon")?.unwrap_or(100.0);
        let frequency_horizon = positive(opt(&run.frequency_horizon, "run.frequency_horizon")?, "run.frequency_horizon")?.unwrap_or(1e4);

        Ok(ProblemConfig {
            problem,
            omega,
            schedule,
            eps,
            eps_list,
            eps0,
            grid,
            fit,
            seed: run.seed.unwrap_or(DEFAULT_SEED),
            horizon,
            frequency_horizon,
            out: run.out.clone(),
        })
    }
}

fn opt(n: &Option<Number>, name: &str) -> Result<Option<f64>, ConfigError> {
    n.as_ref().map(|v| v.resolve(name)).transpose()
}

fn check_k(k: &[i32], r: usize, name: &str) -> Result<MultiIndex, ConfigError> {
    if k.len() != r {
        return Err(field(name, format!("has {} components but omega has {r}", k.len())));
    }
    Ok(MultiIndex::new(k.to_vec()))
}

fn real_matrix(rows: &[Vec<Number>], n: usize, name: &str) -> Result<Vec<Vec<f64>>, ConfigError> {
    if rows.len() != n {
        return Err(field(name, format!("expected {n} rows, got {}", rows.len())));
    }
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            if row.len() != n {
                return Err(field(format!("{name}[{i}]"), format!("expected {n} entries, got {}", row.len())));
            }
            row.iter().enumerate().map(|(j, v)| v.resolve(&format!("{name}[{i}][{j}]"))).collect()
        })
        .collect()
}

fn matrix_problem(sys: &SystemSection, omega: &FrequencyVector, rho: f64) -> Result<Problem, ConfigError> {
    let n = sys.a.len();
    if n == 0 || n % 2 != 0 {
        return Err(field("system.a", format!("must be a square matrix of even size, got {n} rows")));
    }
    let a_rows = real_matrix(&sys.a, n, "system.a")?;
    let a = ConstMatrix::new(CMat::from_fn(n, n, |i, j| C64::new(a_rows[i][j], 0.0)));
    let mut coeffs = Vec::with_capacity(sys.modes.len());
    for (idx, m) in sys.modes.iter().enumerate() {
        let base = format!("system.modes[{idx}]");
        let k = check_k(&m.k, omega.dim(), &format!("{base}.k"))?;
        let re = real_matrix(&m.re, n, &format!("{base}.re"))?;
        let im = match &m.im {
            Some(rows) => real_matrix(rows, n, &format!("{base}.im"))?,
            None => vec![vec![0.0; n]; n],
        };
        coeffs.push((k, CMat::from_fn(n, n, |i, j| C64::new(re[i][j], im[i][j]))));
    }
    let k_trunc = coeffs.iter().map(|(k, _)| k.l1()).max().unwrap_or(0).max(1);
    let q = QpMatrix::from_coeffs(omega.clone(), n, rho, k_trunc, coeffs).map_err(|e| field("system.modes", e.to_string()))?;
    check_conjugate_symmetry(&q, "system.modes")?;
    Ok(Problem::Matrix { a, q })
}

fn hill_problem(h: &HillSection, omega: &FrequencyVector, rho: f64) -> Result<Problem, ConfigError> {
    let a_bar = h.a_bar.resolve("hill.a_bar")?;
    if !(a_bar > 0.0) {
        return Err(field("hill.a_bar", format!("the average of a(t) must be positive for the stability result, got {a_bar}")));
    }
    let r = omega.dim();
    let one = |z: C64| CMat::from_element(1, 1, z);
    let mut coeffs: Vec<(MultiIndex, CMat)> = vec![(MultiIndex::zero(r), one(C64::new(a_bar, 0.0)))];
    for (idx, c) in h.cosines.iter().enumerate() {
        let base = format!("hill.cosines[{idx}]");
        let k = check_k(&c.k, r, &format!("{base}.k"))?;
        if k.is_zero() {
            return Err(field(format!("{base}.k"), "the zero mode is set by a_bar"));
        }
        let amp = c.amplitude.resolve(&format!("{base}.amplitude"))?;
        coeffs.push((k.neg(), one(C64::new(amp / 2.0, 0.0))));
        coeffs.push((k, one(C64::new(amp / 2.0, 0.0))));
    }
    for (idx, m) in h.modes.iter().enumerate() {
        let base = format!("hill.modes[{idx}]");
        let k = check_k(&m.k, r, &format!("{base}.k"))?;
        if k.is_zero() {
            return Err(field(format!("{base}.k"), "the zero mode is set by a_bar"));
        }
        let z = C64::new(m.re.resolve(&format!("{base}.re"))?, m.im.resolve(&format!("{base}.im"))?);
        coeffs.push((k, one(z)));
    }
    let k_trunc = coeffs.iter().map(|(k, _)| k.l1()).max().unwrap_or(0).max(1);
    let a = QpMatrix::from_coeffs(omega.clone(), 1, rho, k_trunc, coeffs).map_err(|e| field("hill", e.to_string()))?;
    check_conjugate_symmetry(&a, "hill.modes")?;
    HillProblem::new(a).map(Problem::Hill).map_err(|e| field("hill", e.to_string()))
}

fn check_conjugate_symmetry(q: &QpMatrix, name: &str) -> Result<(), ConfigError> {
    let defect = q.conjugate_defect();
    let scale = q.norm().max(1.0);
    if defect > 1e-14 * scale {
        return Err(field(
            name,
            format!("coefficients are not conjugate-symmetric (max |q_(−k) − conj q_k| = {defect:e}); the system must be real"),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literals() {
        assert_eq!(parse_literal("golden").unwrap(), qpkam::hill::golden());
        assert_eq!(parse_literal("-sqrt2").unwrap(), -(2f64.sqrt()));
        assert_eq!(parse_literal("1/3").unwrap(), 1.0 / 3.0);
        assert_eq!(parse_literal(" 2.5e-3 ").unwrap(), 2.5e-3);
        assert!(parse_literal("gold").is_err());
        assert!(parse_literal("1/0").is_err());
    }

    const HILL: &str = r#"
        omega = [1, "golden"]
        [hill]
        a_bar = 1
        cosines = [{ k = [1, 0], amplitude = 0.5 }, { k = [0, 1], amplitude = "1/2" }]
        [run]
        eps = 1e-3
    "#;

    #[test]
    fn hill_config_builds_the_golden_example() {
        let cfg = ProblemConfig::parse(HILL).unwrap();
        let Problem::Hill(p) = &cfg.problem else { panic!("expected hill") };
        let g = HillProblem::golden_example();
        assert_eq!(p.a.coeffs(), g.a.coeffs());
        assert_eq!(cfg.schedule.delta, 0.5);
        assert_eq!(cfg.schedule.tau, 1.2);
        assert_eq!(cfg.seed, DEFAULT_SEED);
    }

    fn err_field(text: &str) -> String {
        match ProblemConfig::parse(text) {
            Err(ConfigError::Field { field, .. }) => field,
            other => panic!("expected a field error, got {other:?}"),
        }
    }

    #[test]
    fn validation_names_the_field() {
        assert_eq!(err_field(&HILL.replace("[1, \"golden\"]", "[1, \"goldn\"]")), "omega[1]");
        assert_eq!(err_field(&format!("{HILL}\n[schedule]\ntau = 1.0\n")), "schedule.tau");
        assert_eq!(err_field(&HILL.replace("omega = [1, \"golden\"]", "omega = [1, \"golden\"]\nrho = -1")), "rho");
        assert_eq!(err_field(&HILL.replace("a_bar = 1", "a_bar = -1")), "hill.a_bar");
        let lopsided = HILL.replace("cosines", "modes = [{ k = [1, 0], re = 0.25, im = 0.1 }]\ncosines");
        assert_eq!(err_field(&lopsided), "hill.modes");
    }

    #[test]
    fn syntax_errors_carry_a_line() {
        match ProblemConfig::parse("omega = [1, \n[hill") {
            Err(ConfigError::Parse { message, .. }) => assert!(message.contains("line"), "{message}"),
            other => panic!("{other:?}"),
        }
    }
}
