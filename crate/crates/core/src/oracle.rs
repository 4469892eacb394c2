//! Brute-force integration of `Ẋ = (A + εQ(t)) X`.
//!
//! Gragg–Bulirsch–Stoer: modified-midpoint sweeps with `2, 4, …, 2k`
//! substeps, polynomial extrapolation in `h²` to order `2k`, and step-size
//! control from the last two extrapolation columns. `Q(t)` is evaluated
//! directly from its Fourier series at every stage.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kam::ReductionResult;
use crate::linalg::{self, C64};
use crate::qpalg::{ConstMatrix, QpError, QpMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    /// Extrapolation columns `k`; the method has order `2k`.
    pub columns: usize,
    /// Local error tolerance per step (mixed absolute/relative).
    pub tol: f64,
    /// Constant step instead of adaptive control.
    pub fixed_step: Option<f64>,
    pub max_step: f64,
    pub horizon: f64,
    /// Spacing of recorded samples.
    pub sample_dt: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig { columns: 8, tol: 1e-13, fixed_step: None, max_step: 1.0, horizon: 100.0, sample_dt: 1.0 }
    }
}

impl IntegratorConfig {
    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn with_sample_dt(mut self, dt: f64) -> Self {
        self.sample_dt = dt;
        self
    }

    /// Sample times `0, dt, 2dt, …` ending exactly at the horizon.
    pub fn sample_times(&self) -> Vec<f64> {
        let steps = (self.horizon / self.sample_dt).ceil().max(1.0) as usize;
        let mut v: Vec<f64> = (0..steps).map(|j| j as f64 * self.sample_dt).collect();
        v.push(self.horizon);
        v
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("integration failed at t = {t}: {detail}")]
    StepFailure { t: f64, detail: String },
    #[error("system is not real-valued (imaginary part {0:e})")]
    NotReal(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// `Φ(t)` at the sample times, `Φ(0) = I`.
#[derive(Clone, Debug)]
pub struct FundamentalSolution {
    pub times: Vec<f64>,
    pub phi: Vec<DMatrix<f64>>,
    /// `max |det Φ(t) − 1|` over the samples.
    pub det_drift: f64,
}

impl FundamentalSolution {
    /// `max ‖Φ(t)ᵀJΦ(t) − J‖` entrywise.
    pub fn symplectic_drift(&self) -> f64 {
        self.phi.iter().map(|p| linalg::symplectic_defect(&linalg::complexify(p))).fold(0.0, f64::max)
    }

    /// CSV with columns `t, phi_11, phi_12, …, det`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.phi.first().map_or(0, |p| p.nrows());
        let mut header = vec!["t".to_string()];
        for i in 1..=n {
            for j in 1..=n {
                header.push(format!("phi_{i}{j}"));
            }
        }
        header.push("det".into());
        w.write_record(&header)?;
        for (t, p) in self.times.iter().zip(&self.phi) {
            let mut row = vec![format!("{t:e}")];
            for i in 0..n {
                for j in 0..n {
                    row.push(format!("{:e}", p[(i, j)]));
                }
            }
            row.push(format!("{:e}", p.determinant()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Real linear vector field `t ↦ A + εQ(t)`.
struct Field {
    a: DMatrix<f64>,
    modes: Vec<(f64, DMatrix<f64>, DMatrix<f64>)>,
    evals: usize,
}

impl Field {
    fn new(a: &ConstMatrix, q: &QpMatrix, eps: f64) -> Result<Field, OracleError> {
        let n = a.dim();
        if q.dim() != n {
            return Err(OracleError::Dimension(format!("A is {n}×{n}, Q is {0}×{0}", q.dim())));
        }
        let imag = linalg::max_imag(a.as_mat());
        if imag > 0.0 || q.conjugate_defect() > 1e-12 * q.norm().max(1.0) {
            return Err(OracleError::NotReal(imag.max(q.conjugate_defect())));
        }
        let modes = q
            .coeffs()
            .iter()
            .map(|(k, c)| (q.omega().dot(k), c.map(|z| eps * z.re), c.map(|z| eps * z.im)))
            .collect();
        Ok(Field { a: linalg::real_part(a.as_mat()), modes, evals: 0 })
    }

    fn matrix(&mut self, t: f64) -> DMatrix<f64> {
        self.evals += 1;
        let mut m = self.a.clone();
        for (w, re, im) in &self.modes {
            let (s, c) = (w * t).sin_cos();
            m += re * c - im * s;
        }
        m
    }
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// One extrapolated step of size `h` from `(t, x)`. Returns the estimate
/// and its error indicator.
fn gbs_step(field: &mut Field, t: f64, x: &DMatrix<f64>, h: f64, columns: usize) -> (DMatrix<f64>, f64) {
    let f0 = field.matrix(t) * x;
    let mut prev: Vec<DMatrix<f64>> = Vec::new();
    let mut err = 0.0;
    for j in 1..=columns {
        let nsub = 2 * j;
        let hs = h / nsub as f64;
        let mut z0 = x.clone();
        let mut z1 = x + &f0 * hs;
        for i in 1..nsub {
            let z2 = &z0 + field.matrix(t + i as f64 * hs) * &z1 * (2.0 * hs);
            z0 = z1;
            z1 = z2;
        }
        let end = field.matrix(t + h) * &z1;
        let mut row = vec![(&z1 + &z0 + end * hs) * 0.5];
        for l in 1..j {
            let ratio = (j as f64 / (j - l) as f64).powi(2);
            let next = &row[l - 1] + (&row[l - 1] - &prev[l - 1]) / (ratio - 1.0);
            row.push(next);
        }
        if j > 1 {
            err = max_abs(&(&row[j - 1] - &row[j - 2]));
        }
        prev = row;
    }
    (prev.pop().expect("at least one column"), err)
}

/// Integrates `Ẋ = (A + εQ(t))X` from `x0` at `t0` through `times`
/// (monotone in either direction), returning the state at each time.
pub fn integrate_to(
    a: &ConstMatrix,
    q: &QpMatrix,
    eps: f64,
    x0: &DMatrix<f64>,
    t0: f64,
    times: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Vec<DMatrix<f64>>, OracleError> {
    let mut field = Field::new(a, q, eps)?;
    if x0.nrows() != a.dim() {
        return Err(OracleError::Dimension(format!("initial state has {} rows, expected {}", x0.nrows(), a.dim())));
    }
    assert!(cfg.columns >= 1, "at least one extrapolation column");
    let order = 2 * cfg.columns;
    let mut out = Vec::with_capacity(times.len());
    let mut t = t0;
    let mut x = x0.clone();
    let mut h_try = cfg.fixed_step.unwrap_or(cfg.max_step.min(0.1));
    for &target in times {
        let dir = if target >= t { 1.0 } else { -1.0 };
        while (target - t) * dir > 0.0 {
            let remaining = (target - t).abs();
            let mut h = h_try.abs().min(cfg.max_step).min(remaining);
            let last = h >= remaining * (1.0 - 1e-13);
            if last {
                h = remaining;
            }
            let (xn, err) = gbs_step(&mut field, t, &x, dir * h, cfg.columns);
            if cfg.fixed_step.is_some() {
                x = xn;
                t = if last { target } else { t + dir * h };
                continue;
            }
            let scale = 1.0 + max_abs(&x);
            let ratio = err / (cfg.tol * scale);
            if !ratio.is_finite() {
                return Err(OracleError::StepFailure { t, detail: "non-finite state".into() });
            }
            let factor = if ratio == 0.0 { 4.0 } else { (0.9 * ratio.powf(-1.0 / (order as f64 - 1.0))).clamp(0.2, 4.0) };
            if ratio <= 1.0 {
                x = xn;
                t = if last { target } else { t + dir * h };
                // A step shortened to hit a sample says nothing about the natural size.
                if !last || factor < 1.0 {
                    h_try = h * factor;
                }
            } else {
                h_try = h * factor;
                if h_try < 1e-12 * (1.0 + t.abs()) {
                    return Err(OracleError::StepFailure { t, detail: format!("step size underflow (error ratio {ratio:e})") });
                }
            }
        }
        out.push(x.clone());
    }
    Ok(out)
}

/// `Φ(t)` on the configured sample grid.
pub fn integrate_fundamental(a: &ConstMatrix, q: &QpMatrix, eps: f64, cfg: &IntegratorConfig) -> Result<FundamentalSolution, OracleError> {
    let n = a.dim();
    let times = cfg.sample_times();
    let phi = integrate_to(a, q, eps, &DMatrix::identity(n, n), 0.0, &times, cfg)?;
    let det_drift = phi.iter().map(|p| (p.determinant() - 1.0).abs()).fold(0.0, f64::max);
    Ok(FundamentalSolution { times, phi, det_drift })
}

/// A single orbit `x(t)` sampled at `times`.
pub fn integrate_orbit(
    a: &ConstMatrix,
    q: &QpMatrix,
    eps: f64,
    x0: &[f64],
    times: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Vec<Vec<f64>>, OracleError> {
    let x = DMatrix::from_column_slice(x0.len(), 1, x0);
    Ok(integrate_to(a, q, eps, &x, 0.0, times, cfg)?.into_iter().map(|m| m.column(0).iter().copied().collect()).collect())
}

/// `max_t ‖Φ(t) − ψ(t) e^{Bt} ψ(0)⁻¹‖` over the solution's samples.
pub fn compare_with_reduction(sol: &FundamentalSolution, result: &ReductionResult) -> Result<f64, QpError> {
    let psi = result.psi()?;
    let psi0_inv = linalg::inverse(&psi.evaluate(0.0)).ok_or_else(|| QpError::Structural("ψ(0) is singular".into()))?;
    let b = result.b.as_mat();
    let mut worst = 0.0_f64;
    for (t, phi) in sol.times.iter().zip(&sol.phi) {
        let model = psi.evaluate(*t) * linalg::expm(&(b * C64::new(*t, 0.0))) * &psi0_inv;
        worst = worst.max(linalg::op_norm(&(model - linalg::complexify(phi))));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qpalg::FrequencyVector;

    fn zero_q(n: usize) -> QpMatrix {
        QpMatrix::zeros(FrequencyVector::new(vec![1.0]).unwrap(), n, 1.0, 1)
    }

    #[test]
    fn nilpotent_flow_is_a_shear() {
        let a = ConstMatrix::from_real_rows(&[&[0.0, 1.0], &[0.0, 0.0]]);
        let sol = integrate_fundamental(&a, &zero_q(2), 0.0, &IntegratorConfig::default().with_horizon(10.0)).unwrap();
        for (t, p) in sol.times.iter().zip(&sol.phi) {
            let exact = DMatrix::from_row_slice(2, 2, &[1.0, *t, 0.0, 1.0]);
            assert!(max_abs(&(p - exact)) < 1e-12);
        }
    }

    #[test]
    fn rotation_returns_after_one_period() {
        let a = ConstMatrix::from_real_rows(&[&[0.0, 1.0], &[-1.0, 0.0]]);
        let cfg = IntegratorConfig { horizon: std::f64::consts::TAU, sample_dt: std::f64::consts::TAU, ..Default::default() };
        let sol = integrate_fundamental(&a, &zero_q(2), 0.0, &cfg).unwrap();
        let last = sol.phi.last().unwrap();
        assert!(max_abs(&(last - DMatrix::identity(2, 2))) < 1e-10);
        assert!(sol.det_drift < 1e-12);
    }

    #[test]
    fn backward_integration_retraces() {
        let a = ConstMatrix::from_real_rows(&[&[0.0, 1.0], &[-0.3, 0.0]]);
        let cfg = IntegratorConfig::default();
        let fwd = integrate_to(&a, &zero_q(2), 0.0, &DMatrix::identity(2, 2), 0.0, &[25.0], &cfg).unwrap();
        let back = integrate_to(&a, &zero_q(2), 0.0, &fwd[0], 25.0, &[0.0], &cfg).unwrap();
        assert!(max_abs(&(&back[0] - DMatrix::identity(2, 2))) < 1e-10);
    }

    #[test]
    fn fixed_step_order_four() {
        let a = ConstMatrix::from_real_rows(&[&[0.0, 1.0], &[-1.0, 0.0]]);
        let err = |h: f64| {
            let cfg = IntegratorConfig { columns: 2, fixed_step: Some(h), ..Default::default() };
            let x = integrate_to(&a, &zero_q(2), 0.0, &DMatrix::identity(2, 2), 0.0, &[2.0], &cfg).unwrap();
            let exact = DMatrix::from_row_slice(2, 2, &[2f64.cos(), 2f64.sin(), -2f64.sin(), 2f64.cos()]);
            max_abs(&(&x[0] - exact))
        };
        let rate = (err(0.1) / err(0.05)).log2();
        assert!((rate - 4.0).abs() < 0.3, "observed order {rate}");
    }
}
