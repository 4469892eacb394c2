//! Hill's equation `ẍ + ε a(t) x = 0` as the system
//!
//! ```text
//!     ẋ = (A + εQ(t)) x,   A = [[0, 1], [0, 0]],   Q = [[0, 0], [−a(t), 0]].
//! ```
//!
//! After averaging, `A + εQ̄` has eigenvalues `±i√(āε)`; the reduced matrix
//! `B` has `±i√b` with `b = āε + O(ε²)`.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::Serialize;
use thiserror::Error;

use crate::diophantine::{self, CheckOutcome, DiophantineSpec, ExponentMode};
use crate::kam::{self, KamSchedule, ReductionResult};
use crate::linalg::{CMat, C64};
use crate::oracle::{self, IntegratorConfig, OracleError};
use crate::qpalg::{ConstMatrix, FrequencyVector, MultiIndex, QpError, QpMatrix};
use crate::spectral;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HillError {
    #[error("the average of a(t) must be positive, got ā = {0}")]
    NonPositiveAverage(f64),
    #[error("a(t) must be a scalar series, got {0}×{0}")]
    NotScalar(usize),
    #[error("a(t) must be real-valued (conjugate defect {0:e})")]
    NotReal(f64),
    #[error("frequency analysis needs a stable verdict")]
    Inapplicable,
    #[error(transparent)]
    Series(#[from] QpError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

#[derive(Clone, Debug)]
pub struct HillProblem {
    pub a: QpMatrix,
    pub a_bar: f64,
    pub omega: FrequencyVector,
    pub rho: f64,
}

impl HillProblem {
    pub fn new(a: QpMatrix) -> Result<Self, HillError> {
        if a.dim() != 1 {
            return Err(HillError::NotScalar(a.dim()));
        }
        let defect = a.conjugate_defect();
        if defect > 0.0 {
            return Err(HillError::NotReal(defect));
        }
        let a_bar = a.average()?.as_mat()[(0, 0)].re;
        if !(a_bar > 0.0) {
            return Err(HillError::NonPositiveAverage(a_bar));
        }
        Ok(HillProblem { omega: a.omega().clone(), rho: a.rho(), a_bar, a })
    }

    /// `a(t) = ā + Σ h cos(⟨k,ω⟩t)` over the given `(k, h)` terms.
    pub fn cosine(omega: FrequencyVector, a_bar: f64, terms: &[(MultiIndex, f64)], rho: f64) -> Result<Self, HillError> {
        let r = omega.dim();
        let one = |v: f64| CMat::from_element(1, 1, C64::new(v, 0.0));
        let mut coeffs = vec![(MultiIndex::zero(r), one(a_bar))];
        for (k, h) in terms {
            coeffs.push((k.clone(), one(h / 2.0)));
            coeffs.push((k.neg(), one(h / 2.0)));
        }
        let k_trunc = terms.iter().map(|(k, _)| k.l1()).max().unwrap_or(0).max(1);
        HillProblem::new(QpMatrix::from_coeffs(omega, 1, rho, k_trunc, coeffs)?)
    }

    /// `a ≡ ā`.
    pub fn autonomous(omega: FrequencyVector, a_bar: f64, rho: f64) -> Result<Self, HillError> {
        HillProblem::cosine(omega, a_bar, &[], rho)
    }

    /// `ā = 1`, `ω = (1, golden ratio)`, `a = 1 + ½cos ω₁t + ½cos ω₂t`, `ρ = 1`.
    pub fn golden_example() -> Self {
        let omega = FrequencyVector::new(vec![1.0, golden()]).expect("finite");
        HillProblem::cosine(omega, 1.0, &[(MultiIndex::unit(2, 0), 0.5), (MultiIndex::unit(2, 1), 0.5)], 1.0)
            .expect("valid example")
    }

    /// `δ = √ā / 2`.
    pub fn delta(&self) -> f64 {
        0.5 * self.a_bar.sqrt()
    }

    /// Schedule with the problem's `ρ` and `δ` and truncation cap `k_cap`.
    pub fn schedule(&self, alpha: f64, tau: f64, k_cap: usize) -> KamSchedule {
        KamSchedule::new(alpha, tau, self.rho, self.delta()).with_k_cap(k_cap)
    }

    /// `Σ_{k≠0} |a_k|² / ⟨k,ω⟩²`: the second-order coefficient of `b(ε)`
    /// predicted by averaging (`Σ h²/(2⟨k,ω⟩²)` for cosine terms).
    pub fn averaging_coefficient(&self) -> f64 {
        self.a
            .coeffs()
            .iter()
            .filter(|(k, _)| !k.is_zero())
            .map(|(k, c)| c[(0, 0)].norm_sqr() / self.omega.dot(k).powi(2))
            .sum()
    }
}

pub fn golden() -> f64 {
    0.5 * (1.0 + 5f64.sqrt())
}

/// `A = [[0,1],[0,0]]`, `Q(t) = [[0,0],[−a(t),0]]`.
pub fn build_system(p: &HillProblem) -> (ConstMatrix, QpMatrix) {
    let a = ConstMatrix::from_real_rows(&[&[0.0, 1.0], &[0.0, 0.0]]);
    let coeffs = p.a.coeffs().iter().map(|(k, c)| {
        let mut m = CMat::zeros(2, 2);
        m[(1, 0)] = -c[(0, 0)];
        (k.clone(), m)
    });
    let q = QpMatrix::from_coeffs(p.omega.clone(), 2, p.rho, p.a.truncation(), coeffs).expect("shape preserved");
    (a, q)
}

/// `b` from a 2×2 matrix whose eigenvalues are `±i√b`: the determinant,
/// after checking that the pair is purely imaginary and symmetric within
/// `tol·|λ|`.
pub fn extract_b(b: &ConstMatrix, tol: f64) -> Option<f64> {
    if b.dim() != 2 {
        return None;
    }
    let v = spectral::eigenvalues(b);
    let scale = v[0].norm().max(v[1].norm());
    if scale == 0.0 || pair_defect(&v) > tol * scale {
        return None;
    }
    let m = b.as_mat();
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    (det.re > 0.0).then_some(det.re)
}

/// Distance of a two-element spectrum from an exact `±iβ` pair.
pub fn pair_defect(v: &[C64]) -> f64 {
    (v[0] + v[1]).norm().max(v[0].re.abs()).max(v[1].re.abs())
}

#[derive(Clone, Debug, Serialize)]
pub struct HillVerdict {
    pub eps: f64,
    pub b: Option<f64>,
    pub stable: bool,
    pub out_of_domain: bool,
    pub reduction: Option<ReductionResult>,
    pub pair_defect: Option<f64>,
    pub frequency_check: Option<CheckOutcome>,
    /// `max ‖Φ(t) − ψ(t)e^{Bt}ψ(0)⁻¹‖` over the oracle samples.
    pub oracle_agreement: Option<f64>,
    pub det_drift: Option<f64>,
    /// `sup (|x| + |ẋ|/√b)` over the horizon relative to its initial value.
    pub amplitude_ratio: Option<f64>,
    /// `√b / √ε`.
    pub root_ratio: Option<f64>,
    pub oracle_error: Option<String>,
}

impl HillVerdict {
    pub fn status(&self) -> &str {
        if self.out_of_domain {
            "out_of_domain"
        } else {
            self.reduction.as_ref().map_or("not_run", |r| r.status.label())
        }
    }
}

/// `sup_t (|x| + |ẋ|/√b) / (|x₀| + |ẋ₀|/√b)` for each column of `Φ`.
pub fn amplitude_ratio(phi: &[DMatrix<f64>], b: f64) -> f64 {
    let rb = b.sqrt();
    let mut worst = 0.0_f64;
    for col in 0..2 {
        let amp = |m: &DMatrix<f64>| m[(0, col)].abs() + m[(1, col)].abs() / rb;
        let a0 = amp(&DMatrix::identity(2, 2));
        worst = phi.iter().map(|m| amp(m) / a0).fold(worst, f64::max);
    }
    worst
}

/// Reduction plus oracle validation at one `ε`.
pub fn run(p: &HillProblem, eps: f64, sched: &KamSchedule, cfg: &IntegratorConfig) -> HillVerdict {
    let mut v = HillVerdict {
        eps,
        b: None,
        stable: false,
        out_of_domain: false,
        reduction: None,
        pair_defect: None,
        frequency_check: None,
        oracle_agreement: None,
        det_drift: None,
        amplitude_ratio: None,
        root_ratio: None,
        oracle_error: None,
    };
    if !(eps > 0.0) {
        v.out_of_domain = true;
        return v;
    }
    let (a, q) = build_system(p);
    let res = kam::reduce(&a, &q, eps, sched);
    if res.is_reduced() {
        v.pair_defect = Some(pair_defect(&spectral::eigenvalues(&res.b)));
        v.b = extract_b(&res.b, 1e-10);
    }
    match oracle::integrate_fundamental(&a, &q, eps, cfg) {
        Ok(sol) => {
            v.det_drift = Some(sol.det_drift);
            if res.is_reduced() {
                v.oracle_agreement = oracle::compare_with_reduction(&sol, &res).ok();
            }
            if let Some(b) = v.b {
                v.amplitude_ratio = Some(amplitude_ratio(&sol.phi, b));
            }
        }
        Err(e) => v.oracle_error = Some(e.to_string()),
    }
    if let Some(b) = v.b {
        v.root_ratio = Some(b.sqrt() / eps.sqrt());
        let spec = DiophantineSpec::new(sched.alpha, sched.tau, ExponentMode::BaseTau, sched.k_growth.cap);
        v.frequency_check = Some(diophantine::check_extended_frequencies(&p.omega, b, &spec));
        v.stable = v.amplitude_ratio.is_some_and(|r| r <= 3.0);
    }
    v.reduction = Some(res);
    v
}

#[derive(Clone, Debug, Serialize)]
pub struct BFit {
    /// Leading coefficient, expected to be `ā`.
    pub slope: f64,
    /// Second-order coefficient `C`.
    pub curvature: f64,
    /// `(ε, b, b − fit)` for every successful run.
    pub points: Vec<(f64, f64, f64)>,
    /// `max |b − fit| / ε³`.
    pub max_scaled_residual: f64,
    pub successes: usize,
    pub conclusive: bool,
}

/// Weighted least squares `b ≈ c₁ε + c₂ε²` with residuals scaled by `ε⁻³`,
/// so every point is judged against the cubic term it should leave.
pub fn fit_quadratic(points: &[(f64, f64)]) -> (f64, f64) {
    let (mut s11, mut s12, mut s22, mut t1, mut t2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(e, b) in points {
        let w = e.powi(-6);
        let (x1, x2) = (e, e * e);
        s11 += w * x1 * x1;
        s12 += w * x1 * x2;
        s22 += w * x2 * x2;
        t1 += w * x1 * b;
        t2 += w * x2 * b;
    }
    let det = s11 * s22 - s12 * s12;
    ((t1 * s22 - t2 * s12) / det, (s11 * t2 - s12 * t1) / det)
}

/// Runs the reduction over `eps_list` and fits `b(ε)`.
pub fn b_scaling_fit(p: &HillProblem, eps_list: &[f64], sched: &KamSchedule) -> BFit {
    let (a, q) = build_system(p);
    let samples: Vec<(f64, f64)> = eps_list
        .par_iter()
        .filter_map(|&eps| {
            let res = kam::reduce(&a, &q, eps, sched);
            if !res.is_reduced() {
                return None;
            }
            extract_b(&res.b, 1e-10).map(|b| (eps, b))
        })
        .collect();
    let successes = samples.len();
    if successes < 5 {
        return BFit {
            slope: f64::NAN,
            curvature: f64::NAN,
            points: samples.iter().map(|&(e, b)| (e, b, f64::NAN)).collect(),
            max_scaled_residual: f64::NAN,
            successes,
            conclusive: false,
        };
    }
    let (slope, curvature) = fit_quadratic(&samples);
    let points: Vec<(f64, f64, f64)> = samples.iter().map(|&(e, b)| (e, b, b - slope * e - curvature * e * e)).collect();
    let max_scaled_residual = points.iter().map(|&(e, _, r)| r.abs() / e.powi(3)).fold(0.0, f64::max);
    BFit { slope, curvature, points, max_scaled_residual, successes, conclusive: true }
}

#[derive(Clone, Debug, Serialize)]
pub struct FrequencyReport {
    pub sqrt_b: f64,
    /// Refined frequency of the dominant spectral peak.
    pub peak: f64,
    pub relative_error: f64,
    /// `π · (sign changes) / T`.
    pub zero_crossing_frequency: f64,
    /// `(frequency, amplitude)` of the strongest local maxima, refined.
    pub peaks: Vec<(f64, f64)>,
    /// Non-resonance of `(ω, √b)`. The `k = (0,…,0,1)` term alone needs
    /// `α/2 ≤ √b`, so this fails for any `α` above `2√b`.
    pub extended: CheckOutcome,
    /// Dominant frequency within `10⁻⁴·√b` of `√b`.
    pub passed: bool,
}

fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|j| 0.5 - 0.5 * (std::f64::consts::TAU * j as f64 / (n - 1) as f64).cos()).collect()
}

/// `|Σ w_j x_j e^{−iΩt_j}| / Σ w_j`.
fn windowed_amplitude(x: &[f64], w: &[f64], dt: f64, freq: f64) -> f64 {
    let (mut re, mut im) = (0.0, 0.0);
    for (j, (xj, wj)) in x.iter().zip(w).enumerate() {
        let (s, c) = (freq * dt * j as f64).sin_cos();
        re += wj * xj * c;
        im -= wj * xj * s;
    }
    2.0 * (re * re + im * im).sqrt() / w.iter().sum::<f64>()
}

fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let g = 1.0 / golden();
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > tol {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        }
    }
    0.5 * (lo + hi)
}

/// Spectral peaks of a real signal: coarse FFT maxima refined by
/// maximizing the windowed amplitude. Sorted by amplitude, strongest first.
pub fn spectrum_peaks(x: &[f64], dt: f64, count: usize) -> Vec<(f64, f64)> {
    let n = x.len();
    let w = hann(n);
    let mut buf: Vec<rustfft::num_complex::Complex<f64>> =
        x.iter().zip(&w).map(|(xi, wi)| rustfft::num_complex::Complex::new(xi * wi, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let mag: Vec<f64> = buf[..n / 2].iter().map(|z| z.norm()).collect();
    let bin = std::f64::consts::TAU / (n as f64 * dt);
    let mut maxima: Vec<usize> = (2..mag.len().saturating_sub(1)).filter(|&j| mag[j] > mag[j - 1] && mag[j] >= mag[j + 1]).collect();
    maxima.sort_by(|&a, &b| mag[b].total_cmp(&mag[a]));
    maxima.truncate(count);
    let mut peaks: Vec<(f64, f64)> = maxima
        .into_iter()
        .map(|j| {
            let f = golden_max(|fr| windowed_amplitude(x, &w, dt, fr), (j as f64 - 1.0) * bin, (j as f64 + 1.0) * bin, 1e-13 * bin.max(1.0));
            (f, windowed_amplitude(x, &w, dt, f))
        })
        .collect();
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1));
    peaks
}

/// Integrates one orbit with generic initial data and compares its
/// dominant frequency with `√b`; also runs the extended non-resonance check.
pub fn frequency_analysis(
    p: &HillProblem,
    verdict: &HillVerdict,
    horizon: f64,
    sched: &KamSchedule,
    cfg: &IntegratorConfig,
) -> Result<FrequencyReport, HillError> {
    let b = match (verdict.stable, verdict.b) {
        (true, Some(b)) => b,
        _ => return Err(HillError::Inapplicable),
    };
    let sqrt_b = b.sqrt();
    let fastest = p.omega.as_slice().iter().map(|w| w.abs()).fold(sqrt_b, f64::max) + sqrt_b;
    let dt = (std::f64::consts::PI / (4.0 * fastest)).min(0.5);
    let n = (horizon / dt).floor() as usize + 1;
    let times: Vec<f64> = (0..n).map(|j| j as f64 * dt).collect();
    let (a, q) = build_system(p);
    let orbit = oracle::integrate_orbit(&a, &q, verdict.eps, &[1.0, 0.37 * sqrt_b], &times, &cfg.clone().with_horizon(horizon))?;
    let x: Vec<f64> = orbit.iter().map(|s| s[0]).collect();

    let peaks = spectrum_peaks(&x, dt, 5);
    let peak = peaks.first().map_or(f64::NAN, |p| p.0);
    let crossings = x.windows(2).filter(|w| w[0].signum() != w[1].signum() && w[1] != 0.0).count();
    let zero_crossing_frequency = std::f64::consts::PI * crossings as f64 / times[n - 1];
    let spec = DiophantineSpec::new(sched.alpha, sched.tau, ExponentMode::BaseTau, sched.k_growth.cap);
    let extended = diophantine::check_extended_frequencies(&p.omega, b, &spec);
    let relative_error = (peak - sqrt_b).abs() / sqrt_b;
    Ok(FrequencyReport {
        sqrt_b,
        peak,
        relative_error,
        zero_crossing_frequency,
        peaks,
        passed: relative_error <= 1e-4,
        extended,
    })
}

/// CSV with columns `eps, status, b, stable, sqrt_b_over_sqrt_eps, oracle_agreement`.
pub fn write_verdicts_csv<W: Write>(verdicts: &[HillVerdict], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["eps", "status", "b", "stable", "sqrt_b_over_sqrt_eps", "oracle_agreement"])?;
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:e}"));
    for v in verdicts {
        w.write_record([
            format!("{:e}", v.eps),
            v.status().to_string(),
            opt(v.b),
            v.stable.to_string(),
            opt(v.root_ratio),
            opt(v.oracle_agreement),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Log-spaced `ε` values from `lo` to `hi` inclusive.
pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    assert!(count >= 2 && lo > 0.0 && hi > lo);
    let (l0, l1) = (lo.ln(), hi.ln());
    (0..count).map(|j| (l0 + (l1 - l0) * j as f64 / (count - 1) as f64).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;

    #[test]
    fn constant_a_gives_constant_q() {
        let p = HillProblem::autonomous(FrequencyVector::new(vec![1.0]).unwrap(), 1.0, 1.0).unwrap();
        let (a, q) = build_system(&p);
        assert_eq!(q.coeffs().len(), 1);
        assert_eq!(q.evaluate(0.3), linalg::from_real(&[&[0.0, 0.0], &[-1.0, 0.0]]));
        assert!(a.is_hamiltonian(0.0).unwrap() && q.is_hamiltonian(0.0).unwrap());
        assert_eq!(spectral::eigenvalues(&a), vec![C64::new(0.0, 0.0); 2]);
    }

    #[test]
    fn averaged_matrix_has_root_pair() {
        let p = HillProblem::golden_example();
        let (a, q) = build_system(&p);
        let eps = 1e-3;
        let a1 = ConstMatrix::new(a.as_mat() + q.average().unwrap().as_mat() * C64::new(eps, 0.0));
        let v = spectral::eigenvalues(&a1);
        assert!((v[1] - C64::new(0.0, eps.sqrt())).norm() < 1e-15);
        let (_, gap) = spectral::pairwise_separation(&v);
        assert!(gap >= 2.0 * p.delta() * eps);
    }

    #[test]
    fn non_positive_average_rejected() {
        let w = FrequencyVector::new(vec![1.0]).unwrap();
        assert!(matches!(HillProblem::autonomous(w, -1.0, 1.0), Err(HillError::NonPositiveAverage(_))));
    }

    #[test]
    fn zero_eps_is_out_of_domain() {
        let p = HillProblem::golden_example();
        let v = run(&p, 0.0, &p.schedule(0.5, 1.2, 12), &IntegratorConfig::default());
        assert!(v.out_of_domain && !v.stable && v.b.is_none());
    }

    #[test]
    fn autonomous_b_is_exact() {
        let p = HillProblem::autonomous(FrequencyVector::new(vec![1.0, golden()]).unwrap(), 1.0, 1.0).unwrap();
        let (a, q) = build_system(&p);
        let res = kam::reduce(&a, &q, 0.01, &p.schedule(0.5, 1.2, 12));
        assert!(res.is_reduced());
        assert_eq!(extract_b(&res.b, 1e-12), Some(0.01));
    }

    #[test]
    fn weighted_fit_recovers_exact_quadratic() {
        let pts: Vec<(f64, f64)> = log_spaced(1e-4, 1e-2, 10).into_iter().map(|e| (e, 2.0 * e + 0.3 * e * e)).collect();
        let (c1, c2) = fit_quadratic(&pts);
        assert!((c1 - 2.0).abs() < 1e-12 && (c2 - 0.3).abs() < 1e-8);
    }

    #[test]
    fn peak_finder_locates_a_pure_tone() {
        let dt = 0.5;
        let f = 0.0731;
        let x: Vec<f64> = (0..20000).map(|j| (f * dt * j as f64 + 0.4).cos() + 1e-3 * (1.3 * dt * j as f64).sin()).collect();
        let peaks = spectrum_peaks(&x, dt, 3);
        assert!((peaks[0].0 - f).abs() < 1e-9 * f + 1e-10, "{:?}", peaks);
        assert!((peaks[0].1 - 1.0).abs() < 1e-3);
    }
}
