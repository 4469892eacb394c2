//! The quadratic reduction scheme.
//!
//! Step `m` works on `ẋ = (A_m + e_m Q_m(t)) x` with `e_m = ε^{2^m}`:
//!
//! 1. move the average into the constant part, `A_{m+1} = A_m + e_m Q̄_m`;
//! 2. check the eigenvalue floors of `A_{m+1}` and solve
//!    `Ṗ_m = A_{m+1}P_m − P_mA_{m+1} + Q̃_m` on the narrower strip;
//! 3. change variables by `x_m = E_m x_{m+1}`, `E_m = e^{e_m P_m}`, which
//!    leaves `A_{m+1} + e_m² Q_{m+1}`.
//!
//! `Q_m` is kept unscaled; only the scalar `e_m` carries `ε`. The new
//! perturbation is assembled from the scaled exponential remainders so that
//! no `O(e²)` quantity is ever formed by cancellation.

use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::homological::{self, HomologicalError};
use crate::linalg::{self, CMat, C64};
use crate::qpalg::{ConstMatrix, FrequencyVector, MultiIndex, QpError, QpMatrix};
use crate::spectral::{self, GateDecision, SeparationGate, SpectralError};

/// Truncation order rule `K_{m+1} = min(K_m + increment, cap)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct KGrowth {
    pub increment: usize,
    pub cap: usize,
}

impl KGrowth {
    pub fn next(&self, k: usize) -> usize {
        k.saturating_add(self.increment).min(self.cap)
    }
}

impl Default for KGrowth {
    fn default() -> Self {
        KGrowth { increment: 12, cap: 12 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct KamSchedule {
    pub alpha: f64,
    pub tau: f64,
    pub rho: f64,
    pub delta: f64,
    pub max_steps: usize,
    /// `None` means `1e-14·‖A‖`.
    pub target_residual: Option<f64>,
    pub k_growth: KGrowth,
    pub tol_sym: f64,
    pub tol_diag: f64,
    pub tol_exp: f64,
    /// Relative tolerance of the sampled conjugation cross-check.
    pub tol_conj: f64,
}

impl KamSchedule {
    pub fn new(alpha: f64, tau: f64, rho: f64, delta: f64) -> Self {
        KamSchedule {
            alpha,
            tau,
            rho,
            delta,
            max_steps: 12,
            target_residual: None,
            k_growth: KGrowth::default(),
            tol_sym: 1e-10,
            tol_diag: 1e-10,
            tol_exp: 1e-16,
            tol_conj: 1e-8,
        }
    }

    pub fn with_k_cap(mut self, cap: usize) -> Self {
        self.k_growth = KGrowth { increment: cap, cap };
        self
    }

    /// Non-resonance constant of step `m`: `α/2` first, then `α/(m+1)²`.
    pub fn alpha_at(&self, m: usize) -> f64 {
        if m == 0 {
            self.alpha / 2.0
        } else {
            self.alpha / ((m + 1) * (m + 1)) as f64
        }
    }

    /// Strip reduction of step `m`: `ρ/2` first, then `ρ/2^{m+2}`.
    pub fn s_at(&self, m: usize) -> f64 {
        if m == 0 {
            self.rho / 2.0
        } else {
            self.rho / 2f64.powi(m as i32 + 2)
        }
    }

    /// Strip width on which `Q_m` is measured.
    pub fn rho_at(&self, m: usize) -> f64 {
        if m == 0 {
            return self.rho;
        }
        self.rho / 2.0 - (1..m).map(|j| self.s_at(j)).sum::<f64>()
    }

    /// `ν = 3τ + r`.
    pub fn nu(&self, r: usize) -> f64 {
        3.0 * self.tau + r as f64
    }

    pub fn validate(&self, r: usize) -> Result<(), String> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(format!("{name} must be positive and finite, got {v}"))
            }
        };
        positive("alpha", self.alpha)?;
        positive("rho", self.rho)?;
        positive("delta", self.delta)?;
        if !(self.tau > r as f64 - 1.0) {
            return Err(format!("tau must exceed r − 1 = {}, got {}", r as f64 - 1.0, self.tau));
        }
        if self.k_growth.cap == 0 {
            return Err("truncation cap must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Ok,
    SmallDivisor,
    SeparationLost,
    Diverged,
}

#[derive(Clone, Debug, Serialize)]
pub struct StepRecord {
    pub m: usize,
    pub eps_pow: f64,
    pub alpha_m: f64,
    pub s_m: f64,
    pub rho_m: f64,
    pub k_trunc: usize,
    /// `A_{m+1} = A_m + e_m Q̄_m`; on the terminal step this is `B`.
    pub a_matrix: ConstMatrix,
    pub eigenvalues: Vec<C64>,
    /// `e_m (‖Q_m‖_{ρ_m} + tail)`.
    pub residual_norm: f64,
    pub tail: f64,
    /// `e_m‖Q_m‖_{ρ_m} / (α_m² s_m^{2ν})`.
    pub f_m: f64,
    pub p_norm: f64,
    pub beta: f64,
    pub condition: f64,
    pub divisor_min: f64,
    pub measured_c: f64,
    pub min_abs: f64,
    pub min_gap: f64,
    pub floor: f64,
    pub gate: Option<GateDecision>,
    /// `‖A_{m+1} − A_m‖`.
    pub drift: f64,
    pub hamiltonian_defect: f64,
    pub p_hamiltonian_defect: f64,
    pub conjugation_defect: f64,
    pub exp_terms: usize,
    pub status: StepStatus,
}

impl StepRecord {
    fn new(m: usize, eps_pow: f64, sched: &KamSchedule, k_trunc: usize, a: &ConstMatrix) -> Self {
        StepRecord {
            m,
            eps_pow,
            alpha_m: sched.alpha_at(m),
            s_m: sched.s_at(m),
            rho_m: sched.rho_at(m),
            k_trunc,
            a_matrix: a.clone(),
            eigenvalues: Vec::new(),
            residual_norm: 0.0,
            tail: 0.0,
            f_m: 0.0,
            p_norm: 0.0,
            beta: f64::NAN,
            condition: f64::NAN,
            divisor_min: f64::INFINITY,
            measured_c: f64::NAN,
            min_abs: f64::NAN,
            min_gap: f64::NAN,
            floor: 0.0,
            gate: None,
            drift: 0.0,
            hamiltonian_defect: 0.0,
            p_hamiltonian_defect: 0.0,
            conjugation_defect: 0.0,
            exp_terms: 0,
            status: StepStatus::Ok,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FailureReason {
    InvalidInput { message: String },
    NotHamiltonian { what: String, defect: f64 },
    SmallDivisor { k: MultiIndex, i: usize, j: usize, modulus: f64, threshold: f64 },
    SeparationLost { min_abs: f64, min_gap: f64, floor: f64 },
    Defective { min_separation: f64 },
    Diverged { detail: String },
    Truncation { tail: f64, residual: f64 },
    ConjugationMismatch { defect: f64, bound: f64 },
    MaxSteps { residual: f64 },
}

impl FailureReason {
    fn step_status(&self) -> StepStatus {
        match self {
            FailureReason::SmallDivisor { .. } => StepStatus::SmallDivisor,
            FailureReason::SeparationLost { .. } | FailureReason::Defective { .. } => StepStatus::SeparationLost,
            _ => StepStatus::Diverged,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            FailureReason::InvalidInput { .. } => "invalid_input",
            FailureReason::NotHamiltonian { .. } => "not_hamiltonian",
            FailureReason::SmallDivisor { .. } => "small_divisor",
            FailureReason::SeparationLost { .. } => "separation_lost",
            FailureReason::Defective { .. } => "defective",
            FailureReason::Diverged { .. } => "diverged",
            FailureReason::Truncation { .. } => "truncation",
            FailureReason::ConjugationMismatch { .. } => "conjugation_mismatch",
            FailureReason::MaxSteps { .. } => "max_steps",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum ReductionStatus {
    Reduced,
    Failed { reason: FailureReason, step: usize },
}

impl ReductionStatus {
    pub fn is_reduced(&self) -> bool {
        matches!(self, ReductionStatus::Reduced)
    }

    pub fn label(&self) -> &'static str {
        match self {
            ReductionStatus::Reduced => "reduced",
            ReductionStatus::Failed { reason, .. } => reason.label(),
        }
    }
}

/// One change of variables `x_m = E_m x_{m+1}`, `E_m = e^{e_m P_m}`.
#[derive(Clone, Debug)]
pub struct Factor {
    pub eps_pow: f64,
    pub p: QpMatrix,
    pub e: QpMatrix,
}

#[derive(Serialize)]
struct FactorSummary {
    eps_pow: f64,
    p_norm: f64,
    e_norm: f64,
    modes: usize,
    k_trunc: usize,
    rho: f64,
}

fn summarize_factors<S: Serializer>(factors: &[Factor], s: S) -> Result<S::Ok, S::Error> {
    let v: Vec<FactorSummary> = factors
        .iter()
        .map(|f| FactorSummary {
            eps_pow: f.eps_pow,
            p_norm: f.p.norm(),
            e_norm: f.e.norm(),
            modes: f.p.coeffs().len(),
            k_trunc: f.e.truncation(),
            rho: f.e.rho(),
        })
        .collect();
    v.serialize(s)
}

#[derive(Clone, Debug, Serialize)]
pub struct ReductionResult {
    pub eps: f64,
    pub status: ReductionStatus,
    pub target_residual: f64,
    pub final_residual: f64,
    pub b: ConstMatrix,
    pub b_eigenvalues: Vec<C64>,
    pub schedule: KamSchedule,
    pub trace: Vec<StepRecord>,
    #[serde(serialize_with = "summarize_factors")]
    pub factors: Vec<Factor>,
    pub psi_truncation: usize,
    #[serde(skip)]
    pub omega: FrequencyVector,
}

impl ReductionResult {
    pub fn is_reduced(&self) -> bool {
        self.status.is_reduced()
    }

    pub fn dim(&self) -> usize {
        self.b.dim()
    }

    /// Records of the steps that completed (including the terminal one).
    pub fn ok_steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.trace.iter().filter(|r| r.status == StepStatus::Ok)
    }

    /// `ψ = E_0 E_1 ⋯` truncated at `psi_truncation`.
    pub fn psi(&self) -> Result<QpMatrix, QpError> {
        compose_transformation(&self.omega, self.dim(), self.schedule.rho / 4.0, &self.factors, self.psi_truncation)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization is infallible")
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KamError {
    #[error("exponential argument too large: coeff·‖P‖ = {0} > 1/2")]
    Smallness(f64),
    #[error(transparent)]
    Series(#[from] QpError),
}

/// `E = e^{cP}`, `E⁻¹` and the scaled remainders
/// `R = Σ_{j≥2} c^{j−2}P^j/j!`, `R̃ = Σ_{j≥2} (−1)^j c^{j−2}P^j/j!`,
/// so that `E = I + cP + c²R` and `E⁻¹ ≈ I − cP + c²R̃`.
#[derive(Clone, Debug)]
pub struct QpExponential {
    pub e: QpMatrix,
    pub e_inv: QpMatrix,
    pub rem: QpMatrix,
    pub rem_inv: QpMatrix,
    /// Bound on the omitted series tail, `x^{J+1}/(J+1)!·e^x`, `x = |c|‖P‖`.
    pub remainder_bound: f64,
    pub terms: usize,
}

const MAX_EXP_TERMS: usize = 60;

fn exp_terms(x: f64, tol: f64) -> usize {
    let budget = tol * x.powi(2).min(1.0);
    let mut term = x * x / 2.0;
    let mut j = 2;
    while j < MAX_EXP_TERMS {
        term *= x / (j + 1) as f64;
        if term * x.exp() <= budget {
            break;
        }
        j += 1;
    }
    j
}

/// Truncated exponential of `c·P` with products capped at `k_cap`.
pub fn qp_exponential(p: &QpMatrix, coeff: f64, tol_exp: f64, k_cap: usize) -> Result<QpExponential, KamError> {
    let x = coeff.abs() * p.norm();
    if x > 0.5 {
        return Err(KamError::Smallness(x));
    }
    let id = CMat::identity(p.dim(), p.dim());
    let zero = QpMatrix::zeros(p.omega().clone(), p.dim(), p.rho(), 0);
    if x == 0.0 {
        let e = QpMatrix::identity(p.omega().clone(), p.dim(), p.rho());
        return Ok(QpExponential { e: e.clone(), e_inv: e, rem: zero.clone(), rem_inv: zero, remainder_bound: 0.0, terms: 0 });
    }
    let terms = exp_terms(x, tol_exp);
    let mut term = p.product(p, k_cap)?.scale_real(0.5);
    let mut rem = term.clone();
    let mut rem_inv = term.clone();
    for j in 3..=terms {
        if term.is_zero() {
            break;
        }
        term = term.product(p, k_cap)?.scale_real(coeff / j as f64);
        rem = rem.add(&term)?;
        rem_inv = if j % 2 == 0 { rem_inv.add(&term)? } else { rem_inv.sub(&term)? };
    }
    let remainder_bound = x.powi(terms as i32 + 1) / factorial(terms + 1) * x.exp();
    let cp = p.scale_real(coeff);
    let c2 = coeff * coeff;
    let e = cp.add(&rem.scale_real(c2))?.add_const(&id).add_tail(remainder_bound);
    let e_inv = rem_inv.scale_real(c2).sub(&cp)?.add_const(&id).add_tail(remainder_bound);
    Ok(QpExponential { e, e_inv, rem, rem_inv, remainder_bound, terms })
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|j| j as f64).product()
}

/// Perturbation left after conjugating `A' + e Q̃` by `E = e^{eP}`, where
/// `P` solves `Ṗ = A'P − PA' + Q̃`. With `W = A' + eQ̃` the transformed
/// matrix `E⁻¹(WE − Ė)` equals `A' + e² Q_next` with
///
/// ```text
///     Q_next = Q̃P − PQ̃ − PWP + PṖ + (I − eP)(W R − Ṙ) + R̃ (W E − Ė).
/// ```
pub fn assemble_next_q(
    a_next: &ConstMatrix,
    q_tilde: &QpMatrix,
    p: &QpMatrix,
    exp: &QpExponential,
    eps_pow: f64,
    k_cap: usize,
) -> Result<QpMatrix, QpError> {
    let a = a_next.as_mat();
    let e = eps_pow;
    let qp = q_tilde.product(p, k_cap)?;
    let pq = p.product(q_tilde, k_cap)?;
    let wp = p.left_mul(a).add(&qp.scale_real(e))?;
    let mut out = qp.sub(&pq)?;
    out = out.sub(&p.product(&wp, k_cap)?)?;
    out = out.add(&p.product(&p.derivative(), k_cap)?)?;

    let u = exp.rem.left_mul(a).add(&q_tilde.product(&exp.rem, k_cap)?.scale_real(e))?.sub(&exp.rem.derivative())?;
    out = out.add(&u)?.sub(&p.product(&u, k_cap)?.scale_real(e))?;

    let v = exp.e.left_mul(a).add(&q_tilde.product(&exp.e, k_cap)?.scale_real(e))?.sub(&exp.e.derivative())?;
    out = out.add(&exp.rem_inv.product(&v, k_cap)?)?;
    // The omitted exponential tail makes E⁻¹ differ from the assembled inverse.
    if exp.remainder_bound > 0.0 && e > 0.0 {
        out = out.add_tail(2.0 * exp.remainder_bound * v.norm() / (e * e));
    }
    Ok(out.with_truncation(k_cap))
}

/// Deterministic torus points for sampled cross-checks.
pub fn sample_angles(r: usize, count: usize) -> Vec<Vec<f64>> {
    // Kronecker sequence with square roots of primes.
    const ROOTS: [f64; 8] = [2.0, 3.0, 5.0, 7.0, 11.0, 13.0, 17.0, 19.0];
    (1..=count)
        .map(|j| {
            (0..r)
                .map(|d| {
                    let g = ROOTS[d % ROOTS.len()].sqrt() + (d / ROOTS.len()) as f64;
                    (j as f64 * g).fract() * std::f64::consts::TAU
                })
                .collect()
        })
        .collect()
}

/// `max_θ ‖E(θ)⁻¹(W(θ)E(θ) − Ė(θ)) − A' − e²Q_next(θ)‖` over sample points.
pub fn conjugation_defect(
    a_next: &ConstMatrix,
    q_tilde: &QpMatrix,
    eps_pow: f64,
    e_series: &QpMatrix,
    q_next: &QpMatrix,
    samples: usize,
) -> f64 {
    let de = e_series.derivative();
    let a = a_next.as_mat();
    let e2 = C64::new(eps_pow * eps_pow, 0.0);
    sample_angles(q_tilde.omega().dim(), samples)
        .iter()
        .map(|th| {
            let w = a + q_tilde.evaluate_angles(th) * C64::new(eps_pow, 0.0);
            let ev = e_series.evaluate_angles(th);
            let Some(inv) = linalg::inverse(&ev) else { return f64::INFINITY };
            let g = inv * (w * &ev - de.evaluate_angles(th));
            linalg::op_norm(&(g - a - q_next.evaluate_angles(th) * e2))
        })
        .fold(0.0, f64::max)
}

/// `ψ = E_0 E_1 ⋯ E_{M−1}`; the identity when there are no factors.
pub fn compose_transformation(
    omega: &FrequencyVector,
    n: usize,
    rho: f64,
    factors: &[Factor],
    k_out: usize,
) -> Result<QpMatrix, QpError> {
    let mut psi = QpMatrix::identity(omega.clone(), n, rho);
    for f in factors {
        psi = psi.product(&f.e, k_out)?;
    }
    Ok(psi)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceReport {
    /// Least-squares slope of `log r_{m+1}` against `log r_m`.
    pub slope: f64,
    /// `F_2 / F_1` from the first two steps.
    pub cf1: f64,
    pub points: usize,
    pub conclusive: bool,
}

/// Quadratic-convergence diagnostics from the ok steps of a trace.
pub fn convergence_report(trace: &[StepRecord]) -> ConvergenceReport {
    let ok: Vec<&StepRecord> = trace.iter().filter(|r| r.status == StepStatus::Ok).collect();
    let res: Vec<f64> = ok.iter().map(|r| r.residual_norm).filter(|r| *r > 0.0 && r.is_finite()).collect();
    let pairs: Vec<(f64, f64)> = res.windows(2).map(|w| (w[0].ln(), w[1].ln())).collect();
    let cf1 = if ok.len() >= 2 && ok[0].f_m > 0.0 { ok[1].f_m / ok[0].f_m } else { f64::NAN };
    let conclusive = ok.len() >= 3 && pairs.len() >= 2;
    let slope = if pairs.len() >= 2 { least_squares_slope(&pairs) } else { f64::NAN };
    ConvergenceReport { slope, cf1, points: pairs.len(), conclusive }
}

fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

fn real_if(m: CMat, real: bool) -> CMat {
    if real {
        m.map(|z| C64::new(z.re, 0.0))
    } else {
        m
    }
}

/// Runs the reduction. Failures are reported in the result, never raised.
pub fn reduce(a: &ConstMatrix, q: &QpMatrix, eps: f64, sched: &KamSchedule) -> ReductionResult {
    let mut out = ReductionResult {
        eps,
        status: ReductionStatus::Reduced,
        target_residual: 0.0,
        final_residual: f64::NAN,
        b: a.clone(),
        b_eigenvalues: Vec::new(),
        schedule: sched.clone(),
        trace: Vec::new(),
        factors: Vec::new(),
        psi_truncation: sched.k_growth.cap,
        omega: q.omega().clone(),
    };
    let fail = |mut out: ReductionResult, reason: FailureReason, step: usize| {
        if let Some(last) = out.trace.last_mut() {
            if last.m == step {
                last.status = reason.step_status();
            }
        }
        out.status = ReductionStatus::Failed { reason, step };
        out
    };
    let invalid = |out, message: String| fail(out, FailureReason::InvalidInput { message }, 0);

    let n = a.dim();
    if q.dim() != n {
        return invalid(out, format!("A is {n}×{n} but Q is {}×{}", q.dim(), q.dim()));
    }
    if n % 2 != 0 {
        return invalid(out, format!("Hamiltonian systems need even dimension, got {n}"));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return invalid(out, format!("eps must be positive and finite, got {eps}"));
    }
    if let Err(msg) = sched.validate(q.omega().dim()) {
        return invalid(out, msg);
    }
    if q.rho() < sched.rho * (1.0 - 1e-12) {
        return invalid(out, format!("Q is analytic on width {} but the schedule needs ρ = {}", q.rho(), sched.rho));
    }
    let a_defect = a.hamiltonian_defect().unwrap_or(f64::INFINITY);
    if a_defect > sched.tol_sym * a.op_norm().max(1.0) {
        return fail(out, FailureReason::NotHamiltonian { what: "A".into(), defect: a_defect }, 0);
    }
    let q_defect = q.hamiltonian_defect().unwrap_or(f64::INFINITY);
    if q_defect > sched.tol_sym * q.norm().max(1.0) {
        return fail(out, FailureReason::NotHamiltonian { what: "Q".into(), defect: q_defect }, 0);
    }

    let real = a.is_real(0.0) && q.is_real();
    let r = q.omega().dim();
    let nu = sched.nu(r);
    let target = sched.target_residual.unwrap_or_else(|| {
        let na = a.op_norm();
        let base = if na > 0.0 { na } else { (a.as_mat() + q.zero_mode() * C64::new(eps, 0.0)).iter().map(|z| z.norm()).fold(0.0, f64::max) };
        1e-14 * if base > 0.0 { base } else { 1.0 }
    });
    out.target_residual = target;

    let mut a_m = a.clone();
    let mut q_m = q.clone().with_rho(sched.rho);
    let mut e = eps;
    let mut prev_residual = f64::INFINITY;
    let mut prev_eig: Option<spectral::EigenDecomposition> = None;

    for m in 0..=sched.max_steps {
        let rho_m = sched.rho_at(m);
        let q_norm = q_m.weighted_norm(rho_m).unwrap_or_else(|_| q_m.norm());
        let tail = e * q_m.tail_allowance();
        let residual = e * q_norm + tail;
        let mut rec = StepRecord::new(m, e, sched, q_m.truncation(), &a_m);
        rec.residual_norm = residual;
        rec.tail = tail;
        rec.f_m = e * q_norm / (sched.alpha_at(m).powi(2) * sched.s_at(m).powf(2.0 * nu));
        out.final_residual = residual;

        if !residual.is_finite() {
            out.trace.push(rec);
            return fail(out, FailureReason::Diverged { detail: format!("non-finite residual at step {m}") }, m);
        }

        let qbar = match q_m.average() {
            Ok(c) => c,
            Err(err) => {
                out.trace.push(rec);
                return fail(out, FailureReason::Diverged { detail: err.to_string() }, m);
            }
        };
        let shift = qbar.as_mat() * C64::new(e, 0.0);
        let a_next = ConstMatrix::new(real_if(a_m.as_mat() + &shift, real));
        rec.drift = linalg::op_norm(&shift);
        rec.a_matrix = a_next.clone();
        rec.hamiltonian_defect = a_next.hamiltonian_defect().unwrap_or(f64::INFINITY);
        if rec.hamiltonian_defect > sched.tol_sym * a_next.op_norm().max(1.0) {
            let defect = rec.hamiltonian_defect;
            out.trace.push(rec);
            return fail(out, FailureReason::NotHamiltonian { what: format!("A_{}", m + 1), defect }, m);
        }

        if residual <= target {
            rec.eigenvalues = spectral::eigenvalues(&a_next);
            let (min_abs, min_gap) = spectral::pairwise_separation(&rec.eigenvalues);
            rec.min_abs = min_abs;
            rec.min_gap = min_gap;
            out.b_eigenvalues = rec.eigenvalues.clone();
            out.b = a_next;
            out.trace.push(rec);
            out.status = ReductionStatus::Reduced;
            return out;
        }
        if m == sched.max_steps {
            out.trace.push(rec);
            return fail(out, FailureReason::MaxSteps { residual }, m);
        }
        if residual >= prev_residual {
            let detail = format!("residual grew from {prev_residual:e} to {residual:e}");
            out.trace.push(rec);
            let reason = if tail > 0.5 * residual {
                FailureReason::Truncation { tail, residual }
            } else {
                FailureReason::Diverged { detail }
            };
            return fail(out, reason, m);
        }

        // Eigenvalue floors: 2δε for the first averaged matrix, δε afterwards.
        let eig = match spectral::eigen_decompose(&a_next, sched.tol_diag) {
            Ok(d) => d,
            Err(SpectralError::Defective { min_separation }) => {
                out.trace.push(rec);
                return fail(out, FailureReason::Defective { min_separation }, m);
            }
            Err(err) => {
                out.trace.push(rec);
                return fail(out, FailureReason::Diverged { detail: err.to_string() }, m);
            }
        };
        let (min_abs, min_gap) = spectral::pairwise_separation(&eig.values);
        let floor = if m == 0 { 2.0 } else { 1.0 } * sched.delta * eps;
        rec.eigenvalues = eig.values.clone();
        rec.beta = eig.beta;
        rec.condition = eig.condition();
        rec.min_abs = min_abs;
        rec.min_gap = min_gap;
        rec.floor = floor;
        if let Some(prev) = &prev_eig {
            rec.gate = Some(spectral::perturbation_gate(prev, rec.drift, &SeparationGate::for_eps(sched.delta, eps, n)));
        }
        if min_abs < floor || min_gap < floor {
            out.trace.push(rec);
            return fail(out, FailureReason::SeparationLost { min_abs, min_gap, floor }, m);
        }

        let q_tilde = q_m.without_average();
        let (alpha_m, s_m) = (sched.alpha_at(m), sched.s_at(m));
        let sol = match homological::solve_in_basis(&a_next, &eig, &q_tilde.clone().with_rho(rho_m), alpha_m, sched.tau, s_m) {
            Ok(sol) => sol,
            Err(HomologicalError::SmallDivisor { k, i, j, modulus, threshold }) => {
                rec.divisor_min = modulus;
                out.trace.push(rec);
                return fail(out, FailureReason::SmallDivisor { k, i, j, modulus, threshold }, m);
            }
            Err(err) => {
                out.trace.push(rec);
                return fail(out, FailureReason::Diverged { detail: err.to_string() }, m);
            }
        };
        rec.divisor_min = sol.divisors.min_modulus;
        rec.measured_c = sol.measured_c;
        let p = if real { sol.p.symmetrized_real() } else { sol.p };
        rec.p_norm = p.norm();
        rec.p_hamiltonian_defect = p.hamiltonian_defect().unwrap_or(f64::INFINITY);
        if rec.p_hamiltonian_defect > sched.tol_sym * rec.p_norm.max(1.0) {
            let defect = rec.p_hamiltonian_defect;
            out.trace.push(rec);
            return fail(out, FailureReason::NotHamiltonian { what: format!("P_{m}"), defect }, m);
        }

        let k_next = sched.k_growth.next(q_m.truncation());
        let exp = match qp_exponential(&p, e, sched.tol_exp, k_next) {
            Ok(x) => x,
            Err(err) => {
                out.trace.push(rec);
                return fail(out, FailureReason::Diverged { detail: err.to_string() }, m);
            }
        };
        rec.exp_terms = exp.terms;
        let q_tilde = q_tilde.with_rho(p.rho());
        let q_next = match assemble_next_q(&a_next, &q_tilde, &p, &exp, e, k_next) {
            Ok(qn) => qn,
            Err(err) => {
                out.trace.push(rec);
                return fail(out, FailureReason::Diverged { detail: err.to_string() }, m);
            }
        };
        let q_next = if real { q_next.symmetrized_real() } else { q_next };
        rec.conjugation_defect = conjugation_defect(&a_next, &q_tilde, e, &exp.e, &q_next, 10);
        let bound = sched.tol_conj * (1.0 + a_next.op_norm());
        if !(rec.conjugation_defect <= bound) {
            let defect = rec.conjugation_defect;
            out.trace.push(rec);
            return fail(out, FailureReason::ConjugationMismatch { defect, bound }, m);
        }

        out.trace.push(rec);
        out.factors.push(Factor { eps_pow: e, p, e: exp.e });
        prev_eig = Some(eig);
        prev_residual = residual;
        a_m = a_next;
        q_m = q_next.with_rho(sched.rho_at(m + 1));
        e *= e;
    }
    unreachable!("the loop returns at max_steps")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn om(w: &[f64]) -> FrequencyVector {
        FrequencyVector::new(w.to_vec()).unwrap()
    }

    fn hill_like(eps_amp: f64) -> (ConstMatrix, QpMatrix) {
        let w = om(&[1.0, 0.5 * (1.0 + 5f64.sqrt())]);
        let a = ConstMatrix::from_real_rows(&[&[0.0, 1.0], &[0.0, 0.0]]);
        let c = |v: f64| linalg::from_real(&[&[0.0, 0.0], &[-v, 0.0]]);
        let q = QpMatrix::from_coeffs(
            w,
            2,
            1.0,
            1,
            [
                (MultiIndex::new(vec![0, 0]), c(1.0)),
                (MultiIndex::new(vec![1, 0]), c(eps_amp)),
                (MultiIndex::new(vec![-1, 0]), c(eps_amp)),
                (MultiIndex::new(vec![0, 1]), c(eps_amp)),
                (MultiIndex::new(vec![0, -1]), c(eps_amp)),
            ],
        )
        .unwrap();
        (a, q)
    }

    #[test]
    fn schedule_sequences() {
        let s = KamSchedule::new(0.5, 1.2, 1.0, 0.5);
        assert_eq!(s.alpha_at(0), 0.25);
        assert_eq!(s.alpha_at(1), 0.125);
        assert_eq!(s.alpha_at(2), 0.5 / 9.0);
        assert_eq!(s.s_at(1), 0.125);
        assert_eq!(s.rho_at(1), 0.5);
        assert_eq!(s.rho_at(2), 0.375);
        let total: f64 = (1..40).map(|m| s.s_at(m)).sum();
        assert!(total < 0.25);
        for m in 0..40 {
            assert!(s.rho_at(m) - s.s_at(m) > 0.25);
            assert!((s.rho_at(m + 1) - (s.rho_at(m) - s.s_at(m))).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_perturbation_reduces_immediately() {
        let w = om(&[1.0]);
        let a = ConstMatrix::from_real_rows(&[&[0.0, 1.0], &[0.0, 0.0]]);
        let q = QpMatrix::zeros(w, 2, 1.0, 1);
        let res = reduce(&a, &q, 1e-3, &KamSchedule::new(0.5, 1.0, 1.0, 0.5));
        assert!(res.is_reduced());
        assert_eq!(res.b, a);
        assert!(res.factors.is_empty());
        assert_eq!(res.trace.len(), 1);
    }

    #[test]
    fn exponential_of_zero_and_nilpotent() {
        let w = om(&[1.0]);
        let z = QpMatrix::zeros(w.clone(), 2, 1.0, 2);
        let x = qp_exponential(&z, 0.3, 1e-16, 4).unwrap();
        assert_eq!(x.e.evaluate(0.4), CMat::identity(2, 2));
        assert_eq!(x.remainder_bound, 0.0);
        let nil = QpMatrix::constant(w, &linalg::from_real(&[&[0.0, 1.0], &[0.0, 0.0]]), 1.0);
        let c = 0.25;
        let x = qp_exponential(&nil, c, 1e-16, 4).unwrap();
        assert_eq!(x.e.evaluate(0.0), linalg::from_real(&[&[1.0, c], &[0.0, 1.0]]));
        assert_eq!(x.e_inv.evaluate(0.0), linalg::from_real(&[&[1.0, -c], &[0.0, 1.0]]));
        assert!(qp_exponential(&nil, 0.6, 1e-16, 4).is_err());
    }

    #[test]
    fn convergence_slopes_of_synthetic_traces() {
        let a = ConstMatrix::zeros(2);
        let s = KamSchedule::new(0.5, 1.0, 1.0, 0.5);
        let mk = |rs: &[f64]| -> Vec<StepRecord> {
            rs.iter()
                .enumerate()
                .map(|(m, &r)| {
                    let mut rec = StepRecord::new(m, 1.0, &s, 1, &a);
                    rec.residual_norm = r;
                    rec.f_m = r;
                    rec
                })
                .collect()
        };
        let geo = convergence_report(&mk(&[1e-2, 1e-3, 1e-4, 1e-5]));
        assert!((geo.slope - 1.0).abs() < 1e-12 && geo.conclusive);
        let quad = convergence_report(&mk(&[1e-1, 1e-2, 1e-4, 1e-8]));
        assert!((quad.slope - 2.0).abs() < 1e-12);
        assert!(!convergence_report(&mk(&[1e-1, 1e-2])).conclusive);
    }

    #[test]
    fn hill_like_run_converges() {
        let (a, q) = hill_like(0.25);
        let sched = KamSchedule::new(0.5, 1.2, 1.0, 0.5);
        let res = reduce(&a, &q, 1e-3, &sched);
        assert!(res.is_reduced(), "{:?}", res.status);
        assert!(res.final_residual <= 1e-14);
        for rec in res.ok_steps() {
            assert!(rec.conjugation_defect <= 1e-8 * 2.0);
            assert!(rec.drift <= rec.residual_norm * (1.0 + 1e-12));
        }
        let b = res.b.as_mat();
        assert!(linalg::hamiltonian_defect(b) < 1e-12);
    }

    #[test]
    fn non_hamiltonian_input_fails_as_data() {
        let (_, q) = hill_like(0.25);
        let a = ConstMatrix::identity(2);
        let res = reduce(&a, &q, 1e-3, &KamSchedule::new(0.5, 1.2, 1.0, 0.5));
        assert!(matches!(res.status, ReductionStatus::Failed { reason: FailureReason::NotHamiltonian { .. }, step: 0 }));
    }
}
