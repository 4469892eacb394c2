//! Solution of the homological equation
//!
//! ```text
//!     Ṗ = ΛP − PΛ + R,      R̄ = 0,
//! ```
//!
//! for a zero-average quasi-periodic `P`. In the eigenbasis `Λ = S D S⁻¹`
//! each Fourier mode decouples entrywise:
//!
//! ```text
//!     (i⟨k,ω⟩ − ν_i + ν_j) x^k_ij = y^k_ij,     Y_k = S⁻¹ R_k S,  P_k = S X_k S⁻¹.
//! ```
//!
//! Only the modes present in `R` enter, so the non-resonance condition is a
//! finite check over the support of `R`, performed before any division.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::linalg::{self, CMat, C64, I};
use crate::qpalg::{ConstMatrix, FrequencyVector, MultiIndex, QpError, QpMatrix};
use crate::spectral::{self, EigenDecomposition, SpectralError};

/// Diagonalization tolerance used when `solve` decomposes `Λ` itself.
pub const DEFAULT_TOL_DIAG: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HomologicalError {
    #[error("small divisor at k = {k}, (i, j) = ({i}, {j}): |d| = {modulus:e} below threshold {threshold:e}")]
    SmallDivisor { k: MultiIndex, i: usize, j: usize, modulus: f64, threshold: f64 },
    #[error("right-hand side has nonzero average (‖R̄‖ = {0:e})")]
    NonzeroAverage(f64),
    #[error("shrink width s = {s} must lie in (0, ρ = {rho})")]
    Width { s: f64, rho: f64 },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Series(#[from] QpError),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DivisorEntry {
    pub k: MultiIndex,
    pub i: usize,
    pub j: usize,
    /// `i⟨k,ω⟩ − ν_i + ν_j`.
    pub d: C64,
    pub threshold: f64,
    pub flagged: bool,
}

impl DivisorEntry {
    /// `|d| / threshold`; below one means flagged.
    pub fn margin(&self) -> f64 {
        self.d.norm() / self.threshold
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct DivisorTable {
    pub entries: Vec<DivisorEntry>,
    pub min_modulus: f64,
    pub worst_index: Option<(MultiIndex, usize, usize)>,
}

impl DivisorTable {
    pub fn flagged(&self) -> impl Iterator<Item = &DivisorEntry> {
        self.entries.iter().filter(|e| e.flagged)
    }

    pub fn any_flagged(&self) -> bool {
        self.entries.iter().any(|e| e.flagged)
    }

    /// The flagged entry with the smallest margin.
    pub fn worst_flagged(&self) -> Option<&DivisorEntry> {
        self.flagged().min_by(|a, b| a.margin().total_cmp(&b.margin()))
    }

    /// CSV with columns `k1..kr, i, j, re_d, im_d, threshold, flagged`.
    pub fn write_csv<W: Write>(&self, out: W, r: usize) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (1..=r).map(|j| format!("k{j}")).collect();
        header.extend(["i", "j", "re_d", "im_d", "threshold", "flagged"].map(String::from));
        w.write_record(&header)?;
        for e in &self.entries {
            let mut row: Vec<String> = e.k.components().iter().map(|k| k.to_string()).collect();
            row.push(e.i.to_string());
            row.push(e.j.to_string());
            row.push(format!("{:e}", e.d.re));
            row.push(format!("{:e}", e.d.im));
            row.push(format!("{:e}", e.threshold));
            row.push(e.flagged.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-step non-resonance threshold `α / |k|^{3τ}`.
pub fn divisor_threshold(alpha: f64, tau: f64, k: &MultiIndex) -> f64 {
    alpha / (k.l1() as f64).powf(3.0 * tau)
}

/// Divisor table over an explicit list of modes (zero modes are skipped).
pub fn scan_modes<'a>(
    values: &[C64],
    omega: &FrequencyVector,
    modes: impl IntoIterator<Item = &'a MultiIndex>,
    alpha: f64,
    tau: f64,
) -> DivisorTable {
    let mut table = DivisorTable { min_modulus: f64::INFINITY, ..Default::default() };
    for k in modes {
        if k.is_zero() {
            continue;
        }
        let wk = omega.dot(k);
        let threshold = divisor_threshold(alpha, tau, k);
        for (i, &ni) in values.iter().enumerate() {
            for (j, &nj) in values.iter().enumerate() {
                let d = I * wk - ni + nj;
                let modulus = d.norm();
                if modulus < table.min_modulus {
                    table.min_modulus = modulus;
                    table.worst_index = Some((k.clone(), i, j));
                }
                table.entries.push(DivisorEntry { k: k.clone(), i, j, d, threshold, flagged: modulus < threshold });
            }
        }
    }
    table
}

/// Divisor table over every `0 < |k| ≤ k_max` and every ordered pair `(i, j)`.
pub fn divisor_scan(values: &[C64], omega: &FrequencyVector, k_max: usize, alpha: f64, tau: f64) -> DivisorTable {
    assert!(k_max >= 1, "divisor scan needs K ≥ 1");
    let ball = MultiIndex::ball(omega.dim(), k_max);
    scan_modes(values, omega, &ball, alpha, tau)
}

/// `Σ_{0<|k|≤K} |k|^{3τ} e^{−s|k|} / α`, counting every lattice point.
pub fn majorant_sum(r: usize, k_max: usize, alpha: f64, tau: f64, s: f64) -> f64 {
    (1..=k_max)
        .map(|l| MultiIndex::shell_count(r, l) as f64 * (l as f64).powf(3.0 * tau) * (-s * l as f64).exp())
        .sum::<f64>()
        / alpha
}

#[derive(Clone, Debug)]
pub struct HomologicalSolution {
    pub p: QpMatrix,
    pub divisors: DivisorTable,
    /// `Σ_{0<|k|≤K} |k|^{3τ}e^{−s|k|}/α` for the solve's `α, τ, s`.
    pub bound_witness: f64,
    /// `‖P‖_{ρ−s} / ((1/(α s^ν)) ‖R‖_ρ)` with `ν = 3τ + r`.
    pub measured_c: f64,
    /// `‖S‖·‖S⁻¹‖` of the eigenbasis used.
    pub condition: f64,
    pub alpha: f64,
    pub tau: f64,
}

fn mode_residual(wk: f64, lambda: &CMat, x: &CMat, rk: &CMat) -> CMat {
    x * (I * wk) - lambda * x + x * lambda - rk
}

/// Solves the homological equation after decomposing `Λ`.
pub fn solve(lambda: &ConstMatrix, r: &QpMatrix, alpha: f64, tau: f64, s: f64) -> Result<HomologicalSolution, HomologicalError> {
    let eig = spectral::eigen_decompose(lambda, DEFAULT_TOL_DIAG)?;
    solve_in_basis(lambda, &eig, r, alpha, tau, s)
}

/// Solves the homological equation with a precomputed eigenbasis of `Λ`.
pub fn solve_in_basis(
    lambda: &ConstMatrix,
    eig: &EigenDecomposition,
    r: &QpMatrix,
    alpha: f64,
    tau: f64,
    s: f64,
) -> Result<HomologicalSolution, HomologicalError> {
    if !(s > 0.0 && s < r.rho()) {
        return Err(HomologicalError::Width { s, rho: r.rho() });
    }
    let rbar = r.zero_mode();
    if rbar.iter().any(|z| z.norm() != 0.0) {
        return Err(HomologicalError::NonzeroAverage(linalg::op_norm(&rbar)));
    }
    let omega = r.omega();
    let divisors = scan_modes(&eig.values, omega, r.modes(), alpha, tau);
    if let Some(w) = divisors.worst_flagged() {
        return Err(HomologicalError::SmallDivisor {
            k: w.k.clone(),
            i: w.i,
            j: w.j,
            modulus: w.d.norm(),
            threshold: w.threshold,
        });
    }

    let n = r.dim();
    let (sm, sinv) = (&eig.basis, &eig.basis_inverse);
    let lam = lambda.as_mat();
    let solve_mode = |wk: f64, rhs: &CMat| -> CMat {
        let y = sinv * rhs * sm;
        let x = CMat::from_fn(n, n, |i, j| y[(i, j)] / (I * wk - eig.values[i] + eig.values[j]));
        sm * x * sinv
    };
    let mut coeffs = Vec::with_capacity(r.coeffs().len());
    for (k, rk) in r.coeffs() {
        let wk = omega.dot(k);
        let mut pk = solve_mode(wk, rk);
        // One sweep of iterative refinement against the untransformed identity.
        let defect = mode_residual(wk, lam, &pk, rk);
        if defect.iter().any(|z| z.norm() != 0.0) {
            pk -= solve_mode(wk, &defect);
        }
        coeffs.push((k.clone(), pk));
    }
    let real = r.is_real() && lambda.is_real(0.0);
    let p = QpMatrix::from_coeffs(omega.clone(), n, r.rho() - s, r.truncation(), coeffs)?.with_real_flag(real);

    let rdim = omega.dim();
    let nu = 3.0 * tau + rdim as f64;
    let r_norm = r.norm();
    let measured_c = if r_norm > 0.0 { p.norm() / (r_norm / (alpha * s.powf(nu))) } else { 0.0 };
    Ok(HomologicalSolution {
        bound_witness: majorant_sum(rdim, r.truncation().max(1), alpha, tau, s),
        p,
        divisors,
        measured_c,
        condition: eig.condition(),
        alpha,
        tau,
    })
}

/// Entrywise worst residual of `i⟨k,ω⟩X_k − ΛX_k + X_kΛ − R_k` over all modes.
pub fn coefficient_identity_defect(lambda: &ConstMatrix, r: &QpMatrix, p: &QpMatrix) -> f64 {
    let zero = CMat::zeros(r.dim(), r.dim());
    let mut keys: Vec<&MultiIndex> = r.modes().chain(p.modes()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|k| {
            let rk = r.coeff(k).unwrap_or(&zero);
            let xk = p.coeff(k).unwrap_or(&zero);
            linalg::max_abs(&mode_residual(r.omega().dot(k), lambda.as_mat(), xk, rk))
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs_witness: f64,
    pub passed: bool,
}

/// Compares `‖P‖_{ρ−s}` with the majorant `(Σ |k|^{3τ}e^{−s|k|}/α)·κ²·‖R‖_ρ`,
/// `κ = ‖S‖‖S⁻¹‖`.
pub fn norm_bound_check(sol: &HomologicalSolution, r_norm: f64, rho: f64, s: f64) -> BoundCheck {
    assert!(s < rho, "shrink width must be below ρ");
    let lhs = sol.p.weighted_norm(rho - s).unwrap_or_else(|_| sol.p.norm());
    let sum = majorant_sum(sol.p.omega().dim(), sol.p.truncation().max(1), sol.alpha, sol.tau, s);
    let rhs_witness = sum * sol.condition * sol.condition * r_norm;
    BoundCheck { lhs, rhs_witness, passed: lhs <= rhs_witness }
}
