//! Eigenvalues, eigenbases and separation checks for small constant matrices.
//!
//! For `n ≤ 4` the spectrum comes from the explicitly expanded
//! characteristic polynomial (Faddeev–LeVerrier coefficients, closed-form
//! quadratic, Aberth iteration above that). Larger matrices go through a
//! shifted QR iteration. Eigenvectors are obtained by inverse iteration and
//! the decomposition is certified by its residual.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, CMat, C64};
use crate::qpalg::ConstMatrix;

/// Largest dimension handled.
pub const MAX_DIM: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("matrix is not diagonalizable within tolerance (minimal eigenvalue separation {min_separation:e})")]
    Defective { min_separation: f64 },
    #[error("eigen-decomposition residual {residual:e} exceeds {bound:e}")]
    NotConverged { residual: f64, bound: f64 },
    #[error("dimension {0} is outside the supported range 1..={MAX_DIM}")]
    Dimension(usize),
}

/// `S⁻¹ M S = diag(values)` with `beta = max(‖S‖, ‖S⁻¹‖)`.
#[derive(Clone, Debug)]
pub struct EigenDecomposition {
    pub values: Vec<C64>,
    pub basis: CMat,
    pub basis_inverse: CMat,
    pub beta: f64,
    /// `‖S⁻¹MS − diag(values)‖`.
    pub diag_residual: f64,
}

impl EigenDecomposition {
    /// `‖S‖·‖S⁻¹‖`.
    pub fn condition(&self) -> f64 {
        linalg::op_norm(&self.basis) * linalg::op_norm(&self.basis_inverse)
    }

    /// `S · diag(values) · S⁻¹`.
    pub fn reconstruct(&self) -> CMat {
        let d = CMat::from_diagonal(&DVector::from_vec(self.values.clone()));
        &self.basis * d * &self.basis_inverse
    }
}

/// Separation floors for the iteration's eigenvalues.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationGate {
    pub gamma: f64,
    pub delta: f64,
    pub n: usize,
}

impl SeparationGate {
    pub fn new(gamma: f64, delta: f64, n: usize) -> Self {
        assert!(gamma > 0.0, "separation floor must be positive");
        SeparationGate { gamma, delta, n }
    }

    /// Gate used at parameter `eps`: floor `γ = δε`.
    pub fn for_eps(delta: f64, eps: f64, n: usize) -> Self {
        SeparationGate::new(delta * eps, delta, n)
    }
}

/// Outcome of [`perturbation_gate`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub passed: bool,
    pub threshold: f64,
    /// `2β`: the conditioning bound guaranteed for the perturbed basis when
    /// the gate passes.
    pub beta_bound: f64,
}

/// Whether a perturbation of size `delta_norm` is small enough to keep the
/// eigenvalues simple: `delta_norm < γ / ((3n − 1) β²)`.
pub fn perturbation_gate(prev: &EigenDecomposition, delta_norm: f64, gate: &SeparationGate) -> GateDecision {
    let n = gate.n as f64;
    let threshold = gate.gamma / ((3.0 * n - 1.0) * prev.beta * prev.beta);
    GateDecision { passed: delta_norm < threshold, threshold, beta_bound: 2.0 * prev.beta }
}

/// `(min_i |λ_i|, min_{i≠j} |λ_i − λ_j|)`. The gap is `+∞` for one value.
pub fn pairwise_separation(values: &[C64]) -> (f64, f64) {
    let min_abs = values.iter().map(|z| z.norm()).fold(f64::INFINITY, f64::min);
    let mut min_gap = f64::INFINITY;
    for (i, a) in values.iter().enumerate() {
        for b in &values[i + 1..] {
            min_gap = min_gap.min((a - b).norm());
        }
    }
    (min_abs, min_gap)
}

/// Whether the multiset `{λ}` equals `{−λ}` within `tol` (greedy matching).
pub fn plus_minus_symmetric(values: &[C64], tol: f64) -> bool {
    let mut used = vec![false; values.len()];
    for v in values {
        let target = -v;
        let best = values
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .min_by(|a, b| (a.1 - target).norm().total_cmp(&(b.1 - target).norm()));
        match best {
            Some((j, w)) if (w - target).norm() <= tol => used[j] = true,
            _ => return false,
        }
    }
    true
}

/// Nearest-neighbour pairing of `next` onto `prev`; `None` if two previous
/// eigenvalues claim the same successor.
pub fn match_eigenvalues(prev: &[C64], next: &[C64]) -> Option<Vec<usize>> {
    let mut pairing = Vec::with_capacity(prev.len());
    for p in prev {
        let (j, _) = next
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - p).norm().total_cmp(&(b.1 - p).norm()))?;
        if pairing.contains(&j) {
            return None;
        }
        pairing.push(j);
    }
    Some(pairing)
}

/// Monic characteristic polynomial coefficients `c_0, …, c_{n−1}, 1` of
/// `det(λI − M)` by the Faddeev–LeVerrier recursion.
pub fn characteristic_polynomial(m: &CMat) -> Vec<C64> {
    let n = m.nrows();
    let mut c = vec![C64::new(0.0, 0.0); n + 1];
    c[n] = C64::new(1.0, 0.0);
    let id = CMat::identity(n, n);
    let mut mk = CMat::zeros(n, n);
    for k in 1..=n {
        mk = m * &mk + &id * c[n - k + 1];
        let am = m * &mk;
        c[n - k] = -am.trace() / k as f64;
    }
    c
}

fn horner(c: &[C64], z: C64) -> (C64, C64) {
    let mut p = C64::new(0.0, 0.0);
    let mut dp = C64::new(0.0, 0.0);
    for &a in c.iter().rev() {
        dp = dp * z + p;
        p = p * z + a;
    }
    (p, dp)
}

fn quadratic_roots(b: C64, c: C64) -> [C64; 2] {
    // λ² + bλ + c; the sign of the root is chosen to avoid cancellation.
    let disc = (b * b - c * 4.0).sqrt();
    let s = if (b.conj() * disc).re >= 0.0 { disc } else { -disc };
    let q = -(b + s) * 0.5;
    if q == C64::new(0.0, 0.0) {
        return [q, q];
    }
    [q, c / q]
}

/// Roots of a monic polynomial by Aberth–Ehrlich iteration, polished by Newton.
fn aberth_roots(c: &[C64]) -> Vec<C64> {
    let n = c.len() - 1;
    let radius = (0..n)
        .map(|i| c[i].norm().powf(1.0 / (n - i) as f64))
        .fold(0.0_f64, f64::max)
        .max(1e-8)
        * 1.5;
    let mut z: Vec<C64> = (0..n)
        .map(|j| C64::from_polar(radius, 2.0 * std::f64::consts::PI * j as f64 / n as f64 + 0.4))
        .collect();
    for _ in 0..500 {
        let mut biggest = 0.0_f64;
        for i in 0..n {
            let (p, dp) = horner(c, z[i]);
            if p == C64::new(0.0, 0.0) {
                continue;
            }
            let ratio = p / dp;
            let sum: C64 = (0..n).filter(|&j| j != i).map(|j| C64::new(1.0, 0.0) / (z[i] - z[j])).sum();
            let w = ratio / (C64::new(1.0, 0.0) - ratio * sum);
            if w.re.is_finite() && w.im.is_finite() {
                z[i] -= w;
                biggest = biggest.max(w.norm() / z[i].norm().max(1.0));
            }
        }
        if biggest < 1e-16 {
            break;
        }
    }
    for zi in z.iter_mut() {
        for _ in 0..3 {
            let (p, dp) = horner(c, *zi);
            if dp.norm() == 0.0 {
                break;
            }
            let step = p / dp;
            if !(step.re.is_finite() && step.im.is_finite()) {
                break;
            }
            *zi -= step;
        }
    }
    z
}

/// Eigenvalues of a general complex matrix by shifted QR with deflation.
fn qr_eigenvalues(m: &CMat) -> Vec<C64> {
    let mut h = m.clone();
    let mut hi = h.nrows();
    let mut out = Vec::with_capacity(hi);
    let scale = linalg::op_norm(m).max(f64::MIN_POSITIVE);
    let mut iter_since_deflation = 0usize;
    while hi > 0 {
        if hi == 1 {
            out.push(h[(0, 0)]);
            break;
        }
        let last = hi - 1;
        let off: f64 = (0..last).map(|j| h[(last, j)].norm()).fold(0.0, f64::max);
        if off <= f64::EPSILON * (h[(last, last)].norm() + scale) || iter_since_deflation > 300 {
            out.push(h[(last, last)]);
            hi -= 1;
            iter_since_deflation = 0;
            h = h.view((0, 0), (hi, hi)).into_owned();
            continue;
        }
        // Wilkinson shift from the trailing 2×2 block.
        let (a, b, c, d) = (h[(last - 1, last - 1)], h[(last - 1, last)], h[(last, last - 1)], h[(last, last)]);
        let tr = a + d;
        let det = a * d - b * c;
        let [r1, r2] = quadratic_roots(-tr, det);
        let mut mu = if (r1 - d).norm() < (r2 - d).norm() { r1 } else { r2 };
        if iter_since_deflation > 0 && iter_since_deflation % 20 == 0 {
            mu += C64::new(0.75 * off, 0.25 * off);
        }
        let shifted = &h - CMat::identity(hi, hi) * mu;
        let qr = shifted.qr();
        let (q, r) = (qr.q(), qr.r());
        h = r * q + CMat::identity(hi, hi) * mu;
        iter_since_deflation += 1;
    }
    out
}

fn raw_eigenvalues(m: &CMat) -> Vec<C64> {
    let n = m.nrows();
    match n {
        1 => vec![m[(0, 0)]],
        2 => {
            let c = characteristic_polynomial(m);
            quadratic_roots(c[1], c[0]).to_vec()
        }
        3 | 4 => aberth_roots(&characteristic_polynomial(m)),
        _ => qr_eigenvalues(m),
    }
}

/// Deterministic order: real part first (quantized so that round-off noise
/// cannot swap a ± imaginary pair), then imaginary part.
fn sort_values(values: &mut [C64], scale: f64) {
    let q = 1e-9 * scale.max(1.0);
    values.sort_by(|a, b| {
        // Adding zero folds −0 into +0, which total_cmp would otherwise order apart.
        let ka = (a.re / q).round() + 0.0;
        let kb = (b.re / q).round() + 0.0;
        ka.total_cmp(&kb).then(a.im.total_cmp(&b.im))
    });
}

fn inverse_iteration(m: &CMat, lambda: C64, scale: f64) -> Option<DVector<C64>> {
    let n = m.nrows();
    let mut v = DVector::from_fn(n, |i, _| C64::new(1.0 + 0.37 * i as f64, 0.11 * (i as f64 + 1.0)));
    v /= C64::new(v.norm(), 0.0);
    let mut shift = lambda;
    for attempt in 0..4 {
        let a = m - CMat::identity(n, n) * shift;
        let lu = a.lu();
        let mut ok = true;
        for _ in 0..3 {
            match lu.solve(&v) {
                Some(w) if w.iter().all(|z| z.re.is_finite() && z.im.is_finite()) && w.norm() > 0.0 => {
                    v = &w / C64::new(w.norm(), 0.0);
                }
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            return Some(v);
        }
        shift = lambda + C64::new(1e-14, 1e-14) * scale.max(1e-300) * 10f64.powi(attempt);
    }
    None
}

/// Eigenvalues only, in the deterministic order; no diagonalizability needed.
pub fn eigenvalues(m: &ConstMatrix) -> Vec<C64> {
    let mat = m.as_mat();
    let mut values = raw_eigenvalues(mat);
    sort_values(&mut values, linalg::op_norm(mat));
    values
}

/// Eigen-decomposition `M = S diag(μ) S⁻¹` certified to `tol`.
pub fn eigen_decompose(m: &ConstMatrix, tol: f64) -> Result<EigenDecomposition, SpectralError> {
    let mat = m.as_mat();
    let n = mat.nrows();
    if n == 0 || n > MAX_DIM {
        return Err(SpectralError::Dimension(n));
    }
    let scale = linalg::op_norm(mat);
    let mut values = raw_eigenvalues(mat);
    sort_values(&mut values, scale);
    let (_, min_gap) = pairwise_separation(&values);
    if n > 1 && min_gap <= 64.0 * f64::EPSILON * scale.max(f64::MIN_POSITIVE) {
        return Err(SpectralError::Defective { min_separation: min_gap });
    }
    let mut basis = CMat::zeros(n, n);
    for (j, &lam) in values.iter().enumerate() {
        let v = inverse_iteration(mat, lam, scale).ok_or(SpectralError::Defective { min_separation: min_gap })?;
        basis.set_column(j, &v);
    }
    let basis_inverse = linalg::inverse(&basis).ok_or(SpectralError::Defective { min_separation: min_gap })?;
    let cond = linalg::op_norm(&basis) * linalg::op_norm(&basis_inverse);
    if !cond.is_finite() || cond * tol >= 1.0 {
        return Err(SpectralError::Defective { min_separation: min_gap });
    }
    let d = CMat::from_diagonal(&DVector::from_vec(values.clone()));
    let residual = linalg::op_norm(&(mat * &basis - &basis * &d));
    let bound = tol * scale.max(f64::MIN_POSITIVE);
    if residual > bound {
        return Err(SpectralError::NotConverged { residual, bound });
    }
    let diag_residual = linalg::op_norm(&(&basis_inverse * mat * &basis - d));
    let beta = linalg::op_norm(&basis).max(linalg::op_norm(&basis_inverse));
    Ok(EigenDecomposition { values, basis, basis_inverse, beta, diag_residual })
}
