//! Analytic quasi-periodic matrices stored as truncated Fourier series.
//!
//! A [`QpMatrix`] holds coefficients `Q_k` for integer vectors `k` in the
//! ℓ¹ ball `|k| ≤ K` and represents `Q(t) = Σ_k Q_k e^{i⟨k,ω⟩t}`. The
//! weighted norm is
//!
//! ```text
//!     ‖Q‖_ρ = max_i Σ_j Σ_k |(Q_k)_{ij}| e^{|k|ρ}
//! ```
//!
//! which is submultiplicative, so every truncation of a product can be
//! accounted for by a scalar `tail_allowance` bounding (in the same norm) the
//! mass that was discarded.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, CMat, C64};

/// Relative drop tolerance applied after products.
pub const DROP_TOL: f64 = 1e-16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("norm requested at width {requested} beyond the analyticity width {available}")]
    Domain { requested: f64, available: f64 },
    #[error("structural mismatch: {0}")]
    Structural(String),
    #[error("stored mode {k} has ⟨k,ω⟩ = 0, so the zero mode is not the time average")]
    ResonantRepresentation { k: MultiIndex },
    #[error("invalid frequency vector: {0}")]
    InvalidFrequencies(String),
    #[error("malformed series document: {0}")]
    Format(String),
}

/// Basic frequencies `ω ∈ R^r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FrequencyVector(Vec<f64>);

impl FrequencyVector {
    pub fn new(omega: Vec<f64>) -> Result<Self, QpError> {
        if omega.is_empty() {
            return Err(QpError::InvalidFrequencies("at least one frequency is required".into()));
        }
        if let Some(bad) = omega.iter().find(|w| !w.is_finite()) {
            return Err(QpError::InvalidFrequencies(format!("non-finite entry {bad}")));
        }
        Ok(FrequencyVector(omega))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// `⟨k, ω⟩`, summed in index order.
    pub fn dot(&self, k: &MultiIndex) -> f64 {
        debug_assert_eq!(k.dim(), self.dim());
        k.0.iter().zip(&self.0).map(|(&ki, &wi)| ki as f64 * wi).sum()
    }

    /// `(ω, extra)`, used for the extended frequency checks.
    pub fn extended(&self, extra: f64) -> Result<Self, QpError> {
        let mut v = self.0.clone();
        v.push(extra);
        FrequencyVector::new(v)
    }
}

impl TryFrom<Vec<f64>> for FrequencyVector {
    type Error = QpError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        FrequencyVector::new(v)
    }
}

impl From<FrequencyVector> for Vec<f64> {
    fn from(f: FrequencyVector) -> Self {
        f.0
    }
}

/// Integer Fourier index `k ∈ Z^r`. Ordered lexicographically.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MultiIndex(Vec<i32>);

impl MultiIndex {
    pub fn new(k: Vec<i32>) -> Self {
        MultiIndex(k)
    }

    pub fn zero(r: usize) -> Self {
        MultiIndex(vec![0; r])
    }

    pub fn unit(r: usize, j: usize) -> Self {
        let mut k = vec![0; r];
        k[j] = 1;
        MultiIndex(k)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn components(&self) -> &[i32] {
        &self.0
    }

    /// `|k| = Σ_j |k_j|`.
    pub fn l1(&self) -> usize {
        self.0.iter().map(|k| k.unsigned_abs() as usize).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&k| k == 0)
    }

    pub fn neg(&self) -> Self {
        MultiIndex(self.0.iter().map(|k| -k).collect())
    }

    pub fn add(&self, other: &MultiIndex) -> Self {
        MultiIndex(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// All `k ∈ Z^r` with `|k| ≤ max_l1`, sorted.
    pub fn ball(r: usize, max_l1: usize) -> Vec<MultiIndex> {
        fn rec(r: usize, budget: usize, prefix: &mut Vec<i32>, out: &mut Vec<MultiIndex>) {
            if prefix.len() == r {
                out.push(MultiIndex(prefix.clone()));
                return;
            }
            let b = budget as i32;
            for v in -b..=b {
                prefix.push(v);
                rec(r, budget - v.unsigned_abs() as usize, prefix, out);
                prefix.pop();
            }
        }
        let mut out = Vec::new();
        rec(r, max_l1, &mut Vec::with_capacity(r), &mut out);
        out
    }

    /// Number of `k ∈ Z^r` with `|k| = l` exactly.
    pub fn shell_count(r: usize, l: usize) -> u64 {
        if l == 0 {
            return 1;
        }
        // Σ_i 2^i C(r,i) C(l−1,i−1): choose i nonzero coordinates, their signs,
        // and a composition of l into i positive parts.
        (1..=r.min(l))
            .map(|i| (1u64 << i) * binomial(r as u64, i as u64) * binomial(l as u64 - 1, i as u64 - 1))
            .sum()
    }
}

fn binomial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, k) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{k}")?;
        }
        write!(f, ")")
    }
}

/// Constant `n × n` complex matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstMatrix(CMat);

impl ConstMatrix {
    pub fn new(m: CMat) -> Self {
        assert!(m.is_square(), "constant matrices are square");
        ConstMatrix(m)
    }

    pub fn from_real_rows(rows: &[&[f64]]) -> Self {
        ConstMatrix::new(linalg::from_real(rows))
    }

    pub fn identity(n: usize) -> Self {
        ConstMatrix(CMat::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        ConstMatrix(CMat::zeros(n, n))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_mat(&self) -> &CMat {
        &self.0
    }

    pub fn into_inner(self) -> CMat {
        self.0
    }

    pub fn op_norm(&self) -> f64 {
        linalg::op_norm(&self.0)
    }

    pub fn hamiltonian_defect(&self) -> Result<f64, QpError> {
        if self.dim() % 2 != 0 {
            return Err(QpError::Structural(format!(
                "Hamiltonian structure needs even dimension, got {}",
                self.dim()
            )));
        }
        Ok(linalg::hamiltonian_defect(&self.0))
    }

    /// `J⁻¹M` symmetric within `tol` entrywise.
    pub fn is_hamiltonian(&self, tol: f64) -> Result<bool, QpError> {
        Ok(self.hamiltonian_defect()? <= tol)
    }

    pub fn is_real(&self, tol: f64) -> bool {
        linalg::max_imag(&self.0) <= tol
    }
}

impl Serialize for ConstMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let (re, im) = split_matrix(&self.0);
        MatrixWire { re, im }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ConstMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = MatrixWire::deserialize(d)?;
        let n = w.re.len();
        let m = join_matrix(&w.re, &w.im, n).map_err(serde::de::Error::custom)?;
        Ok(ConstMatrix(m))
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixWire {
    re: Vec<Vec<f64>>,
    im: Vec<Vec<f64>>,
}

fn split_matrix(m: &CMat) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let rows = |f: fn(&C64) -> f64| {
        (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| f(&m[(i, j)])).collect())
            .collect()
    };
    (rows(|z| z.re), rows(|z| z.im))
}

fn join_matrix(re: &[Vec<f64>], im: &[Vec<f64>], n: usize) -> Result<CMat, QpError> {
    let shape_ok = |rows: &[Vec<f64>]| rows.len() == n && rows.iter().all(|r| r.len() == n);
    if !shape_ok(re) || !shape_ok(im) {
        return Err(QpError::Format(format!("expected {n}×{n} real and imaginary parts")));
    }
    Ok(CMat::from_fn(n, n, |i, j| C64::new(re[i][j], im[i][j])))
}

/// Truncated Fourier series of an `n × n` complex matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct QpMatrix {
    omega: FrequencyVector,
    n: usize,
    rho: f64,
    k_trunc: usize,
    coeffs: BTreeMap<MultiIndex, CMat>,
    real: bool,
    tail_allowance: f64,
}

impl QpMatrix {
    pub fn zeros(omega: FrequencyVector, n: usize, rho: f64, k_trunc: usize) -> Self {
        assert!(rho > 0.0 && n > 0);
        QpMatrix { omega, n, rho, k_trunc, coeffs: BTreeMap::new(), real: true, tail_allowance: 0.0 }
    }

    pub fn constant(omega: FrequencyVector, m: &CMat, rho: f64) -> Self {
        let r = omega.dim();
        let mut q = QpMatrix::zeros(omega, m.nrows(), rho, 0);
        q.real = linalg::max_imag(m) == 0.0;
        q.coeffs.insert(MultiIndex::zero(r), m.clone());
        q.prune_exact_zeros();
        q
    }

    pub fn identity(omega: FrequencyVector, n: usize, rho: f64) -> Self {
        QpMatrix::constant(omega, &CMat::identity(n, n), rho)
    }

    /// Builds a series from explicit coefficients. The real-valuedness flag
    /// is set iff the coefficients are exactly conjugate-symmetric.
    pub fn from_coeffs<I>(omega: FrequencyVector, n: usize, rho: f64, k_trunc: usize, coeffs: I) -> Result<Self, QpError>
    where
        I: IntoIterator<Item = (MultiIndex, CMat)>,
    {
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(QpError::Structural(format!("analyticity width must be positive, got {rho}")));
        }
        if n == 0 {
            return Err(QpError::Structural("dimension must be positive".into()));
        }
        let mut q = QpMatrix::zeros(omega, n, rho, k_trunc);
        for (k, c) in coeffs {
            if k.dim() != q.omega.dim() {
                return Err(QpError::Structural(format!("index {k} has {} components, expected {}", k.dim(), q.omega.dim())));
            }
            if k.l1() > k_trunc {
                return Err(QpError::Structural(format!("index {k} exceeds truncation |k| ≤ {k_trunc}")));
            }
            if c.nrows() != n || c.ncols() != n {
                return Err(QpError::Structural(format!("coefficient at {k} is {}×{}, expected {n}×{n}", c.nrows(), c.ncols())));
            }
            if c.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                return Err(QpError::Structural(format!("coefficient at {k} is not finite")));
            }
            *q.coeffs.entry(k).or_insert_with(|| CMat::zeros(n, n)) += c;
        }
        q.prune_exact_zeros();
        q.real = q.conjugate_defect() == 0.0;
        Ok(q)
    }

    pub fn omega(&self) -> &FrequencyVector {
        &self.omega
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn truncation(&self) -> usize {
        self.k_trunc
    }

    pub fn is_real(&self) -> bool {
        self.real
    }

    pub fn tail_allowance(&self) -> f64 {
        self.tail_allowance
    }

    pub fn coeffs(&self) -> &BTreeMap<MultiIndex, CMat> {
        &self.coeffs
    }

    pub fn coeff(&self, k: &MultiIndex) -> Option<&CMat> {
        self.coeffs.get(k)
    }

    pub fn modes(&self) -> impl Iterator<Item = &MultiIndex> {
        self.coeffs.keys()
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Asserts (or retracts) real-valuedness on the real torus.
    pub fn with_real_flag(mut self, real: bool) -> Self {
        self.real = real;
        self
    }

    /// Restricts the series to a narrower strip.
    pub fn with_rho(mut self, rho: f64) -> Self {
        assert!(rho > 0.0);
        self.rho = rho;
        self
    }

    pub fn with_truncation(mut self, k_trunc: usize) -> Self {
        let dropped = self.split_beyond(k_trunc, self.rho);
        self.k_trunc = k_trunc;
        self.tail_allowance += dropped;
        self
    }

    pub fn add_tail(mut self, extra: f64) -> Self {
        self.tail_allowance += extra;
        self
    }

    /// `‖M‖_ρ`; requires `ρ` inside the analyticity strip.
    pub fn weighted_norm(&self, rho: f64) -> Result<f64, QpError> {
        if rho > self.rho * (1.0 + 1e-12) {
            return Err(QpError::Domain { requested: rho, available: self.rho });
        }
        Ok(self.weighted_norm_unchecked(rho))
    }

    /// `‖M‖_ρ` at the series' own width.
    pub fn norm(&self) -> f64 {
        self.weighted_norm_unchecked(self.rho)
    }

    fn weighted_norm_unchecked(&self, rho: f64) -> f64 {
        let mut rows = vec![0.0; self.n];
        for (k, c) in &self.coeffs {
            let w = (k.l1() as f64 * rho).exp();
            for (i, row) in rows.iter_mut().enumerate() {
                *row += w * c.row(i).iter().map(|z| z.norm()).sum::<f64>();
            }
        }
        rows.into_iter().fold(0.0, f64::max)
    }

    fn check_compatible(&self, other: &QpMatrix) -> Result<(), QpError> {
        if self.n != other.n {
            return Err(QpError::Structural(format!("dimension {} vs {}", self.n, other.n)));
        }
        if self.omega != other.omega {
            return Err(QpError::Structural(format!(
                "frequency vectors differ: {:?} vs {:?}",
                self.omega.as_slice(),
                other.omega.as_slice()
            )));
        }
        Ok(())
    }

    /// Convolution product truncated to `|k| ≤ min(K_A + K_B, k_cap)`.
    ///
    /// Discarded modes (beyond the cap, or below the relative drop tolerance)
    /// are measured in the output norm and added to `tail_allowance`, which
    /// also absorbs the propagated tails of both factors.
    pub fn product(&self, other: &QpMatrix, k_cap: usize) -> Result<QpMatrix, QpError> {
        self.check_compatible(other)?;
        let rho = self.rho.min(other.rho);
        let k_out = (self.k_trunc + other.k_trunc).min(k_cap);
        let mut acc: BTreeMap<MultiIndex, CMat> = BTreeMap::new();
        for (ka, ca) in &self.coeffs {
            for (kb, cb) in &other.coeffs {
                let k = ka.add(kb);
                let p = ca * cb;
                match acc.get_mut(&k) {
                    Some(slot) => *slot += p,
                    None => {
                        acc.insert(k, p);
                    }
                }
            }
        }
        let (na, nb) = (self.weighted_norm_unchecked(rho), other.weighted_norm_unchecked(rho));
        let (ta, tb) = (self.tail_allowance, other.tail_allowance);
        let mut out = QpMatrix {
            omega: self.omega.clone(),
            n: self.n,
            rho,
            k_trunc: k_out,
            coeffs: acc,
            real: self.real && other.real,
            tail_allowance: ta * nb + na * tb + ta * tb,
        };
        let beyond = out.split_beyond(k_out, rho);
        let dropped = out.prune(DROP_TOL);
        out.tail_allowance += beyond + dropped;
        debug_assert!(out.norm() <= na * nb * (1.0 + 1e-12) + 1e-300);
        Ok(out)
    }

    /// Removes modes with `|k| > k_max`; returns their weighted mass.
    fn split_beyond(&mut self, k_max: usize, rho: f64) -> f64 {
        let far: Vec<MultiIndex> = self.coeffs.keys().filter(|k| k.l1() > k_max).cloned().collect();
        if far.is_empty() {
            return 0.0;
        }
        let mut removed = QpMatrix::zeros(self.omega.clone(), self.n, rho, usize::MAX);
        for k in far {
            let c = self.coeffs.remove(&k).expect("key listed above");
            removed.coeffs.insert(k, c);
        }
        removed.weighted_norm_unchecked(rho)
    }

    /// Drops coefficients whose weighted size is below `rel · ‖M‖_ρ`.
    fn prune(&mut self, rel: f64) -> f64 {
        let total = self.norm();
        let cut = rel * total;
        let rho = self.rho;
        let small: Vec<MultiIndex> = self
            .coeffs
            .iter()
            .filter(|(k, c)| linalg::op_norm(c) * (k.l1() as f64 * rho).exp() <= cut)
            .map(|(k, _)| k.clone())
            .collect();
        if small.is_empty() {
            return 0.0;
        }
        let mut removed = QpMatrix::zeros(self.omega.clone(), self.n, rho, usize::MAX);
        for k in small {
            let c = self.coeffs.remove(&k).expect("key listed above");
            removed.coeffs.insert(k, c);
        }
        removed.norm()
    }

    fn prune_exact_zeros(&mut self) {
        self.coeffs.retain(|_, c| c.iter().any(|z| *z != C64::new(0.0, 0.0)));
    }

    fn map_coeffs(&self, f: impl Fn(&MultiIndex, &CMat) -> CMat) -> QpMatrix {
        let mut out = self.clone();
        for (k, c) in out.coeffs.iter_mut() {
            *c = f(k, c);
        }
        out.prune_exact_zeros();
        out
    }

    pub fn scale(&self, s: C64) -> QpMatrix {
        let mut out = self.map_coeffs(|_, c| c * s);
        out.tail_allowance = self.tail_allowance * s.norm();
        out.real = self.real && s.im == 0.0;
        out
    }

    pub fn scale_real(&self, s: f64) -> QpMatrix {
        self.scale(C64::new(s, 0.0))
    }

    /// `C · M(t)` for a constant `C`.
    pub fn left_mul(&self, c: &CMat) -> QpMatrix {
        let mut out = self.map_coeffs(|_, m| c * m);
        out.tail_allowance = self.tail_allowance * linalg::op_norm(c);
        out.real = self.real && linalg::max_imag(c) == 0.0;
        out
    }

    /// `M(t) · C` for a constant `C`.
    pub fn right_mul(&self, c: &CMat) -> QpMatrix {
        let mut out = self.map_coeffs(|_, m| m * c);
        out.tail_allowance = self.tail_allowance * linalg::op_norm(c);
        out.real = self.real && linalg::max_imag(c) == 0.0;
        out
    }

    fn combine(&self, other: &QpMatrix, sign: f64) -> Result<QpMatrix, QpError> {
        self.check_compatible(other)?;
        let mut out = self.clone();
        out.rho = self.rho.min(other.rho);
        out.k_trunc = self.k_trunc.max(other.k_trunc);
        for (k, c) in &other.coeffs {
            let add = c * C64::new(sign, 0.0);
            match out.coeffs.get_mut(k) {
                Some(slot) => *slot += add,
                None => {
                    out.coeffs.insert(k.clone(), add);
                }
            }
        }
        out.prune_exact_zeros();
        out.real = self.real && other.real;
        out.tail_allowance = self.tail_allowance + other.tail_allowance;
        Ok(out)
    }

    pub fn add(&self, other: &QpMatrix) -> Result<QpMatrix, QpError> {
        self.combine(other, 1.0)
    }

    pub fn sub(&self, other: &QpMatrix) -> Result<QpMatrix, QpError> {
        self.combine(other, -1.0)
    }

    /// `M + C` for a constant `C`.
    pub fn add_const(&self, c: &CMat) -> QpMatrix {
        let mut out = self.clone();
        let z = MultiIndex::zero(self.omega.dim());
        *out.coeffs.entry(z).or_insert_with(|| CMat::zeros(self.n, self.n)) += c;
        out.prune_exact_zeros();
        out.real = self.real && linalg::max_imag(c) == 0.0;
        out
    }

    /// The `k = 0` coefficient (zero when absent), without resonance checks.
    pub fn zero_mode(&self) -> CMat {
        self.coeffs
            .get(&MultiIndex::zero(self.omega.dim()))
            .cloned()
            .unwrap_or_else(|| CMat::zeros(self.n, self.n))
    }

    /// Time average `lim (1/2T) ∫_{−T}^{T} M(t) dt`.
    ///
    /// Equals the zero mode as long as no stored `k ≠ 0` is resonant
    /// (`⟨k,ω⟩ = 0`); a resonant representation is reported, not summed.
    pub fn average(&self) -> Result<ConstMatrix, QpError> {
        if let Some(k) = self.coeffs.keys().find(|k| !k.is_zero() && self.omega.dot(k) == 0.0) {
            return Err(QpError::ResonantRepresentation { k: k.clone() });
        }
        Ok(ConstMatrix::new(self.zero_mode()))
    }

    /// `M − M̄`: the series with its zero mode removed.
    pub fn without_average(&self) -> QpMatrix {
        let mut out = self.clone();
        out.coeffs.remove(&MultiIndex::zero(self.omega.dim()));
        out
    }

    /// `Σ_k M_k e^{i⟨k,θ⟩}` at a point `θ` of the torus.
    pub fn evaluate_angles(&self, theta: &[f64]) -> CMat {
        assert_eq!(theta.len(), self.omega.dim());
        let mut out = CMat::zeros(self.n, self.n);
        for (k, c) in &self.coeffs {
            let phase: f64 = k.components().iter().zip(theta).map(|(&ki, &th)| ki as f64 * th).sum();
            out += c * C64::from_polar(1.0, phase);
        }
        out
    }

    /// `M(t) = Σ_k M_k e^{i⟨k,ω⟩t}`.
    pub fn evaluate(&self, t: f64) -> CMat {
        let mut out = CMat::zeros(self.n, self.n);
        for (k, c) in &self.coeffs {
            out += c * C64::from_polar(1.0, self.omega.dot(k) * t);
        }
        out
    }

    /// `dM/dt`: coefficient `i⟨k,ω⟩ M_k`.
    pub fn derivative(&self) -> QpMatrix {
        let mut out = self.map_coeffs(|k, c| c * C64::new(0.0, self.omega.dot(k)));
        out.coeffs.remove(&MultiIndex::zero(self.omega.dim()));
        out.tail_allowance = 0.0;
        out
    }

    /// Largest coefficientwise asymmetry of `J⁻¹ M_k`.
    pub fn hamiltonian_defect(&self) -> Result<f64, QpError> {
        if self.n % 2 != 0 {
            return Err(QpError::Structural(format!("Hamiltonian structure needs even dimension, got {}", self.n)));
        }
        Ok(self.coeffs.values().map(linalg::hamiltonian_defect).fold(0.0, f64::max))
    }

    /// True iff every `J⁻¹ M_k` is symmetric within `tol` entrywise.
    pub fn is_hamiltonian(&self, tol: f64) -> Result<bool, QpError> {
        Ok(self.hamiltonian_defect()? <= tol)
    }

    /// `max_k max |M_{−k} − conj(M_k)|`; zero for real-valued series.
    pub fn conjugate_defect(&self) -> f64 {
        let zero = CMat::zeros(self.n, self.n);
        let mut worst = 0.0_f64;
        for (k, c) in &self.coeffs {
            let mirror = self.coeffs.get(&k.neg()).unwrap_or(&zero);
            for (a, b) in c.iter().zip(mirror.iter()) {
                worst = worst.max((a - b.conj()).norm());
            }
        }
        worst
    }

    /// Projection onto real-valued series: `M_k ← (M_k + conj(M_{−k}))/2`.
    /// Used to keep roundoff from breaking the symmetry of real systems.
    pub fn symmetrized_real(&self) -> QpMatrix {
        let zero = CMat::zeros(self.n, self.n);
        let mut out = self.clone();
        let keys: Vec<MultiIndex> = self.coeffs.keys().map(MultiIndex::neg).chain(self.coeffs.keys().cloned()).collect();
        out.coeffs.clear();
        for k in keys {
            if out.coeffs.contains_key(&k) {
                continue;
            }
            let a = self.coeffs.get(&k).unwrap_or(&zero);
            let b = self.coeffs.get(&k.neg()).unwrap_or(&zero);
            out.coeffs.insert(k, (a + b.conjugate()) * C64::new(0.5, 0.0));
        }
        out.prune_exact_zeros();
        out.real = true;
        out
    }

    pub fn max_mode_l1(&self) -> usize {
        self.coeffs.keys().map(MultiIndex::l1).max().unwrap_or(0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("series serialization is infallible")
    }

    pub fn from_json(s: &str) -> Result<QpMatrix, QpError> {
        serde_json::from_str(s).map_err(|e| QpError::Format(e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct CoeffWire {
    k: Vec<i32>,
    re_matrix: Vec<Vec<f64>>,
    im_matrix: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct QpWire {
    omega: Vec<f64>,
    n: usize,
    rho: f64,
    #[serde(rename = "K")]
    k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    real: Option<bool>,
    #[serde(default)]
    tail_allowance: f64,
    coeffs: Vec<CoeffWire>,
}

impl Serialize for QpMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let coeffs = self
            .coeffs
            .iter()
            .map(|(k, c)| {
                let (re_matrix, im_matrix) = split_matrix(c);
                CoeffWire { k: k.0.clone(), re_matrix, im_matrix }
            })
            .collect();
        QpWire {
            omega: self.omega.0.clone(),
            n: self.n,
            rho: self.rho,
            k: self.k_trunc,
            real: Some(self.real),
            tail_allowance: self.tail_allowance,
            coeffs,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for QpMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = QpWire::deserialize(d)?;
        let build = || -> Result<QpMatrix, QpError> {
            let omega = FrequencyVector::new(w.omega)?;
            let mut coeffs = Vec::with_capacity(w.coeffs.len());
            for c in &w.coeffs {
                coeffs.push((MultiIndex(c.k.clone()), join_matrix(&c.re_matrix, &c.im_matrix, w.n)?));
            }
            let q = QpMatrix::from_coeffs(omega, w.n, w.rho, w.k, coeffs)?;
            let real = w.real.unwrap_or(q.real);
            Ok(q.with_real_flag(real).add_tail(w.tail_allowance))
        };
        build().map_err(serde::de::Error::custom)
    }
}
