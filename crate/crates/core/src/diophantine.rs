//! Non-resonance checks and the empirical ε-sweep.
//!
//! Every check is a plain enumeration of the `ℓ¹` ball `0 < |k| ≤ K`; the
//! reported witness is the entry closest to (or furthest below) its
//! threshold, i.e. the one minimizing `|d| / threshold`.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::hill;
use crate::kam::{self, FailureReason, KamSchedule, ReductionStatus};
use crate::linalg::{C64, I};
use crate::qpalg::{ConstMatrix, FrequencyVector, MultiIndex, QpMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExponentMode {
    /// `α / |k|^τ`.
    BaseTau,
    /// `α / |k|^{3τ}`, the per-step condition.
    TripleTau,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiophantineSpec {
    pub alpha: f64,
    pub tau: f64,
    pub exponent_mode: ExponentMode,
    pub k_check: usize,
}

impl DiophantineSpec {
    pub fn new(alpha: f64, tau: f64, exponent_mode: ExponentMode, k_check: usize) -> Self {
        DiophantineSpec { alpha, tau, exponent_mode, k_check }
    }

    /// Requires `τ > r − 1`.
    pub fn validate(&self, r: usize) -> Result<(), String> {
        if !(self.tau > r as f64 - 1.0) {
            return Err(format!("tau must exceed r − 1 = {}, got {}", r as f64 - 1.0, self.tau));
        }
        if !(self.alpha > 0.0) {
            return Err(format!("alpha must be positive, got {}", self.alpha));
        }
        if self.k_check == 0 {
            return Err("k_check must be at least 1".into());
        }
        Ok(())
    }

    pub fn threshold(&self, k: &MultiIndex) -> f64 {
        let p = match self.exponent_mode {
            ExponentMode::BaseTau => self.tau,
            ExponentMode::TripleTau => 3.0 * self.tau,
        };
        self.alpha / (k.l1() as f64).powf(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Witness {
    pub k: MultiIndex,
    pub i: usize,
    pub j: usize,
    pub modulus: f64,
    pub threshold: f64,
}

impl Witness {
    pub fn margin(&self) -> f64 {
        self.modulus / self.threshold
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub pass: bool,
    pub worst: Option<Witness>,
    pub min_modulus: f64,
    pub checked: usize,
}

fn scan(
    omega: &FrequencyVector,
    values: &[C64],
    k_check: usize,
    threshold: impl Fn(&MultiIndex) -> f64,
) -> CheckOutcome {
    let mut out = CheckOutcome { pass: true, worst: None, min_modulus: f64::INFINITY, checked: 0 };
    for k in MultiIndex::ball(omega.dim(), k_check) {
        if k.is_zero() {
            continue;
        }
        let wk = omega.dot(&k);
        let th = threshold(&k);
        for (i, &li) in values.iter().enumerate() {
            for (j, &lj) in values.iter().enumerate() {
                let modulus = (I * wk - li + lj).norm();
                out.checked += 1;
                out.min_modulus = out.min_modulus.min(modulus);
                if modulus < th {
                    out.pass = false;
                }
                if out.worst.as_ref().is_none_or(|w| modulus / th < w.margin()) {
                    out.worst = Some(Witness { k: k.clone(), i, j, modulus, threshold: th });
                }
            }
        }
    }
    out
}

/// `|i⟨k,ω⟩ − λ_i + λ_j| ≥ α/|k|^τ` (or `3τ`) for every `0 < |k| ≤ K_check`.
pub fn check_nonresonance(omega: &FrequencyVector, lambda: &[C64], spec: &DiophantineSpec) -> CheckOutcome {
    scan(omega, lambda, spec.k_check, |k| spec.threshold(k))
}

/// `|⟨k, (ω, √b)⟩| ≥ (α/2)/|k|^{5τ+4}` for every `0 < |k| ≤ K_check` in `Z^{r+1}`.
pub fn check_extended_frequencies(omega: &FrequencyVector, b: f64, spec: &DiophantineSpec) -> CheckOutcome {
    assert!(b > 0.0, "extended check needs b > 0");
    let ext = omega.extended(b.sqrt()).expect("finite extension");
    let alpha0 = spec.alpha / 2.0;
    let p = 5.0 * spec.tau + 4.0;
    scan(&ext, &[C64::new(0.0, 0.0)], spec.k_check, |k| alpha0 / (k.l1() as f64).powf(p))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepOutcome {
    pub eps: f64,
    pub status: String,
    pub reduced: bool,
    pub b: Option<f64>,
    pub worst_k: Option<MultiIndex>,
    pub failed_step: Option<usize>,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FailureCluster {
    /// Enclosing interval after one bisection of each boundary bracket.
    pub eps_lo: f64,
    pub eps_hi: f64,
    pub count: usize,
    /// Most frequent offending mode among the cluster's small-divisor failures.
    pub k: Option<MultiIndex>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepReport {
    pub eps0: f64,
    pub eps_grid: Vec<f64>,
    pub outcomes: Vec<SweepOutcome>,
    pub success_fraction: f64,
    pub failure_clusters: Vec<FailureCluster>,
}

#[derive(Serialize)]
pub struct SweepSummary<'a> {
    pub eps0: f64,
    pub grid_size: usize,
    pub reduced: usize,
    pub success_fraction: f64,
    pub failure_clusters: &'a [FailureCluster],
}

impl SweepReport {
    pub fn summary(&self) -> SweepSummary<'_> {
        SweepSummary {
            eps0: self.eps0,
            grid_size: self.eps_grid.len(),
            reduced: self.outcomes.iter().filter(|o| o.reduced).count(),
            success_fraction: self.success_fraction,
            failure_clusters: &self.failure_clusters,
        }
    }

    /// CSV with columns `eps, status, b, worst_k1..worst_kr`.
    pub fn write_csv<W: Write>(&self, out: W, r: usize) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["eps".to_string(), "status".into(), "b".into()];
        header.extend((1..=r).map(|j| format!("worst_k{j}")));
        w.write_record(&header)?;
        for o in &self.outcomes {
            let mut row = vec![format!("{:e}", o.eps), o.status.clone(), o.b.map_or(String::new(), |b| format!("{b:e}"))];
            match &o.worst_k {
                Some(k) => row.extend(k.components().iter().map(|c| c.to_string())),
                None => row.extend(std::iter::repeat_n(String::new(), r)),
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Midpoint grid `ε_j = ε₀ (j − ½)/N`, `j = 1..N`.
pub fn eps_grid(eps0: f64, n: usize) -> Vec<f64> {
    (1..=n).map(|j| eps0 * (j as f64 - 0.5) / n as f64).collect()
}

fn outcome(a: &ConstMatrix, q: &QpMatrix, eps: f64, sched: &KamSchedule) -> SweepOutcome {
    let res = kam::reduce(a, q, eps, sched);
    let (worst_k, failed_step) = match &res.status {
        ReductionStatus::Failed { reason: FailureReason::SmallDivisor { k, .. }, step } => (Some(k.clone()), Some(*step)),
        ReductionStatus::Failed { step, .. } => (None, Some(*step)),
        ReductionStatus::Reduced => (None, None),
    };
    let b = if res.is_reduced() && res.dim() == 2 { hill::extract_b(&res.b, 1e-9) } else { None };
    SweepOutcome {
        eps,
        status: res.status.label().to_string(),
        reduced: res.is_reduced(),
        b,
        worst_k,
        failed_step,
        steps: res.trace.len(),
    }
}

/// Runs the reduction over the midpoint grid in parallel and groups
/// consecutive failures into clusters.
pub fn sweep(a: &ConstMatrix, q: &QpMatrix, eps0: f64, grid_size: usize, sched: &KamSchedule) -> SweepReport {
    assert!(grid_size >= 10, "sweep needs at least 10 grid points");
    let grid = eps_grid(eps0, grid_size);
    let outcomes: Vec<SweepOutcome> = grid.par_iter().map(|&eps| outcome(a, q, eps, sched)).collect();
    let reduced = outcomes.iter().filter(|o| o.reduced).count();

    let mut runs: Vec<(usize, usize)> = Vec::new();
    for (j, o) in outcomes.iter().enumerate() {
        if o.reduced {
            continue;
        }
        match runs.last_mut() {
            Some((_, hi)) if *hi + 1 == j => *hi = j,
            _ => runs.push((j, j)),
        }
    }
    let failure_clusters = runs
        .par_iter()
        .map(|&(lo, hi)| {
            let left = if lo == 0 { 0.0 } else { grid[lo - 1] };
            let right = if hi + 1 == grid.len() { eps0 } else { grid[hi + 1] };
            let mid_lo = 0.5 * (left + grid[lo]);
            let mid_hi = 0.5 * (grid[hi] + right);
            let eps_lo = if lo > 0 && !outcome(a, q, mid_lo, sched).reduced { left } else { mid_lo };
            let eps_hi = if hi + 1 < grid.len() && !outcome(a, q, mid_hi, sched).reduced { right } else { mid_hi };
            let mut counts: BTreeMap<&MultiIndex, usize> = BTreeMap::new();
            for o in &outcomes[lo..=hi] {
                if let Some(k) = &o.worst_k {
                    *counts.entry(k).or_default() += 1;
                }
            }
            let k = counts.iter().max_by_key(|(_, c)| **c).map(|(k, _)| (*k).clone());
            FailureCluster { eps_lo, eps_hi, count: hi - lo + 1, k }
        })
        .collect();

    SweepReport {
        eps0,
        eps_grid: grid,
        success_fraction: reduced as f64 / grid_size as f64,
        outcomes,
        failure_clusters,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn om(w: &[f64]) -> FrequencyVector {
        FrequencyVector::new(w.to_vec()).unwrap()
    }

    #[test]
    fn integer_frequency_passes() {
        let z = C64::new(0.0, 0.0);
        let spec = DiophantineSpec::new(0.5, 1.01, ExponentMode::BaseTau, 10);
        let out = check_nonresonance(&om(&[1.0]), &[z, z], &spec);
        assert!(out.pass);
        assert_eq!(out.min_modulus, 1.0);
    }

    #[test]
    fn exact_resonance_in_extension() {
        let spec = DiophantineSpec::new(0.5, 1.0, ExponentMode::BaseTau, 4);
        let out = check_extended_frequencies(&om(&[1.0]), 4.0, &spec);
        assert!(!out.pass);
        let w = out.worst.unwrap();
        assert_eq!(w.modulus, 0.0);
        assert!(w.k == MultiIndex::new(vec![2, -1]) || w.k == MultiIndex::new(vec![-2, 1]), "{}", w.k);
    }

    #[test]
    fn extension_without_last_component_matches_base_scan() {
        let w = om(&[1.0, 0.5 * (1.0 + 5f64.sqrt())]);
        let spec = DiophantineSpec::new(0.2, 1.2, ExponentMode::BaseTau, 6);
        let ext = check_extended_frequencies(&w, 0.37, &spec);
        let base = check_nonresonance(&w, &[C64::new(0.0, 0.0)], &spec);
        // Restricting the extended ball to k_{r+1} = 0 reproduces the base divisors.
        assert!(ext.min_modulus <= base.min_modulus);
        assert_eq!(base.checked, MultiIndex::ball(2, 6).len() - 1);
    }

    #[test]
    fn midpoint_grid() {
        let g = eps_grid(1.0, 10);
        assert_eq!(g.len(), 10);
        assert!((g[0] - 0.05).abs() < 1e-15 && (g[9] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_perturbation_sweep_succeeds_everywhere() {
        let a = ConstMatrix::from_real_rows(&[&[0.0, 1.0], &[-1.0, 0.0]]);
        let q = QpMatrix::zeros(om(&[1.0]), 2, 1.0, 1);
        let rep = sweep(&a, &q, 1e-2, 10, &KamSchedule::new(0.5, 1.0, 1.0, 0.5));
        assert_eq!(rep.success_fraction, 1.0);
        assert!(rep.failure_clusters.is_empty());
    }
}
