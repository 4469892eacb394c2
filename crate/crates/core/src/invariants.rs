//! Named invariant suite behind `qpkam verify`.
//!
//! Each check is deterministic given the seed. Checks that need a concrete
//! system use the one supplied, or the golden-ratio Hill problem at
//! `ε = 10⁻³`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diophantine::{self, DiophantineSpec, ExponentMode};
use crate::hill::{self, HillProblem};
use crate::homological;
use crate::kam::{self, KamSchedule};
use crate::linalg::{self, CMat, C64, I};
use crate::oracle::{self, IntegratorConfig};
use crate::qpalg::{ConstMatrix, FrequencyVector, MultiIndex, QpMatrix};
use crate::spectral;

#[derive(Clone, Debug, Serialize)]
pub struct InvariantResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct InvariantReport {
    pub seed: u64,
    pub results: Vec<InvariantResult>,
}

impl InvariantReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &InvariantResult> {
        self.results.iter().filter(|r| !r.passed)
    }

    /// Plain-text pass table, one invariant per line.
    pub fn table(&self) -> String {
        let width = self.results.iter().map(|r| r.name.len()).max().unwrap_or(0);
        let mut s = String::new();
        for r in &self.results {
            let mark = if r.passed { "PASS" } else { "FAIL" };
            s.push_str(&format!("{mark}  {:width$}  {}\n", r.name, r.detail));
        }
        s
    }
}

/// The system the kam/oracle checks run on.
#[derive(Clone, Debug)]
pub struct SuiteSystem {
    pub a: ConstMatrix,
    pub q: QpMatrix,
    pub eps: f64,
    pub sched: KamSchedule,
}

impl SuiteSystem {
    pub fn hill_default() -> Self {
        let p = HillProblem::golden_example();
        let (a, q) = hill::build_system(&p);
        SuiteSystem { a, q, eps: 1e-3, sched: p.schedule(0.5, 1.2, 12) }
    }
}

/// Real Hamiltonian `J S` with `S` symmetric, entries of `S` in `[−1, 1]`.
pub fn random_hamiltonian_matrix<R: Rng>(rng: &mut R, n: usize) -> CMat {
    let s = random_symmetric(rng, n, false);
    linalg::symplectic_unit(n) * s
}

fn random_symmetric<R: Rng>(rng: &mut R, n: usize, complex: bool) -> CMat {
    let mut s = CMat::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let im = if complex { rng.random_range(-1.0..1.0) } else { 0.0 };
            let z = C64::new(rng.random_range(-1.0..1.0), im);
            s[(i, j)] = z;
            s[(j, i)] = z;
        }
    }
    s
}

/// Real-valued Hamiltonian series over `|k| ≤ k_max` with coefficient
/// sizes `~ decay^{|k|}`; the zero mode is omitted when `zero_average`.
pub fn random_hamiltonian_series<R: Rng>(
    rng: &mut R,
    omega: &FrequencyVector,
    n: usize,
    k_max: usize,
    rho: f64,
    decay: f64,
    zero_average: bool,
) -> QpMatrix {
    let j = linalg::symplectic_unit(n);
    let mut coeffs: Vec<(MultiIndex, CMat)> = Vec::new();
    for k in MultiIndex::ball(omega.dim(), k_max) {
        let nk = k.neg();
        if k < nk {
            continue;
        }
        let scale = C64::new(decay.powi(k.l1() as i32), 0.0);
        if k.is_zero() {
            if !zero_average {
                coeffs.push((k, &j * random_symmetric(rng, n, false) * scale));
            }
            continue;
        }
        let c = &j * random_symmetric(rng, n, true) * scale;
        coeffs.push((nk, c.conjugate()));
        coeffs.push((k, c));
    }
    QpMatrix::from_coeffs(omega.clone(), n, rho, k_max, coeffs).expect("generated coefficients are valid")
}

/// Frequency vector with entries in `[0.5, 2)`.
pub fn random_frequencies<R: Rng>(rng: &mut R, r: usize) -> FrequencyVector {
    FrequencyVector::new((0..r).map(|_| rng.random_range(0.5..2.0)).collect()).expect("finite")
}

/// Divisor scan by a second, independent enumeration: the full cube
/// `[−K, K]^r` filtered to `0 < |k|₁ ≤ K`. Returns `(pass, min |d|, min margin)`.
pub fn cube_enumeration(omega: &[f64], values: &[C64], k_max: usize, threshold: impl Fn(usize) -> f64) -> (bool, f64, f64) {
    let r = omega.len();
    let side = 2 * k_max + 1;
    let total = side.pow(r as u32);
    let (mut pass, mut min_d, mut min_margin) = (true, f64::INFINITY, f64::INFINITY);
    for code in 0..total {
        let mut c = code;
        let mut k = vec![0i64; r];
        for slot in k.iter_mut() {
            *slot = (c % side) as i64 - k_max as i64;
            c /= side;
        }
        let l1: usize = k.iter().map(|x| x.unsigned_abs() as usize).sum();
        if l1 == 0 || l1 > k_max {
            continue;
        }
        let wk: f64 = k.iter().zip(omega).map(|(&ki, &w)| ki as f64 * w).sum();
        let th = threshold(l1);
        for &li in values {
            for &lj in values {
                let d = (I * wk - li + lj).norm();
                min_d = min_d.min(d);
                min_margin = min_margin.min(d / th);
                pass &= d >= th;
            }
        }
    }
    (pass, min_d, min_margin)
}

struct Suite {
    results: Vec<InvariantResult>,
}

impl Suite {
    fn record(&mut self, name: &str, passed: bool, detail: String) {
        self.results.push(InvariantResult { name: name.to_string(), passed, detail });
    }
}

/// Runs every invariant. Never panics on a violated invariant.
pub fn run_suite(seed: u64, system: Option<&SuiteSystem>) -> InvariantReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut suite = Suite { results: Vec::new() };
    qpalg_checks(&mut suite, &mut rng);
    spectral_checks(&mut suite, &mut rng);
    homological_checks(&mut suite, &mut rng);
    diophantine_checks(&mut suite, &mut rng);
    let default = SuiteSystem::hill_default();
    let sys = system.unwrap_or(&default);
    kam_checks(&mut suite, sys);
    oracle_checks(&mut suite, sys);
    InvariantReport { seed, results: suite.results }
}

fn qpalg_checks(suite: &mut Suite, rng: &mut ChaCha8Rng) {
    let (mut worst_ratio, mut worst_point, mut worst_avg) = (0.0_f64, 0.0_f64, 0.0_f64);
    for _ in 0..20 {
        let w = random_frequencies(rng, 2);
        let a = random_hamiltonian_series(rng, &w, 2, 3, 1.0, 0.5, false);
        let b = random_hamiltonian_series(rng, &w, 2, 3, 1.0, 0.5, false);
        let ab = a.product(&b, 6).expect("compatible");
        worst_ratio = worst_ratio.max(ab.norm() / (a.norm() * b.norm()));
        for j in 0..10 {
            let t = rng.random_range(-50.0..50.0) + j as f64;
            let lhs = ab.evaluate(t);
            let rhs = a.evaluate(t) * b.evaluate(t);
            worst_point = worst_point.max(linalg::max_abs(&(lhs - rhs)) / (1.0 + a.norm() * b.norm()));
        }
        let d = a.derivative();
        worst_avg = worst_avg.max(linalg::max_abs(&d.zero_mode()));
        worst_avg = worst_avg.max(linalg::max_abs(&(a.average().expect("nonresonant").into_inner() - a.zero_mode())));
    }
    suite.record("qpalg.submultiplicative", worst_ratio <= 1.0 + 1e-12, format!("max ‖AB‖/(‖A‖‖B‖) = {worst_ratio:.6}"));
    suite.record("qpalg.product_pointwise", worst_point <= 1e-10, format!("max relative error {worst_point:.2e}"));
    suite.record("qpalg.average_zero_mode", worst_avg == 0.0, format!("max deviation {worst_avg:.2e}"));
}

fn spectral_checks(suite: &mut Suite, rng: &mut ChaCha8Rng) {
    let (mut recon, mut pm_ok, mut tested) = (0.0_f64, true, 0);
    for _ in 0..20 {
        let m = ConstMatrix::new(random_hamiltonian_matrix(rng, 4));
        let Ok(d) = spectral::eigen_decompose(&m, 1e-9) else { continue };
        tested += 1;
        let err = linalg::op_norm(&(d.reconstruct() - m.as_mat())) / (m.op_norm() * d.condition());
        recon = recon.max(err);
        pm_ok &= spectral::plus_minus_symmetric(&d.values, 1e-9 * m.op_norm().max(1.0));
    }
    suite.record("spectral.reconstruction", tested > 0 && recon <= 1e-9, format!("{tested} matrices, max scaled error {recon:.2e}"));
    suite.record("spectral.plus_minus_pairs", tested > 0 && pm_ok, format!("{tested} Hamiltonian spectra"));
    let m = ConstMatrix::new(random_hamiltonian_matrix(rng, 2));
    let monotone = match spectral::eigen_decompose(&m, 1e-9) {
        Ok(d) => {
            let g = spectral::SeparationGate::new(0.3, 0.3, 2);
            let grid: Vec<f64> = (0..200).map(|j| j as f64 * 1e-3).collect();
            let passed: Vec<bool> = grid.iter().map(|&x| spectral::perturbation_gate(&d, x, &g).passed).collect();
            passed.windows(2).all(|w| w[0] || !w[1])
        }
        Err(_) => true,
    };
    suite.record("spectral.gate_monotone", monotone, "pass at d implies pass below d".into());
}

fn homological_checks(suite: &mut Suite, rng: &mut ChaCha8Rng) {
    let (mut ident, mut ham, mut lin, mut solved, mut avg_ok) = (0.0_f64, 0.0_f64, 0.0_f64, 0, true);
    let w = FrequencyVector::new(vec![1.0, hill::golden()]).expect("finite");
    for _ in 0..20 {
        let lam = ConstMatrix::new(random_hamiltonian_matrix(rng, 2));
        let r1 = random_hamiltonian_series(rng, &w, 2, 4, 1.0, 0.5, true);
        let r2 = random_hamiltonian_series(rng, &w, 2, 4, 1.0, 0.5, true);
        let (Ok(s1), Ok(s2)) = (homological::solve(&lam, &r1, 1e-3, 1.2, 0.4), homological::solve(&lam, &r2, 1e-3, 1.2, 0.4)) else {
            continue;
        };
        let (ca, cb) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let combo = r1.scale_real(ca).add(&r2.scale_real(cb)).expect("compatible");
        let Ok(sc) = homological::solve(&lam, &combo, 1e-3, 1.2, 0.4) else { continue };
        solved += 1;
        ident = ident.max(homological::coefficient_identity_defect(&lam, &r1, &s1.p) / r1.norm());
        ham = ham.max(s1.p.hamiltonian_defect().unwrap_or(f64::INFINITY) / s1.p.norm().max(1.0));
        avg_ok &= s1.p.zero_mode().iter().all(|z| *z == C64::new(0.0, 0.0));
        let expect = s1.p.scale_real(ca).add(&s2.p.scale_real(cb)).expect("compatible");
        lin = lin.max(sc.p.sub(&expect).expect("compatible").norm() / expect.norm().max(1.0));
    }
    suite.record("homological.coefficient_identity", solved > 0 && ident <= 1e-12, format!("{solved} solves, max relative defect {ident:.2e}"));
    suite.record("homological.hamiltonian_closure", solved > 0 && ham <= 1e-10, format!("max defect {ham:.2e}"));
    suite.record("homological.zero_average", solved > 0 && avg_ok, "P̄ = 0 exactly".into());
    suite.record("homological.linearity", solved > 0 && lin <= 1e-12, format!("max relative deviation {lin:.2e}"));
}

fn diophantine_checks(suite: &mut Suite, rng: &mut ChaCha8Rng) {
    let mut agree = true;
    let mut monotone = true;
    for _ in 0..10 {
        let r = rng.random_range(1..=3);
        let w = random_frequencies(rng, r);
        let vals: Vec<C64> = (0..2).map(|_| C64::new(0.0, rng.random_range(-0.3..0.3))).collect();
        let k = rng.random_range(1..=6);
        let spec = DiophantineSpec::new(rng.random_range(0.01..0.5), rng.random_range(r as f64..r as f64 + 1.0), ExponentMode::BaseTau, k);
        let fast = diophantine::check_nonresonance(&w, &vals, &spec);
        let (pass, min_d, min_margin) = cube_enumeration(w.as_slice(), &vals, k, |l| spec.alpha / (l as f64).powf(spec.tau));
        let margin = fast.worst.as_ref().map_or(f64::INFINITY, |x| x.margin());
        agree &= fast.pass == pass && fast.min_modulus == min_d && margin == min_margin;
        let doubled = DiophantineSpec { alpha: 2.0 * spec.alpha, ..spec };
        monotone &= fast.pass || !diophantine::check_nonresonance(&w, &vals, &doubled).pass;
    }
    suite.record("diophantine.brute_force_equivalence", agree, "10 random instances against cube enumeration".into());
    suite.record("diophantine.alpha_monotone", monotone, "doubling α never repairs a failure".into());
}

fn kam_checks(suite: &mut Suite, sys: &SuiteSystem) {
    let tol = sys.sched.tol_sym;
    let a_def = sys.a.hamiltonian_defect().unwrap_or(f64::INFINITY);
    let q_def = sys.q.hamiltonian_defect().unwrap_or(f64::INFINITY);
    suite.record(
        "kam.input_hamiltonian",
        a_def <= tol * sys.a.op_norm().max(1.0) && q_def <= tol * sys.q.norm().max(1.0),
        format!("defect(A) = {a_def:.2e}, defect(Q) = {q_def:.2e}"),
    );
    let res = kam::reduce(&sys.a, &sys.q, sys.eps, &sys.sched);
    suite.record("kam.reduced", res.is_reduced(), format!("status {}", res.status.label()));
    let ok: Vec<&kam::StepRecord> = res.ok_steps().collect();
    let ham = ok.iter().map(|r| r.hamiltonian_defect.max(r.p_hamiltonian_defect / r.p_norm.max(1.0))).fold(0.0, f64::max);
    suite.record("kam.hamiltonian_preservation", res.is_reduced() && ham <= tol, format!("max defect over A_m, P_m: {ham:.2e}"));
    let floors = ok.iter().filter(|r| r.floor > 0.0).all(|r| r.min_abs >= r.floor && r.min_gap >= r.floor);
    suite.record("kam.eigenvalue_floors", res.is_reduced() && floors, format!("{} checked steps", ok.iter().filter(|r| r.floor > 0.0).count()));
    let drift = ok.iter().all(|r| r.drift <= r.residual_norm * (1.0 + 1e-12));
    suite.record("kam.drift_bound", res.is_reduced() && drift, "‖A_{m+1} − A_m‖ ≤ residual_m".into());
    let s = &sys.sched;
    let sum: f64 = (1..40).map(|m| s.s_at(m)).sum();
    let widths = (0..40).all(|m| s.rho_at(m) - s.s_at(m) > s.rho / 4.0);
    suite.record("kam.schedule_identities", sum < s.rho / 4.0 && widths, format!("Σ s_m = {sum:.6} < ρ/4"));
    let mut symp = 0.0_f64;
    if sys.a.dim() % 2 == 0 {
        for f in &res.factors {
            for th in kam::sample_angles(sys.q.omega().dim(), 20) {
                symp = symp.max(linalg::symplectic_defect(&f.e.evaluate_angles(&th)));
            }
        }
    }
    suite.record("kam.symplectic_factors", res.is_reduced() && symp <= 1e-9, format!("max ‖EᵀJE − J‖ = {symp:.2e}"));
    let later: f64 = ok.iter().skip(1).map(|r| r.residual_norm).sum();
    let closeness = ok.first().map_or(f64::INFINITY, |r| linalg::op_norm(&(res.b.as_mat() - r.a_matrix.as_mat())));
    suite.record(
        "kam.final_closeness",
        res.is_reduced() && closeness <= later * (1.0 + 1e-9) + 1e-15,
        format!("‖B − (A + εQ̄)‖ = {closeness:.2e}, bound {later:.2e}"),
    );
    if res.dim() == 2 && res.is_reduced() {
        let v = spectral::eigenvalues(&res.b);
        let d = hill::pair_defect(&v);
        suite.record("hill.plus_minus_pair", d <= 1e-10, format!("pair defect {d:.2e}"));
    }
}

fn oracle_checks(suite: &mut Suite, sys: &SuiteSystem) {
    let cfg = IntegratorConfig::default().with_horizon(20.0);
    match oracle::integrate_fundamental(&sys.a, &sys.q, sys.eps, &cfg) {
        Ok(sol) => {
            let symp = if sys.a.dim() % 2 == 0 { sol.symplectic_drift() } else { f64::INFINITY };
            suite.record("oracle.symplectic_flow", symp <= 1e-8, format!("max ‖ΦᵀJΦ − J‖ = {symp:.2e}"));
            suite.record("oracle.det_one", sol.det_drift <= 1e-9, format!("max |det Φ − 1| = {:.2e}", sol.det_drift));
            let last = sol.phi.last().expect("samples").clone();
            let back = oracle::integrate_to(&sys.a, &sys.q, sys.eps, &last, cfg.horizon, &[0.0], &cfg);
            let err = back.map_or(f64::INFINITY, |b| {
                b[0].iter().zip(nalgebra::DMatrix::<f64>::identity(sys.a.dim(), sys.a.dim()).iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
            });
            suite.record("oracle.time_reversal", err <= 1e-8, format!("‖Φ_back − I‖ = {err:.2e}"));
        }
        Err(e) => suite.record("oracle.integration", false, e.to_string()),
    }
}
