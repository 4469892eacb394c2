use proptest::prelude::*;
use qpkam::hill::{self, HillProblem};
use qpkam::homological;
use qpkam::invariants::{random_frequencies, random_hamiltonian_matrix, random_hamiltonian_series};
use qpkam::kam::{self, Factor, FailureReason, KamSchedule, ReductionStatus};
use qpkam::linalg::{self, C64};
use qpkam::qpalg::{FrequencyVector, MultiIndex, QpMatrix};
use qpkam::ConstMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn golden_schedule(p: &HillProblem) -> KamSchedule {
    p.schedule(0.5, 1.2, 12)
}

#[test]
fn zero_perturbation_keeps_a() {
    let w = FrequencyVector::new(vec![1.0, hill::golden()]).unwrap();
    let a = ConstMatrix::from_real_rows(&[&[0.0, 1.0], &[-2.0, 0.0]]);
    let q = QpMatrix::zeros(w, 2, 1.0, 3);
    let res = kam::reduce(&a, &q, 1e-2, &KamSchedule::new(0.5, 1.2, 1.0, 0.5));
    assert!(res.is_reduced());
    assert_eq!(res.b.as_mat(), a.as_mat());
    assert!(res.factors.is_empty());
    assert_eq!(res.trace.len(), 1);
}

#[test]
fn golden_hill_b_follows_the_averaging_prediction() {
    let p = HillProblem::golden_example();
    let (a, q) = hill::build_system(&p);
    let eps = 1e-3;
    let res = kam::reduce(&a, &q, eps, &golden_schedule(&p));
    assert!(res.is_reduced());
    let v = &res.b_eigenvalues;
    assert!(hill::pair_defect(v) <= 1e-12 * v[0].norm());
    let b = hill::extract_b(&res.b, 1e-10).unwrap();
    let c = (b - eps) / (eps * eps);
    let predicted = p.averaging_coefficient();
    assert!((c - predicted).abs() <= 0.05 * predicted, "measured {c}, averaging predicts {predicted}");
}

#[test]
fn tuned_resonance_fails_at_the_first_step() {
    // a(t) = 1 + cos(ωt) with ω placed half a threshold away from the gap 2√ε
    // of A + εQ̄, so the k = ±1 divisor ω − 2√ε is below α₀ = α/2.
    let (eps, alpha, tau) = (1e-3_f64, 0.01, 0.5);
    let omega = 2.0 * eps.sqrt() + 0.25 * alpha;
    let p = HillProblem::cosine(FrequencyVector::new(vec![omega]).unwrap(), 1.0, &[(MultiIndex::new(vec![1]), 1.0)], 1.0).unwrap();
    let (a, q) = hill::build_system(&p);
    let res = kam::reduce(&a, &q, eps, &p.schedule(alpha, tau, 12));
    match &res.status {
        ReductionStatus::Failed { reason: FailureReason::SmallDivisor { k, modulus, threshold, .. }, step } => {
            assert_eq!(*step, 0);
            assert_eq!(k.l1(), 1);
            assert!((modulus - 0.25 * alpha).abs() <= 1e-12, "modulus {modulus}");
            assert!((threshold - 0.5 * alpha).abs() <= 1e-15);
        }
        other => panic!("expected a small divisor at step 0, got {other:?}"),
    }
    // Detuned by the full threshold the divisor gate passes; the slow
    // frequency then makes ‖εP‖ too large, which is a different failure.
    let p2 = HillProblem::cosine(FrequencyVector::new(vec![omega + alpha]).unwrap(), 1.0, &[(MultiIndex::new(vec![1]), 1.0)], 1.0).unwrap();
    let (a2, q2) = hill::build_system(&p2);
    let res2 = kam::reduce(&a2, &q2, eps, &p2.schedule(alpha, tau, 12));
    assert!(!matches!(res2.status, ReductionStatus::Failed { reason: FailureReason::SmallDivisor { .. }, .. }));
    assert!((res2.trace[0].divisor_min - 1.25 * alpha).abs() <= 1e-12);
}

#[test]
fn exponential_inverse_and_symplectic_at_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let w = random_frequencies(&mut rng, 2);
    let p = random_hamiltonian_series(&mut rng, &w, 2, 3, 1.0, 0.5, true);
    let coeff = 0.2 / p.norm();
    let exp = kam::qp_exponential(&p, coeff, 1e-16, 24).unwrap();
    for j in 0..20 {
        let t = 1.3 * j as f64;
        let (e, ei) = (exp.e.evaluate(t), exp.e_inv.evaluate(t));
        let id = linalg::identity(2);
        assert!(linalg::max_abs(&(&e * &ei - &id)) <= 1e-12, "t = {t}");
        assert!(linalg::symplectic_defect(&e) <= 1e-9);
    }
}

#[test]
fn constant_exponential_matches_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let w = FrequencyVector::new(vec![1.0]).unwrap();
    let m = random_hamiltonian_matrix(&mut rng, 4);
    let p = QpMatrix::constant(w, &m, 1.0);
    let coeff = 0.4 / p.norm();
    let exp = kam::qp_exponential(&p, coeff, 1e-16, 4).unwrap();
    let dense = linalg::expm(&(&m * C64::new(coeff, 0.0)));
    assert!(linalg::max_abs(&(exp.e.evaluate(0.0) - dense)) <= 1e-14);
}

#[test]
fn smallness_precondition_is_enforced() {
    let w = FrequencyVector::new(vec![1.0]).unwrap();
    let p = QpMatrix::identity(w, 2, 1.0);
    assert!(matches!(kam::qp_exponential(&p, 0.6, 1e-16, 4), Err(kam::KamError::Smallness(_))));
}

#[test]
fn conjugation_identity_on_random_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut checked = 0;
    while checked < 10 {
        let w = random_frequencies(&mut rng, 2);
        let lam = ConstMatrix::new(random_hamiltonian_matrix(&mut rng, 2));
        let qt = random_hamiltonian_series(&mut rng, &w, 2, 3, 1.0, 0.5, true);
        let Ok(sol) = homological::solve(&lam, &qt, 1e-3, 1.2, 0.25) else { continue };
        let e = 1e-2 / sol.p.norm().max(1.0);
        let exp = kam::qp_exponential(&sol.p, e, 1e-16, 12).unwrap();
        let qt = qt.with_rho(sol.p.rho());
        let q_next = kam::assemble_next_q(&lam, &qt, &sol.p, &exp, e, 12).unwrap();
        let defect = kam::conjugation_defect(&lam, &qt, e, &exp.e, &q_next, 10);
        assert!(defect <= 1e-8 * (1.0 + lam.op_norm()), "defect {defect:e}");
        checked += 1;
    }
}

#[test]
fn zero_solution_gives_zero_next_perturbation() {
    let w = FrequencyVector::new(vec![1.0, 2f64.sqrt()]).unwrap();
    let lam = ConstMatrix::from_real_rows(&[&[0.0, 1.0], &[-1.0, 0.0]]);
    let zero = QpMatrix::zeros(w, 2, 1.0, 3);
    let exp = kam::qp_exponential(&zero, 1e-2, 1e-16, 6).unwrap();
    let q_next = kam::assemble_next_q(&lam, &zero, &zero, &exp, 1e-2, 6).unwrap();
    assert!(q_next.is_zero());
}

#[test]
fn composition_of_no_or_one_factor() {
    let w = FrequencyVector::new(vec![1.0, hill::golden()]).unwrap();
    let id = kam::compose_transformation(&w, 2, 0.25, &[], 8).unwrap();
    assert_eq!(id.evaluate(0.3), linalg::identity(2));

    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let p = random_hamiltonian_series(&mut rng, &w, 2, 2, 1.0, 0.5, true);
    let exp = kam::qp_exponential(&p, 0.1 / p.norm(), 1e-16, 8).unwrap();
    let f = Factor { eps_pow: 0.1 / p.norm(), p, e: exp.e.clone() };
    let one = kam::compose_transformation(&w, 2, 0.25, &[f], 8).unwrap();
    assert_eq!(one.coeffs(), exp.e.coeffs());
}

#[test]
fn composed_transformation_is_symplectic() {
    let p = HillProblem::golden_example();
    let (a, q) = hill::build_system(&p);
    let res = kam::reduce(&a, &q, 5e-3, &golden_schedule(&p));
    assert!(res.is_reduced());
    let psi = res.psi().unwrap();
    for th in kam::sample_angles(2, 100) {
        assert!(linalg::symplectic_defect(&psi.evaluate_angles(&th)) <= 1e-8);
    }
}

#[test]
fn quadratic_smallness_constant_is_stable_across_eps() {
    let p = HillProblem::golden_example();
    let (a, q) = hill::build_system(&p);
    let ratio = |eps: f64| {
        let res = kam::reduce(&a, &q, eps, &golden_schedule(&p));
        let r = &res.trace;
        assert!(r.len() >= 2);
        r[1].residual_norm / r[0].residual_norm.powi(2)
    };
    let (c2, c3) = (ratio(1e-2), ratio(1e-3));
    assert!(c2.is_finite() && c3.is_finite());
    assert!(c2 / c3 < 10.0 && c3 / c2 < 10.0, "C(1e-2) = {c2}, C(1e-3) = {c3}");
}

#[test]
fn final_closeness_is_second_order() {
    let p = HillProblem::golden_example();
    let (a, q) = hill::build_system(&p);
    let sched = golden_schedule(&p);
    let ratios: Vec<f64> = hill::log_spaced(1e-4, 1e-2, 6)
        .into_iter()
        .map(|eps| {
            let res = kam::reduce(&a, &q, eps, &sched);
            assert!(res.is_reduced());
            let first = a.as_mat() + q.zero_mode() * C64::new(eps, 0.0);
            linalg::op_norm(&(res.b.as_mat() - first)) / (eps * eps)
        })
        .collect();
    let (lo, hi) = ratios.iter().fold((f64::INFINITY, 0.0_f64), |(l, h), &x| (l.min(x), h.max(x)));
    assert!(hi <= 1.0 && hi / lo < 2.0, "‖B − (A+εQ̄)‖/ε² = {ratios:?}");
}

#[test]
fn convergence_report_on_golden_run() {
    let p = HillProblem::golden_example();
    let (a, q) = hill::build_system(&p);
    let res = kam::reduce(&a, &q, 1e-3, &golden_schedule(&p));
    let rep = kam::convergence_report(&res.trace);
    assert!(rep.conclusive);
    assert!((1.7..=2.3).contains(&rep.slope));
}

#[test]
fn report_serializes_with_stable_fields() {
    let p = HillProblem::golden_example();
    let (a, q) = hill::build_system(&p);
    let res = kam::reduce(&a, &q, 1e-3, &golden_schedule(&p));
    let v: serde_json::Value = serde_json::from_str(&res.to_json()).unwrap();
    for key in ["eps", "status", "b", "schedule", "trace", "factors", "final_residual"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(res.to_json(), kam::reduce(&a, &q, 1e-3, &golden_schedule(&p)).to_json());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn reduced_runs_keep_their_invariants(eps in 1e-4f64..1e-2) {
        let p = HillProblem::golden_example();
        let (a, q) = hill::build_system(&p);
        let sched = golden_schedule(&p);
        let res = kam::reduce(&a, &q, eps, &sched);
        prop_assert!(res.is_reduced());
        prop_assert!(res.final_residual <= res.target_residual);
        prop_assert!(res.b.hamiltonian_defect().unwrap() <= sched.tol_sym);
        for r in res.ok_steps() {
            prop_assert!(r.hamiltonian_defect <= sched.tol_sym);
            prop_assert!(r.drift <= r.residual_norm);
            prop_assert!(r.floor == 0.0 || (r.min_abs >= r.floor && r.min_gap >= r.floor));
            prop_assert!(r.p_hamiltonian_defect <= sched.tol_sym * r.p_norm.max(1.0));
            let f = (r.residual_norm - r.tail) / (sched.alpha_at(r.m).powi(2) * sched.s_at(r.m).powf(2.0 * sched.nu(2)));
            prop_assert!((f - r.f_m).abs() <= 1e-12 * r.f_m.abs().max(1e-300));
        }
    }

    #[test]
    fn schedule_identities(rho in 0.1f64..4.0, alpha in 0.01f64..1.0) {
        let s = KamSchedule::new(alpha, 1.2, rho, 0.5);
        let total: f64 = (1..50).map(|m| s.s_at(m)).sum();
        prop_assert!(total < rho / 4.0);
        for m in 0..50 {
            prop_assert!(s.rho_at(m) - s.s_at(m) > rho / 4.0);
        }
        for m in 1..20 {
            prop_assert_eq!(s.alpha_at(m), alpha / ((m + 1) * (m + 1)) as f64);
        }
    }
}
