use proptest::prelude::*;
use qpkam::diophantine::{self, DiophantineSpec, ExponentMode};
use qpkam::hill::{self, HillProblem};
use qpkam::invariants::{cube_enumeration, random_frequencies};
use qpkam::kam;
use qpkam::linalg::C64;
use qpkam::qpalg::{FrequencyVector, MultiIndex, QpMatrix};
use qpkam::ConstMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn golden_omega() -> FrequencyVector {
    FrequencyVector::new(vec![1.0, hill::golden()]).unwrap()
}

#[test]
fn unit_frequency_passes_base_check() {
    let w = FrequencyVector::new(vec![1.0]).unwrap();
    let zero = [C64::new(0.0, 0.0); 2];
    let out = diophantine::check_nonresonance(&w, &zero, &DiophantineSpec::new(0.5, 1.01, ExponentMode::BaseTau, 10));
    assert!(out.pass);
    assert_eq!(out.min_modulus, 1.0);
}

#[test]
fn golden_frequencies_match_enumeration_at_fifty() {
    let w = golden_omega();
    let zero = [C64::new(0.0, 0.0); 2];
    let spec = DiophantineSpec::new(0.1, 1.2, ExponentMode::BaseTau, 50);
    let out = diophantine::check_nonresonance(&w, &zero, &spec);
    let (pass, min_d, min_margin) = cube_enumeration(w.as_slice(), &zero, 50, |l| 0.1 / (l as f64).powf(1.2));
    assert_eq!(out.pass, pass);
    assert_eq!(out.min_modulus, min_d);
    assert_eq!(out.worst.unwrap().margin(), min_margin);
}

#[test]
fn hill_check_is_the_plain_frequency_condition() {
    let w = golden_omega();
    let zero = [C64::new(0.0, 0.0); 2];
    let spec = DiophantineSpec::new(0.3, 1.2, ExponentMode::BaseTau, 12);
    let out = diophantine::check_nonresonance(&w, &zero, &spec);
    let direct = MultiIndex::ball(2, 12).iter().filter(|k| !k.is_zero()).all(|k| w.dot(k).abs() >= 0.3 / (k.l1() as f64).powf(1.2));
    assert_eq!(out.pass, direct);
}

#[test]
fn extended_check_with_run_b_matches_enumeration() {
    let p = HillProblem::golden_example();
    let (a, q) = hill::build_system(&p);
    let res = kam::reduce(&a, &q, 1e-3, &p.schedule(0.5, 1.2, 12));
    let b = hill::extract_b(&res.b, 1e-10).unwrap();
    // α/2 must stay below √b ≈ 0.0316 for the k = (0, 0, 1) term.
    let spec = DiophantineSpec::new(0.01, 1.2, ExponentMode::BaseTau, 12);
    let out = diophantine::check_extended_frequencies(&p.omega, b, &spec);
    let coarse = DiophantineSpec { alpha: 0.5, ..spec.clone() };
    assert!(!diophantine::check_extended_frequencies(&p.omega, b, &coarse).pass);
    let ext = [1.0, hill::golden(), b.sqrt()];
    let zero = [C64::new(0.0, 0.0)];
    let (pass, min_d, min_margin) = cube_enumeration(&ext, &zero, 12, |l| 0.005 / (l as f64).powf(5.0 * 1.2 + 4.0));
    assert!(out.pass && pass);
    assert_eq!(out.min_modulus, min_d);
    assert_eq!(out.worst.unwrap().margin(), min_margin);
}

#[test]
fn resonant_sweep_reports_the_offending_mode() {
    // Gap 2√ε of the averaged matrix meets ω = 0.05 at ε = 6.25e-4.
    let p = HillProblem::cosine(FrequencyVector::new(vec![0.05]).unwrap(), 1.0, &[(MultiIndex::new(vec![1]), 0.01)], 1.0).unwrap();
    let (a, q) = hill::build_system(&p);
    let rep = diophantine::sweep(&a, &q, 1e-3, 50, &p.schedule(0.01, 0.5, 12));
    let reduced = rep.outcomes.iter().filter(|o| o.reduced).count();
    assert_eq!(rep.success_fraction, reduced as f64 / 50.0);
    assert!(rep.success_fraction < 1.0 && rep.success_fraction > 0.3);
    let hit = rep.failure_clusters.iter().find(|c| c.eps_lo < 6.25e-4 && 6.25e-4 < c.eps_hi).expect("cluster around the resonance");
    assert_eq!(hit.k.as_ref().map(|k| k.l1()), Some(1));
    assert!(rep.outcomes.first().unwrap().reduced);

    let mut csv = Vec::new();
    rep.write_csv(&mut csv, 1).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("eps,status,b,worst_k1\n"));
    assert_eq!(text.lines().count(), 51);
}

#[test]
fn zero_perturbation_sweep_is_complete() {
    let a = ConstMatrix::from_real_rows(&[&[0.0, 1.0], &[-1.0, 0.0]]);
    let q = QpMatrix::zeros(golden_omega(), 2, 1.0, 2);
    let rep = diophantine::sweep(&a, &q, 1e-2, 10, &kam::KamSchedule::new(0.5, 1.2, 1.0, 0.5));
    assert_eq!(rep.success_fraction, 1.0);
    assert!(rep.failure_clusters.is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn witness_attains_the_worst_margin(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_frequencies(&mut rng, 2);
        let mu = rng.random_range(0.0..0.5);
        let vals = [C64::new(0.0, mu), C64::new(0.0, -mu)];
        let spec = DiophantineSpec::new(rng.random_range(0.01..1.0), 1.5, ExponentMode::TripleTau, 8);
        let out = diophantine::check_nonresonance(&w, &vals, &spec);
        let wit = out.worst.unwrap();
        let d = (C64::new(0.0, w.dot(&wit.k)) - vals[wit.i] + vals[wit.j]).norm();
        prop_assert_eq!(d, wit.modulus);
        prop_assert_eq!(spec.threshold(&wit.k), wit.threshold);
        prop_assert_eq!(out.pass, wit.modulus >= wit.threshold);
    }

    #[test]
    fn doubling_alpha_never_repairs(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = rng.random_range(1..=3usize);
        let w = random_frequencies(&mut rng, r);
        let vals = [C64::new(0.0, rng.random_range(-0.5..0.5)), C64::new(0.0, rng.random_range(-0.5..0.5))];
        let spec = DiophantineSpec::new(rng.random_range(0.01..1.0), r as f64, ExponentMode::BaseTau, 6);
        let doubled = DiophantineSpec { alpha: 2.0 * spec.alpha, ..spec.clone() };
        let before = diophantine::check_nonresonance(&w, &vals, &spec).pass;
        let after = diophantine::check_nonresonance(&w, &vals, &doubled).pass;
        prop_assert!(before || !after);
    }
}
