use proptest::prelude::*;
use qpkam::invariants::{random_frequencies, random_hamiltonian_series};
use qpkam::linalg::{self, CMat, C64};
use qpkam::qpalg::{FrequencyVector, MultiIndex, QpMatrix};
use qpkam::hill;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Entrywise `Σ_k c_k (cos ⟨k,ω⟩t + i sin ⟨k,ω⟩t)`, coded apart from the library.
fn sample(m: &QpMatrix, t: f64) -> CMat {
    let n = m.dim();
    let w = m.omega().as_slice();
    let mut out = CMat::zeros(n, n);
    for (k, c) in m.coeffs() {
        let phase: f64 = k.components().iter().zip(w).map(|(&ki, &wi)| f64::from(ki) * wi * t).sum();
        let rot = C64::new(phase.cos(), phase.sin());
        for i in 0..n {
            for j in 0..n {
                out[(i, j)] += c[(i, j)] * rot;
            }
        }
    }
    out
}

fn golden_omega() -> FrequencyVector {
    FrequencyVector::new(vec![1.0, hill::golden()]).unwrap()
}

#[test]
fn product_matches_time_domain_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = random_frequencies(&mut rng, 2);
    let a = random_hamiltonian_series(&mut rng, &w, 2, 3, 1.0, 0.7, false);
    let b = random_hamiltonian_series(&mut rng, &w, 2, 3, 1.0, 0.7, false);
    let ab = a.product(&b, 6).unwrap();
    let worst = (0..50)
        .map(|j| {
            let t = -40.0 + 1.7 * j as f64;
            linalg::max_abs(&(sample(&ab, t) - sample(&a, t) * sample(&b, t)))
        })
        .fold(0.0, f64::max);
    assert!(worst <= 1e-10, "max error {worst:e}");
}

#[test]
fn average_matches_long_time_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let m = random_hamiltonian_series(&mut rng, &golden_omega(), 2, 5, 1.0, 0.5, false);
    let t_half = 1e4;
    let steps = 400_000;
    let h = 2.0 * t_half / steps as f64;
    let mut acc = CMat::zeros(2, 2);
    for j in 0..=steps {
        let wgt = if j == 0 || j == steps {
            1.0
        } else if j % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += sample(&m, j as f64 * h) * C64::new(wgt, 0.0);
    }
    let mean = acc * C64::new(h / 3.0 / (2.0 * t_half), 0.0);
    let avg = m.average().unwrap();
    let err = linalg::max_abs(&(mean - avg.as_mat()));
    assert!(err <= 1e-3, "error {err:e}");
}

#[test]
fn derivative_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let w = random_frequencies(&mut rng, 2);
    let m = random_hamiltonian_series(&mut rng, &w, 2, 3, 1.0, 0.7, false);
    let d = m.derivative();
    let h = 1e-6;
    for j in 0..20 {
        let t = 0.37 * j as f64 - 3.0;
        let fd = (m.evaluate(t + h) - m.evaluate(t - h)) * C64::new(0.5 / h, 0.0);
        let err = linalg::max_abs(&(fd - d.evaluate(t)));
        assert!(err <= 1e-6, "t = {t}: {err:e}");
    }
}

#[test]
fn hill_coefficient_with_root_two() {
    let w = FrequencyVector::new(vec![1.0, 2f64.sqrt()]).unwrap();
    let half = CMat::from_element(1, 1, C64::new(0.5, 0.0));
    let coeffs = vec![
        (MultiIndex::zero(2), CMat::from_element(1, 1, C64::new(1.0, 0.0))),
        (MultiIndex::new(vec![1, 0]), half.clone()),
        (MultiIndex::new(vec![-1, 0]), half.clone()),
        (MultiIndex::new(vec![0, 1]), half.clone()),
        (MultiIndex::new(vec![0, -1]), half),
    ];
    let a = QpMatrix::from_coeffs(w, 1, 1.0, 1, coeffs).unwrap();
    let v = a.evaluate(1.0)[(0, 0)];
    let expect = 1.0 + 1f64.cos() + 2f64.sqrt().cos();
    assert!((v.re - expect).abs() <= 1e-15 && v.im.abs() <= 1e-15);
}

#[test]
fn constructed_hamiltonian_series_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..10 {
        let w = random_frequencies(&mut rng, 3);
        let m = random_hamiltonian_series(&mut rng, &w, 4, 2, 1.0, 0.5, false);
        assert!(m.is_hamiltonian(1e-14).unwrap());
    }
}

#[test]
fn real_series_evaluate_to_real_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let w = random_frequencies(&mut rng, 2);
    let m = random_hamiltonian_series(&mut rng, &w, 2, 4, 1.0, 0.5, false);
    for j in 0..20 {
        assert!(linalg::max_imag(&m.evaluate(j as f64 * 3.1)) <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn norm_is_submultiplicative(seed in any::<u64>(), k in 1usize..4, rho in 0.1f64..1.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_frequencies(&mut rng, 2);
        let a = random_hamiltonian_series(&mut rng, &w, 2, k, rho, 0.6, false);
        let b = random_hamiltonian_series(&mut rng, &w, 2, k, rho, 0.6, false);
        let ab = a.product(&b, 2 * k).unwrap();
        prop_assert_eq!(ab.tail_allowance(), 0.0);
        prop_assert!(ab.norm() <= a.norm() * b.norm() * (1.0 + 1e-12));
    }

    #[test]
    fn product_commutes_with_evaluation(seed in any::<u64>(), t in -100.0f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_frequencies(&mut rng, 2);
        let a = random_hamiltonian_series(&mut rng, &w, 2, 3, 1.0, 0.6, false);
        let b = random_hamiltonian_series(&mut rng, &w, 2, 3, 1.0, 0.6, false);
        let ab = a.product(&b, 6).unwrap();
        let err = linalg::max_abs(&(ab.evaluate(t) - a.evaluate(t) * b.evaluate(t)));
        prop_assert!(err <= 1e-10 * (1.0 + a.norm() * b.norm()));
    }

    #[test]
    fn average_is_zero_mode_and_derivative_averages_to_zero(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_frequencies(&mut rng, 2);
        let m = random_hamiltonian_series(&mut rng, &w, 2, 3, 1.0, 0.6, false);
        prop_assert_eq!(m.average().unwrap().into_inner(), m.zero_mode());
        prop_assert!(m.derivative().zero_mode().iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn hamiltonian_closed_under_linear_combination(seed in any::<u64>(), x in -3.0f64..3.0, y in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_frequencies(&mut rng, 2);
        let a = random_hamiltonian_series(&mut rng, &w, 2, 3, 1.0, 0.6, false);
        let b = random_hamiltonian_series(&mut rng, &w, 2, 3, 1.0, 0.6, false);
        let c = a.scale_real(x).add(&b.scale_real(y)).unwrap();
        prop_assert!(c.is_hamiltonian(1e-13).unwrap());
    }

    #[test]
    fn json_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_frequencies(&mut rng, 2);
        let m = random_hamiltonian_series(&mut rng, &w, 2, 2, 0.8, 0.6, false);
        let back = QpMatrix::from_json(&m.to_json()).unwrap();
        prop_assert_eq!(back.coeffs(), m.coeffs());
        prop_assert_eq!(back.omega().as_slice(), m.omega().as_slice());
    }
}
