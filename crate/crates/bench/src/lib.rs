//! Fixtures shared by the reduction benchmarks.

use qpkam::hill::{self, HillProblem};
use qpkam::invariants::{random_frequencies, random_hamiltonian_matrix, random_hamiltonian_series};
use qpkam::{ConstMatrix, QpMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Two random real Hamiltonian series of size `n` with modes up to `k_max`.
pub fn series_pair(n: usize, k_max: usize) -> (QpMatrix, QpMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = random_frequencies(&mut rng, 2);
    let a = random_hamiltonian_series(&mut rng, &w, n, k_max, 1.0, 0.6, false);
    let b = random_hamiltonian_series(&mut rng, &w, n, k_max, 1.0, 0.6, false);
    (a, b)
}

/// A random Hamiltonian `Λ` with a zero-average right-hand side over the same frequencies.
pub fn homological_input(n: usize, k_max: usize) -> (ConstMatrix, QpMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = random_frequencies(&mut rng, 2);
    let lam = ConstMatrix::new(random_hamiltonian_matrix(&mut rng, n));
    (lam, random_hamiltonian_series(&mut rng, &w, n, k_max, 1.0, 0.6, true))
}

pub fn golden_system() -> (HillProblem, ConstMatrix, QpMatrix) {
    let p = HillProblem::golden_example();
    let (a, q) = hill::build_system(&p);
    (p, a, q)
}
