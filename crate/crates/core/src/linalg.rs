//! Small dense complex matrix helpers shared by every module.

use nalgebra::DMatrix;
use num_complex::Complex64;

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;

pub const I: C64 = C64::new(0.0, 1.0);

/// Maximum absolute row sum. This is the operator norm used throughout
/// (it matches the row-max structure of the weighted quasi-periodic norm).
pub fn op_norm(m: &CMat) -> f64 {
    (0..m.nrows())
        .map(|i| m.row(i).iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn max_abs(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Standard symplectic unit `J = [[0, I], [−I, 0]]` of even dimension `n`.
pub fn symplectic_unit(n: usize) -> CMat {
    assert!(n % 2 == 0, "symplectic unit needs even dimension");
    let h = n / 2;
    let mut j = CMat::zeros(n, n);
    for i in 0..h {
        j[(i, i + h)] = C64::new(1.0, 0.0);
        j[(i + h, i)] = C64::new(-1.0, 0.0);
    }
    j
}

/// Largest entrywise asymmetry of `J⁻¹ M`. Zero iff `M` is Hamiltonian.
pub fn hamiltonian_defect(m: &CMat) -> f64 {
    let n = m.nrows();
    let jinv = -symplectic_unit(n);
    let s = jinv * m;
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((s[(i, j)] - s[(j, i)]).norm());
        }
    }
    worst
}

/// `max |MᵀJM − J|` entrywise.
pub fn symplectic_defect(m: &CMat) -> f64 {
    let j = symplectic_unit(m.nrows());
    max_abs(&(m.transpose() * &j * m - j))
}

pub fn from_real(rows: &[&[f64]]) -> CMat {
    let n = rows.len();
    let c = rows.first().map_or(0, |r| r.len());
    CMat::from_fn(n, c, |i, j| C64::new(rows[i][j], 0.0))
}

pub fn identity(n: usize) -> CMat {
    CMat::identity(n, n)
}

pub fn real_part(m: &CMat) -> DMatrix<f64> {
    m.map(|z| z.re)
}

pub fn max_imag(m: &CMat) -> f64 {
    m.iter().map(|z| z.im.abs()).fold(0.0, f64::max)
}

pub fn complexify(m: &DMatrix<f64>) -> CMat {
    m.map(|x| C64::new(x, 0.0))
}

/// Dense matrix exponential (scaling and squaring, Padé).
pub fn expm(m: &CMat) -> CMat {
    m.exp()
}

pub fn inverse(m: &CMat) -> Option<CMat> {
    m.clone().try_inverse()
}

/// Determinant of a real matrix.
pub fn det_real(m: &DMatrix<f64>) -> f64 {
    m.determinant()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_sum_norm() {
        let m = from_real(&[&[1.0, -2.0], &[0.5, 0.5]]);
        assert_eq!(op_norm(&m), 3.0);
    }

    #[test]
    fn nilpotent_hill_matrix_is_hamiltonian() {
        let a = from_real(&[&[0.0, 1.0], &[0.0, 0.0]]);
        assert_eq!(hamiltonian_defect(&a), 0.0);
        assert!(hamiltonian_defect(&identity(2)) > 1.0);
    }

    #[test]
    fn rotation_exponential_is_symplectic() {
        let g = from_real(&[&[0.0, 1.0], &[-1.0, 0.0]]) * C64::new(0.7, 0.0);
        let e = expm(&g);
        assert!((e[(0, 0)].re - 0.7f64.cos()).abs() < 1e-14);
        assert!((e[(0, 1)].re - 0.7f64.sin()).abs() < 1e-14);
        assert!(symplectic_defect(&e) < 1e-14);
    }
}
