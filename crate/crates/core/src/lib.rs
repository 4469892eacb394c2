//! Reduction of quasi-periodic linear Hamiltonian systems
//!
//! ```text
//!     ẋ = (A + ε Q(t)) x,      Q(t) = Σ_k Q_k e^{i⟨k,ω⟩t}
//! ```
//!
//! to a constant-coefficient system `ẏ = B y` by a quadratically convergent
//! KAM iteration, together with the machinery needed to check the result
//! against brute force: a high-order integrator for the original system,
//! exhaustive small-divisor enumeration and a Hill's-equation front end.
//!
//! Module map:
//!
//! - [`qpalg`]: truncated Fourier series of matrices, weighted norms, averaging.
//! - [`spectral`]: eigen-decomposition of small constant matrices and the
//!   eigenvalue perturbation gate.
//! - [`homological`]: the linearized conjugacy equation `Ṗ = ΛP − PΛ + R`.
//! - [`kam`]: the full iteration, exponentials, composition, convergence fits.
//! - [`diophantine`]: non-resonance checks and ε-grid sweeps.
//! - [`hill`]: `ẍ + ε a(t) x = 0`, its reduction, b-scaling and stability.
//! - [`oracle`]: independent integration of the fundamental matrix.
//! - [`invariants`]: the named invariant suite used by `qpkam verify`.

pub mod diophantine;
pub mod hill;
pub mod homological;
pub mod invariants;
pub mod kam;
pub mod linalg;
pub mod oracle;
pub mod qpalg;
pub mod spectral;

pub use diophantine::{DiophantineSpec, ExponentMode, SweepReport};
pub use hill::{HillProblem, HillVerdict};
pub use homological::{DivisorTable, HomologicalSolution};
pub use kam::{KamSchedule, ReductionResult, ReductionStatus, StepRecord};
pub use linalg::{CMat, C64};
pub use oracle::{FundamentalSolution, IntegratorConfig};
pub use qpalg::{ConstMatrix, FrequencyVector, MultiIndex, QpMatrix};
pub use spectral::{EigenDecomposition, SeparationGate};
