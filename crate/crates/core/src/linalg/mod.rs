//! Dense linear algebra used by calibration and simulation.
//!
//! Everything here is a pure function of its inputs.

mod eigen;
mod hadamard;
mod matrix;
mod permutation;
mod qr;
mod softmax;

pub use eigen::{sym_eig, EigenDecomposition, CONVERGENCE_FACTOR, MAX_SWEEPS, SYMMETRY_TOLERANCE};
pub use hadamard::{fwht_normalized, hadamard_matrix};
pub(crate) use hadamard::require_power_of_two;
pub use matrix::{dot, relative_error, RealMatrix};
pub use permutation::{apply_permutation_columns, bit_reversal, Permutation};
pub use qr::{orthonormalize_columns, random_orthogonal, random_orthonormal};
pub use softmax::{masked_softmax_rows, softmax_in_place};
