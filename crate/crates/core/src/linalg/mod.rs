//! Dense linear algebra: matrices, Jacobi SVD, spectral norms, seeded
//! Gaussian ensembles, and the Marchenko–Pastur reference law.

mod matrix;
mod mp;
mod norms;
mod rng;
mod svd;

pub use matrix::Matrix;
pub use mp::{mp_cdf, mp_density, mp_edges, mp_total_mass, MpParams};
pub use norms::{effective_rank, effective_rank_from_sigma, frobenius_norm, nuclear_norm, operator_norm};
pub use rng::Rng;
pub use svd::{singular_values, svd, svd_factored, truncate, Svd};

use crate::error::{Error, Result};

/// `rows × cols` matrix of i.i.d. `N(0, std²)` draws.
pub fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Result<Matrix> {
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::InvalidInput(format!("gaussian std must be positive, got {std}")));
    }
    let data = (0..rows * cols).map(|_| rng.normal(0.0, std)).collect();
    Matrix::new(rows, cols, data)
}
