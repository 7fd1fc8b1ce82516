use crate::error::{Error, Result};
use crate::linalg::matrix::Matrix;
use crate::linalg::svd::singular_values;

/// `sqrt(Σ aᵢⱼ²)`, equal to `sqrt(Σ σᵢ²)`.
pub fn frobenius_norm(a: &Matrix) -> Result<f64> {
    a.ensure_finite("frobenius_norm")?;
    Ok(a.frobenius())
}

/// `Σ σᵢ`
pub fn nuclear_norm(a: &Matrix) -> Result<f64> {
    Ok(singular_values(a)?.iter().sum())
}

/// `σ₁`
pub fn operator_norm(a: &Matrix) -> Result<f64> {
    Ok(singular_values(a)?[0])
}

/// Nuclear norm over operator norm, a value in `[1, min(m, n)]`.
pub fn effective_rank(a: &Matrix) -> Result<f64> {
    effective_rank_from_sigma(&singular_values(a)?)
}

/// Effective rank from a descending singular value list.
pub fn effective_rank_from_sigma(sigma: &[f64]) -> Result<f64> {
    let top = sigma.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return Err(Error::Degenerate("effective rank of a zero matrix".into()));
    }
    Ok(sigma.iter().sum::<f64>() / top)
}
