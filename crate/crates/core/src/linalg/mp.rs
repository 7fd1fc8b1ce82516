//! Marchenko–Pastur reference law for squared singular values.
//!
//! Convention: for an `N × M` matrix `X` (`N ≥ M`, transpose first otherwise)
//! with i.i.d. entries of variance `s²`, the squared singular values of `X`
//! follow MP with `sigma2 = s² · N`. Equivalently, the eigenvalues of `XᵀX/N`
//! follow MP with `sigma2 = s²`.

use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MpParams {
    pub sigma2: f64,
    pub n_rows: usize,
    pub n_cols: usize,
}

impl MpParams {
    /// Orients so that `n_rows ≥ n_cols`.
    pub fn new(sigma2: f64, rows: usize, cols: usize) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidInput(format!("MP variance must be positive, got {sigma2}")));
        }
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidInput("MP dimensions must be positive".into()));
        }
        Ok(Self {
            sigma2,
            n_rows: rows.max(cols),
            n_cols: rows.min(cols),
        })
    }

    /// Parameters for the squared singular values of a `rows × cols` matrix
    /// with entry standard deviation `std`.
    pub fn for_matrix(rows: usize, cols: usize, std: f64) -> Result<Self> {
        Self::new(std * std * rows.max(cols) as f64, rows, cols)
    }

    fn ratio(&self) -> f64 {
        self.n_cols as f64 / self.n_rows as f64
    }
}

/// `λ± = σ²(1 ± √(M/N))²`
pub fn mp_edges(p: &MpParams) -> (f64, f64) {
    let r = p.ratio().sqrt();
    (p.sigma2 * (1.0 - r).powi(2), p.sigma2 * (1.0 + r).powi(2))
}

pub fn mp_density(lambda: f64, p: &MpParams) -> f64 {
    let (lo, hi) = mp_edges(p);
    if !(lambda >= lo && lambda <= hi) || lambda <= 0.0 {
        return 0.0;
    }
    let scale = p.n_rows as f64 / (2.0 * PI * p.sigma2 * p.n_cols as f64);
    scale * ((hi - lambda) * (lambda - lo)).max(0.0).sqrt() / lambda
}

/// Mass of the MP density on `(-∞, x]`.
///
/// With `λ = a − b cos θ`, `a = (λ⁺ + λ⁻)/2`, `b = (λ⁺ − λ⁻)/2`, the density
/// integrates in closed form:
/// `F = N/(2πσ²M) · [b sin θ + aθ − 2√(λ⁻λ⁺) · atan2(√λ⁺ sin(θ/2), √λ⁻ cos(θ/2))]`.
pub fn mp_cdf(x: f64, p: &MpParams) -> f64 {
    let (lo, hi) = mp_edges(p);
    if x <= lo {
        return 0.0;
    }
    if x >= hi {
        return 1.0;
    }
    let theta = (1.0 - 2.0 * (x - lo) / (hi - lo)).clamp(-1.0, 1.0).acos();
    antiderivative(theta, p).clamp(0.0, 1.0)
}

/// Total mass of the density over its support; 1 when `N ≥ M`.
pub fn mp_total_mass(p: &MpParams) -> f64 {
    antiderivative(PI, p)
}

fn antiderivative(theta: f64, p: &MpParams) -> f64 {
    let (lo, hi) = mp_edges(p);
    let (a, b) = ((hi + lo) / 2.0, (hi - lo) / 2.0);
    let pre = p.n_rows as f64 / (2.0 * PI * p.sigma2 * p.n_cols as f64);
    let half = theta / 2.0;
    let arc = (hi.sqrt() * half.sin()).atan2(lo.sqrt() * half.cos());
    pre * (b * theta.sin() + a * theta - 2.0 * (lo * hi).sqrt() * arc)
}
