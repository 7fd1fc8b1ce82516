//! One-sided Jacobi SVD.
//!
//! Columns of a working copy of `A` (m ≥ n) are rotated pairwise until every
//! pair is orthogonal to relative tolerance [`ORTHO_TOL`]. The rotations
//! accumulate into `V`; column norms give `σ`, normalized columns give `U`.
//! Sweep order is fixed (cyclic by rows), so the result is deterministic.

use crate::error::{Error, Result};
use crate::linalg::matrix::{dot, Matrix};

const ORTHO_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 60;
/// Singular values below `σ₁ · RANK_TOL` get a completed (not normalized) left vector.
const RANK_TOL: f64 = 1e-13;

/// Thin SVD: `a = u · diag(sigma) · vᵀ`, `k = min(m, n)`.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `u · diag(sigma) · vᵀ`
    pub fn recompose(&self) -> Matrix {
        let k = self.sigma.len();
        let us = Matrix::from_fn(self.u.rows(), k, |i, j| self.u[(i, j)] * self.sigma[j]);
        us.matmul_t(&self.v).expect("svd factors are shape-consistent")
    }
}

pub fn svd(a: &Matrix) -> Result<Svd> {
    a.ensure_finite("svd input")?;
    if a.rows() >= a.cols() {
        Ok(jacobi_tall(a))
    } else {
        let t = jacobi_tall(&a.transpose());
        Ok(fix_signs(Svd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        }))
    }
}

/// Singular values only, descending.
pub fn singular_values(a: &Matrix) -> Result<Vec<f64>> {
    Ok(svd(a)?.sigma)
}

/// SVD of `u · vᵀ` without forming the product: `k = min(r, m, n)`.
pub fn svd_factored(u: &Matrix, v: &Matrix) -> Result<Svd> {
    if u.cols() != v.cols() {
        return Err(Error::Shape(format!(
            "factor ranks differ: {} vs {}",
            u.cols(),
            v.cols()
        )));
    }
    if u.rows() < u.cols() || v.rows() < v.cols() {
        return svd(&u.matmul_t(v)?);
    }
    // u = Q S Pᵀ, so u vᵀ = Q (S Pᵀ vᵀ) and Q has orthonormal columns.
    let su = svd(u)?;
    let sp = Matrix::from_fn(su.v.cols(), su.v.rows(), |i, j| su.sigma[i] * su.v[(j, i)]);
    let inner = svd(&sp.matmul_t(v)?)?;
    Ok(fix_signs(Svd {
        u: su.u.matmul(&inner.u)?,
        sigma: inner.sigma,
        v: inner.v,
    }))
}

/// Keeps the leading `r` singular triplets.
pub fn truncate(s: &Svd, r: usize) -> Result<Svd> {
    let k = s.sigma.len();
    if r == 0 || r > k {
        return Err(Error::Rank { rank: r, max: k });
    }
    Ok(Svd {
        u: s.u.leading_columns(r),
        sigma: s.sigma[..r].to_vec(),
        v: s.v.leading_columns(r),
    })
}

fn jacobi_tall(a: &Matrix) -> Svd {
    let (m, n) = a.shape();
    debug_assert!(m >= n);

    // Column-major working storage so rotations touch contiguous memory.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let mut norms: Vec<f64> = cols.iter().map(|c| dot(c, c)).collect();
    // Columns below this squared norm are numerically zero; rotating them
    // against each other only shuffles rounding noise.
    let negligible = {
        let fro2: f64 = norms.iter().sum();
        f64::EPSILON * f64::EPSILON * fro2
    };

    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let alpha = norms[p];
                let beta = norms[q];
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || alpha.min(beta) <= negligible || gamma.abs() <= ORTHO_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (cp, cq) = pair_mut(&mut cols, p, q);
                rotate(cp, cq, c, s);
                norms[p] = dot(cp, cp);
                norms[q] = dot(cq, cq);
                let (vp, vq) = pair_mut(&mut vcols, p, q);
                rotate(vp, vq, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let sigma_raw: Vec<f64> = norms.iter().map(|s| s.sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable: ties keep column order.
    order.sort_by(|&i, &j| sigma_raw[j].total_cmp(&sigma_raw[i]));

    let sigma_max = order.first().map(|&i| sigma_raw[i]).unwrap_or(0.0);
    let mut u = Matrix::zeros(m, n);
    let mut v = Matrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        let s = sigma_raw[src];
        sigma.push(s);
        v.set_column(dst, &vcols[src]);
        if s > 0.0 && s > sigma_max * RANK_TOL {
            let ucol: Vec<f64> = cols[src].iter().map(|x| x / s).collect();
            u.set_column(dst, &ucol);
        } else {
            missing.push(dst);
        }
    }
    complete_orthonormal(&mut u, &missing);
    fix_signs(Svd { u, sigma, v })
}

fn pair_mut<T>(v: &mut [T], p: usize, q: usize) -> (&mut T, &mut T) {
    debug_assert!(p < q);
    let (lo, hi) = v.split_at_mut(q);
    (&mut lo[p], &mut hi[0])
}

fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

/// Fills the listed columns of `u` with unit vectors orthogonal to all other
/// columns. Each is the standard basis vector with the largest residual
/// after Gram–Schmidt (applied twice), which is at least `sqrt((m - d)/m)`
/// with `d` columns already placed.
fn complete_orthonormal(u: &mut Matrix, missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let (m, k) = u.shape();
    let mut filled: Vec<bool> = vec![true; k];
    for &j in missing {
        filled[j] = false;
    }
    let mut basis: Vec<Vec<f64>> = (0..k).filter(|&j| filled[j]).map(|j| u.column(j)).collect();
    let residual = |i: usize, basis: &[Vec<f64>]| {
        let mut e = vec![0.0; m];
        e[i] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let proj = dot(&e, b);
                for (x, y) in e.iter_mut().zip(b) {
                    *x -= proj * y;
                }
            }
        }
        e
    };
    for &j in missing {
        let mut best = (f64::NEG_INFINITY, Vec::new());
        for i in 0..m {
            let e = residual(i, &basis);
            let norm = dot(&e, &e).sqrt();
            if norm > best.0 {
                best = (norm, e);
            }
        }
        let (norm, mut e) = best;
        e.iter_mut().for_each(|x| *x /= norm);
        u.set_column(j, &e);
        basis.push(e);
    }
}

/// Each left singular vector's largest-magnitude entry (first on ties) is
/// made positive; the matching right vector flips with it.
fn fix_signs(mut s: Svd) -> Svd {
    let (m, k) = s.u.shape();
    let n = s.v.rows();
    for j in 0..k {
        let mut best = 0;
        let mut best_abs = -1.0;
        for i in 0..m {
            let a = s.u[(i, j)].abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if s.u[(best, j)] < 0.0 {
            for i in 0..m {
                s.u[(i, j)] = -s.u[(i, j)];
            }
            for i in 0..n {
                s.v[(i, j)] = -s.v[(i, j)];
            }
        }
    }
    s
}
