//! Initialization schemes for (factorized) weights and the regularization
//! penalties compared on them.
//!
//! Penalties return explicit gradients alongside the loss term; the trainer
//! adds them to the backpropagated gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, svd, truncate, Matrix, Rng};
use crate::net::{layer_name, FactorizedParam, KernelShape, LayerSpec, NetworkSpec, ParamSet};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    #[default]
    He,
    Spectral,
    SpectralOnes,
}

impl InitScheme {
    pub fn name(&self) -> &'static str {
        match self {
            InitScheme::He => "he",
            InitScheme::Spectral => "spectral",
            InitScheme::SpectralOnes => "spectral_ones",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegKind {
    #[default]
    None,
    /// `λ/2 (‖U‖² + ‖V‖²)`
    #[serde(rename = "l2")]
    L2Factors,
    /// `λ/2 ‖UVᵀ‖²`
    FrobeniusDecay,
    /// `λ/2 ‖W‖²` on unfactorized weights.
    WeightDecay,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegPenalty {
    pub kind: RegKind,
    #[serde(default)]
    pub lambda: f64,
}

impl RegPenalty {
    pub fn new(kind: RegKind, lambda: f64) -> Result<Self> {
        let p = Self { kind, lambda };
        p.validate()?;
        Ok(p)
    }

    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidInput(format!("penalty lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Loss term and gradients of a penalty on a factor pair.
#[derive(Clone, Debug)]
pub struct FactorPenalty {
    pub loss: f64,
    pub grad_u: Matrix,
    pub grad_v: Matrix,
}

/// `N(0, 2/fan_in)` entries.
pub fn he_init(rng: &mut Rng, rows: usize, cols: usize, fan_in: usize) -> Result<Matrix> {
    if fan_in == 0 {
        return Err(Error::InvalidInput("fan_in must be >= 1".into()));
    }
    gaussian_matrix(rng, rows, cols, (2.0 / fan_in as f64).sqrt())
}

/// Truncated-SVD split: `U = Û_r √Σ_r`, `V = V̂_r √Σ_r`.
pub fn spectral_init(w0: &Matrix, r: usize) -> Result<FactorizedParam> {
    spectral_factors(w0, r, false)
}

/// Singular directions only: `U = Û_r`, `V = V̂_r`.
pub fn spectral_ones_init(w0: &Matrix, r: usize) -> Result<FactorizedParam> {
    spectral_factors(w0, r, true)
}

fn spectral_factors(w0: &Matrix, r: usize, ones: bool) -> Result<FactorizedParam> {
    let k = w0.rows().min(w0.cols());
    if r == 0 || r > k {
        return Err(Error::Rank { rank: r, max: k });
    }
    let t = truncate(&svd(w0)?, r)?;
    if ones {
        return FactorizedParam::new(t.u, t.v);
    }
    let root: Vec<f64> = t.sigma.iter().map(|s| s.sqrt()).collect();
    let u = Matrix::from_fn(t.u.rows(), r, |i, j| t.u[(i, j)] * root[j]);
    let v = Matrix::from_fn(t.v.rows(), r, |i, j| t.v[(i, j)] * root[j]);
    FactorizedParam::new(u, v)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidInput(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(())
}

pub fn l2_factor_penalty(u: &Matrix, v: &Matrix, lambda: f64) -> Result<FactorPenalty> {
    check_lambda(lambda)?;
    let loss = 0.5 * lambda * (u.frobenius().powi(2) + v.frobenius().powi(2));
    Ok(FactorPenalty {
        loss,
        grad_u: u.scale(lambda),
        grad_v: v.scale(lambda),
    })
}

pub fn frobenius_decay_penalty(u: &Matrix, v: &Matrix, lambda: f64) -> Result<FactorPenalty> {
    check_lambda(lambda)?;
    let w = u.matmul_t(v)?;
    let loss = 0.5 * lambda * w.frobenius().powi(2);
    Ok(FactorPenalty {
        loss,
        grad_u: w.matmul(v)?.scale(lambda),
        grad_v: w.t_matmul(u)?.scale(lambda),
    })
}

/// `λ/2 ‖W‖²` and its gradient `λW`.
pub fn weight_decay_penalty(w: &Matrix, lambda: f64) -> Result<(f64, Matrix)> {
    check_lambda(lambda)?;
    Ok((0.5 * lambda * w.frobenius().powi(2), w.scale(lambda)))
}

/// `½(‖U‖² + ‖V‖²) − ‖UVᵀ‖_*`, non-negative and zero exactly for balanced
/// factorizations.
pub fn nuclear_gap(u: &Matrix, v: &Matrix) -> Result<f64> {
    let w = u.matmul_t(v)?;
    let nuclear: f64 = svd(&w)?.sigma.iter().sum();
    Ok(0.5 * (u.frobenius().powi(2) + v.frobenius().powi(2)) - nuclear)
}

/// Fresh parameters for `spec`.
///
/// Layer `i` draws from `Rng::new(seed).fork(i)`. Unfactorized weights are
/// He-initialized with `fan_in = m` (dense) or `h·w·c_in` (conv). For
/// factorized layers:
/// - `He`: `U ~ N(0, 2/m)`, `V ~ N(0, 2/r)`;
/// - `Spectral` / `SpectralOnes`: first draw the unfactorized He weight
///   exactly as an unfactorized layer would, then factor it.
///
/// Biases start at zero.
pub fn init_params(spec: &NetworkSpec, scheme: InitScheme, seed: u64) -> Result<ParamSet> {
    let root = Rng::new(seed);
    let mut params = ParamSet::new();
    for (i, layer) in spec.layers().iter().enumerate() {
        let Some((m, n)) = layer.weight_shape() else { continue };
        let name = layer_name(i);
        let mut rng = root.fork(i as u64);
        match layer.rank() {
            None => params.insert(format!("{name}.w"), he_init(&mut rng, m, n, m)?),
            Some(r) => {
                let p = match scheme {
                    InitScheme::He => FactorizedParam::new(he_init(&mut rng, m, r, m)?, he_init(&mut rng, n, r, r)?)?,
                    InitScheme::Spectral => spectral_init(&he_init(&mut rng, m, n, m)?, r)?,
                    InitScheme::SpectralOnes => spectral_ones_init(&he_init(&mut rng, m, n, m)?, r)?,
                };
                let p = match *layer {
                    LayerSpec::FactorizedConv { conv, .. } => p.with_kernel(KernelShape {
                        h: conv.kernel_h,
                        w: conv.kernel_w,
                        c_in: conv.in_channels,
                        c_out: conv.out_channels,
                    })?,
                    _ => p,
                };
                params.insert(format!("{name}.u"), p.u);
                params.insert(format!("{name}.v"), p.v);
            }
        }
        if let Some((_, (1, cols))) = spec.param_shapes().into_iter().find(|(p, _)| *p == format!("{name}.b")) {
            params.insert(format!("{name}.b"), Matrix::zeros(1, cols));
        }
    }
    Ok(params)
}
