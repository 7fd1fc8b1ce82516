//! Measurements on weights and checkpoints: update-equation checks,
//! singular-value trajectories, effective rank, ESD vs. Marchenko–Pastur,
//! interpolation sweeps and the flop/parameter cost model.

use serde::Serialize;

use crate::data::Split;
use crate::error::{Error, Result};
use crate::io::checkpoint::Checkpoint;
use crate::linalg::{effective_rank_from_sigma, mp_cdf, mp_edges, singular_values, Matrix, MpParams};
use crate::net::{evaluate, layer_name, LayerSpec, NetworkSpec, ParamSet};

fn check_factor_shapes(u: &Matrix, v: &Matrix, g: &Matrix) -> Result<()> {
    if u.cols() != v.cols() || g.shape() != (u.rows(), v.rows()) {
        return Err(Error::Shape(format!(
            "U {:?}, V {:?}, ∇W {:?}: need U m×r, V n×r, ∇W m×n",
            u.shape(),
            v.shape(),
            g.shape()
        )));
    }
    Ok(())
}

/// `max |A − B|` for `A = (U − α∇U)(V − α∇V)ᵀ` with `∇U = ∇W·V`,
/// `∇V = ∇Wᵀ·U`, and the expansion
/// `B = UVᵀ − α(∇W·VVᵀ + UUᵀ·∇W) + α²·∇W·(UVᵀ)ᵀ·∇W`.
pub fn update_identity_check(u: &Matrix, v: &Matrix, grad_w: &Matrix, alpha: f64) -> Result<f64> {
    check_factor_shapes(u, v, grad_w)?;
    let gu = grad_w.matmul(v)?;
    let gv = grad_w.t_matmul(u)?;
    let mut u1 = u.clone();
    u1.add_scaled(-alpha, &gu)?;
    let mut v1 = v.clone();
    v1.add_scaled(-alpha, &gv)?;
    let a = u1.matmul_t(&v1)?;

    let w = u.matmul_t(v)?;
    let first = grad_w.matmul(&v.matmul_t(v)?)?.add(&u.matmul_t(u)?.matmul(grad_w)?)?;
    let second = grad_w.matmul(&w.transpose())?.matmul(grad_w)?;
    let mut b = w;
    b.add_scaled(-alpha, &first)?;
    b.add_scaled(alpha * alpha, &second)?;
    Ok(a.sub(&b)?.max_abs())
}

/// First-order change of `ŵ = W/‖W‖` predicted by the normalized update:
/// `−(α/‖W‖²)(I − ŵŵᵀ)·vec(∇̂)`.
pub fn normalized_direction_prediction(w: &Matrix, grad_hat: &Matrix, alpha: f64) -> Result<Matrix> {
    let n2 = w.inner(w)?;
    if n2 == 0.0 {
        return Err(Error::Degenerate("normalized update of a zero weight".into()));
    }
    let w_hat = w.scale(1.0 / n2.sqrt());
    let along = w_hat.inner(grad_hat)?;
    let mut p = grad_hat.clone();
    p.add_scaled(-along, &w_hat)?;
    Ok(p.scale(-alpha / n2))
}

#[derive(Clone, Debug, Serialize)]
pub struct NormalizedUpdateReport {
    pub alphas: Vec<f64>,
    /// `‖Δŵ_exact − Δŵ_predicted‖` per step size.
    pub residuals: Vec<f64>,
    /// `residual[i] / residual[i + 1]`.
    pub ratios: Vec<f64>,
}

/// Compares the exact one-step change of the weight direction under the
/// factored update with the first-order normalized-update prediction.
///
/// `g` is the gradient with respect to the direction `ŵ`; it is projected
/// orthogonal to `ŵ` (a scale-invariant loss has no radial gradient) and
/// mapped to `∇W = P(g)/‖W‖`. Then `∇̂ = P(g)·VVᵀ + UUᵀ·P(g)` and the
/// residual should shrink as `α²`.
pub fn normalized_update_check(u: &Matrix, v: &Matrix, g: &Matrix, alphas: &[f64]) -> Result<NormalizedUpdateReport> {
    check_factor_shapes(u, v, g)?;
    if alphas.len() < 2 || alphas.windows(2).any(|p| !(p[0] > p[1])) || alphas.iter().any(|&a| !(a > 0.0)) {
        return Err(Error::InvalidInput("need at least two positive, strictly decreasing step sizes".into()));
    }
    let w = u.matmul_t(v)?;
    let norm = w.frobenius();
    if norm == 0.0 {
        return Err(Error::Degenerate("normalized update of a zero weight".into()));
    }
    let w_hat = w.scale(1.0 / norm);
    let mut pg = g.clone();
    pg.add_scaled(-w_hat.inner(g)?, &w_hat)?;
    let grad_w = pg.scale(1.0 / norm);
    let grad_hat = pg.matmul(&v.matmul_t(v)?)?.add(&u.matmul_t(u)?.matmul(&pg)?)?;

    let mut residuals = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut u1 = u.clone();
        u1.add_scaled(-alpha, &grad_w.matmul(v)?)?;
        let mut v1 = v.clone();
        v1.add_scaled(-alpha, &grad_w.t_matmul(u)?)?;
        let w1 = u1.matmul_t(&v1)?;
        let exact = w1.scale(1.0 / w1.frobenius()).sub(&w_hat)?;
        let predicted = normalized_direction_prediction(&w, &grad_hat, alpha)?;
        residuals.push(exact.sub(&predicted)?.frobenius());
    }
    let ratios = residuals.windows(2).map(|p| p[0] / p[1]).collect();
    Ok(NormalizedUpdateReport {
        alphas: alphas.to_vec(),
        residuals,
        ratios,
    })
}

/// Kendall's tau-b; 0 when either series is constant.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    let (mut concordant, mut discordant, mut ties_x, mut ties_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = (x[j] - x[i]).partial_cmp(&0.0).unwrap_or(std::cmp::Ordering::Equal);
            let dy = (y[j] - y[i]).partial_cmp(&0.0).unwrap_or(std::cmp::Ordering::Equal);
            use std::cmp::Ordering::Equal;
            match (dx, dy) {
                (Equal, Equal) => {
                    ties_x += 1;
                    ties_y += 1;
                }
                (Equal, _) => ties_x += 1,
                (_, Equal) => ties_y += 1,
                (a, b) if a == b => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let pairs = (n * n.saturating_sub(1) / 2) as i64;
    let denom = (((pairs - ties_x) * (pairs - ties_y)) as f64).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (concordant - discordant) as f64 / denom
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrajectoryReport {
    pub layer: String,
    pub steps: Vec<u64>,
    /// All singular values of the composed weight, descending, per step.
    pub singular_values: Vec<Vec<f64>>,
    /// `σ₁ / Σσᵢ` per step.
    pub top1_share: Vec<f64>,
    pub effective_rank: Vec<f64>,
    /// Kendall tau of `top1_share` against step.
    pub tau: f64,
}

pub fn sv_trajectory(checkpoints: &[Checkpoint], layer: &str) -> Result<TrajectoryReport> {
    if checkpoints.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "a trajectory needs at least 2 checkpoints, got {}",
            checkpoints.len()
        )));
    }
    let mut report = TrajectoryReport {
        layer: layer.to_string(),
        steps: Vec::new(),
        singular_values: Vec::new(),
        top1_share: Vec::new(),
        effective_rank: Vec::new(),
        tau: 0.0,
    };
    for c in checkpoints {
        let w = c.params.composed_weight(layer)?;
        let sigma = singular_values(&w)?;
        let total: f64 = sigma.iter().sum();
        if total == 0.0 {
            return Err(Error::Degenerate(format!("{layer} is zero at step {}", c.step)));
        }
        report.steps.push(c.step);
        report.top1_share.push(sigma[0] / total);
        report.effective_rank.push(effective_rank_from_sigma(&sigma)?);
        report.singular_values.push(sigma);
    }
    let steps: Vec<f64> = report.steps.iter().map(|&s| s as f64).collect();
    report.tau = kendall_tau(&steps, &report.top1_share);
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerFilter {
    All,
    Factorized,
}

#[derive(Clone, Debug, Serialize)]
pub struct EffectiveRankReport {
    pub layers: Vec<(String, f64)>,
    pub mean: f64,
}

/// Effective rank of each composed weight and their mean.
pub fn effective_rank_report(params: &ParamSet, filter: LayerFilter) -> Result<EffectiveRankReport> {
    let mut layers = Vec::new();
    for name in params.weight_layers() {
        if filter == LayerFilter::Factorized && !params.contains(&format!("{name}.u")) {
            continue;
        }
        let sigma = params.layer_singular_values(&name)?;
        let er = effective_rank_from_sigma(&sigma).map_err(|_| Error::Degenerate(format!("{name} is all zero")))?;
        layers.push((name, er));
    }
    if layers.is_empty() {
        return Err(Error::Degenerate("no eligible layers".into()));
    }
    let mean = layers.iter().map(|(_, e)| e).sum::<f64>() / layers.len() as f64;
    Ok(EffectiveRankReport { layers, mean })
}

#[derive(Clone, Debug, Serialize)]
pub struct EsdReport {
    pub ks_distance: f64,
    pub lambda_minus: f64,
    pub lambda_plus: f64,
    pub empirical_max: f64,
    /// `(left bin edge, count)` over `[0, max(λ⁺, empirical max)]`.
    pub histogram: Vec<(f64, usize)>,
}

pub const ESD_MIN_ROWS: usize = 200;
pub const ESD_MIN_COLS: usize = 100;
const ESD_BINS: usize = 50;

/// Kolmogorov–Smirnov distance between the squared singular values of `w`
/// and the MP law for entries of standard deviation `assumed_std`.
pub fn esd_vs_mp(w: &Matrix, assumed_std: f64) -> Result<EsdReport> {
    let (big, small) = (w.rows().max(w.cols()), w.rows().min(w.cols()));
    if big < ESD_MIN_ROWS || small < ESD_MIN_COLS {
        return Err(Error::InsufficientData(format!(
            "ESD comparison needs at least {ESD_MIN_ROWS}x{ESD_MIN_COLS}, got {}x{}",
            w.rows(),
            w.cols()
        )));
    }
    let p = MpParams::for_matrix(w.rows(), w.cols(), assumed_std)?;
    let (lo, hi) = mp_edges(&p);
    let mut ev: Vec<f64> = singular_values(w)?.iter().map(|s| s * s).collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    let n = ev.len() as f64;
    let mut ks: f64 = 0.0;
    for (i, &x) in ev.iter().enumerate() {
        let f = mp_cdf(x, &p);
        ks = ks.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    let empirical_max = *ev.last().expect("non-empty spectrum");
    let top = empirical_max.max(hi);
    let width = top / ESD_BINS as f64;
    let mut histogram: Vec<(f64, usize)> = (0..ESD_BINS).map(|b| (b as f64 * width, 0)).collect();
    for &x in &ev {
        let b = ((x / width) as usize).min(ESD_BINS - 1);
        histogram[b].1 += 1;
    }
    Ok(EsdReport {
        ks_distance: ks,
        lambda_minus: lo,
        lambda_plus: hi,
        empirical_max,
        histogram,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct InterpolationResult {
    pub ts: Vec<f64>,
    pub loss: Vec<f64>,
    pub accuracy: Vec<Option<f64>>,
}

impl InterpolationResult {
    /// Highest loss on the path minus the higher endpoint loss.
    pub fn barrier(&self) -> f64 {
        let peak = self.loss.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ends = self.loss.first().copied().unwrap_or(0.0).max(self.loss.last().copied().unwrap_or(0.0));
        peak - ends
    }
}

/// `steps` evenly spaced points on `[0, 1]`, endpoints included.
pub fn default_ts(steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..steps).map(|i| i as f64 / (steps - 1) as f64).collect(),
    }
}

/// Evaluates `θ(t) = (1 − t)·θ_b + t·θ_l` with both endpoints composed to
/// the unfactorized architecture.
pub fn interpolate(
    theta_b: &ParamSet,
    theta_l: &ParamSet,
    spec: &NetworkSpec,
    data: &Split,
    ts: &[f64],
) -> Result<InterpolationResult> {
    let full = spec.to_full_rank();
    let b = theta_b.composed()?;
    let l = theta_l.composed()?;
    for (name, shape) in full.param_shapes() {
        for (which, p) in [("θ_b", &b), ("θ_l", &l)] {
            match p.get(&name) {
                Some(m) if m.shape() == shape => {}
                Some(m) => {
                    return Err(Error::Shape(format!("{which} {name} is {:?}, model has {shape:?}", m.shape())))
                }
                None => return Err(Error::Shape(format!("{which} lacks {name}"))),
            }
        }
    }
    if b.len() != full.param_shapes().len() || l.len() != b.len() {
        return Err(Error::Shape("checkpoints carry tensors the model does not have".into()));
    }
    let mut out = InterpolationResult {
        ts: ts.to_vec(),
        loss: Vec::with_capacity(ts.len()),
        accuracy: Vec::with_capacity(ts.len()),
    };
    for &t in ts {
        let theta = if t == 0.0 {
            b.clone()
        } else if t == 1.0 {
            l.clone()
        } else {
            let mut m = ParamSet::new();
            for (name, vb) in b.iter() {
                let mut v = vb.scale(1.0 - t);
                v.add_scaled(t, l.require(name)?)?;
                m.insert(name, v);
            }
            m
        };
        let (loss, acc) = evaluate(&full, &theta, &data.inputs, &data.targets)?;
        out.loss.push(loss);
        out.accuracy.push(acc);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub layer: String,
    /// Rows of the weight matrix: `m` for dense, `h·w·c_in` for conv.
    pub m: usize,
    pub n: usize,
    pub rank: usize,
    /// Multiply-adds per sample (dense) or per output position (conv).
    pub full_flops: usize,
    pub fact_flops: usize,
    pub full_params: usize,
    pub fact_params: usize,
    /// Largest rank with `fact_flops ≤ full_flops`.
    pub breakeven_rank: usize,
    pub economical: bool,
    /// Weights plus bias, and factors plus bias plus the rank-`r` hidden activation.
    pub full_train_memory: usize,
    pub fact_train_memory: usize,
}

/// Cost of an `m × n` weight (conv: `m = h·w·c_in`, `n = c_out`) at rank `r`.
pub fn layer_cost(layer: impl Into<String>, m: usize, n: usize, r: usize) -> LayerCost {
    let full = m * n;
    let fact = r * (m + n);
    LayerCost {
        layer: layer.into(),
        m,
        n,
        rank: r,
        full_flops: full,
        fact_flops: fact,
        full_params: full,
        fact_params: fact,
        breakeven_rank: breakeven_rank(m, n),
        economical: fact < full,
        full_train_memory: full + n,
        fact_train_memory: fact + n + r,
    }
}

/// `floor(mn / (m + n))`
pub fn breakeven_rank(m: usize, n: usize) -> usize {
    m * n / (m + n)
}

#[derive(Clone, Debug, Serialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub total_full_params: usize,
    pub total_fact_params: usize,
}

/// Costs of every factorized layer of `spec` against its unfactorized form.
pub fn cost_model(spec: &NetworkSpec) -> CostReport {
    let layers: Vec<LayerCost> = spec
        .layers()
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match (*l, l.weight_shape()) {
            (LayerSpec::FactorizedDense { rank, .. } | LayerSpec::FactorizedConv { rank, .. }, Some((m, n))) => {
                Some(layer_cost(layer_name(i), m, n, rank))
            }
            _ => None,
        })
        .collect();
    CostReport {
        total_full_params: spec.to_full_rank().param_count(),
        total_fact_params: spec.param_count(),
        layers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_matrix, Rng};

    fn s(x: f64) -> Matrix {
        Matrix::from_rows(&[[x]]).unwrap()
    }

    #[test]
    fn scalar_update_identity() {
        let (u, v, g) = (s(1.0), s(1.0), s(1.0));
        // A = (1 − 0.1)² = 0.81, B = 1 − 0.2 + 0.01
        assert!(update_identity_check(&u, &v, &g, 0.1).unwrap() < 1e-15);
        assert_eq!(update_identity_check(&u, &v, &s(0.0), 0.3).unwrap(), 0.0);
        assert!(matches!(
            update_identity_check(&u, &Matrix::zeros(2, 2), &g, 0.1),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn normalized_residual_is_quadratic() {
        let mut rng = Rng::new(11);
        let u = gaussian_matrix(&mut rng, 6, 2, 1.0).unwrap();
        let v = gaussian_matrix(&mut rng, 4, 2, 1.0).unwrap();
        let g = gaussian_matrix(&mut rng, 6, 4, 1.0).unwrap();
        let r = normalized_update_check(&u, &v, &g, &[1e-2, 5e-3, 2.5e-3]).unwrap();
        for q in &r.ratios {
            assert!((3.5..=4.5).contains(q), "{:?}", r.ratios);
        }
        assert!(normalized_update_check(&u, &v, &g, &[1e-2, 1e-2]).is_err());
    }

    #[test]
    fn radial_gradient_predicts_no_turn() {
        let w = gaussian_matrix(&mut Rng::new(2), 3, 3, 1.0).unwrap();
        let p = normalized_direction_prediction(&w, &w.scale(7.0), 0.1).unwrap();
        assert!(p.max_abs() < 1e-15);
        assert!(matches!(
            normalized_direction_prediction(&Matrix::zeros(2, 2), &w, 0.1),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn kendall_cases() {
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), 0.0);
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 4.0, 9.0]), 1.0);
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
        // one discordant pair of three: (2 − 1) / 3
        assert!((kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]) - 1.0 / 3.0).abs() < 1e-15);
    }

    fn ckpt(step: u64, w: Matrix) -> Checkpoint {
        let mut p = ParamSet::new();
        p.insert("l0.w", w);
        Checkpoint::new(step, [0; 32], p)
    }

    #[test]
    fn trajectories() {
        let w = Matrix::from_diag(&[3.0, 1.0]);
        let flat = sv_trajectory(&[ckpt(0, w.clone()), ckpt(1, w.clone()), ckpt(2, w.clone())], "l0").unwrap();
        assert_eq!(flat.tau, 0.0);
        assert_eq!(flat.top1_share, vec![0.75; 3]);
        let scaled = sv_trajectory(&[ckpt(0, w.clone()), ckpt(5, w.scale(2.0)), ckpt(9, w.scale(8.0))], "l0").unwrap();
        assert!(scaled.effective_rank.iter().all(|&e| (e - 4.0 / 3.0).abs() < 1e-12));
        assert!(matches!(sv_trajectory(&[ckpt(0, w.clone())], "l0"), Err(Error::InsufficientData(_))));
        assert!(matches!(sv_trajectory(&[ckpt(0, w.clone()), ckpt(1, w)], "l3"), Err(Error::Key(_))));
    }

    #[test]
    fn effective_rank_reports() {
        let mut p = ParamSet::new();
        p.insert("l0.w", Matrix::identity(4));
        p.insert("l1.u", Matrix::from_rows(&[[1.0], [2.0]]).unwrap());
        p.insert("l1.v", Matrix::from_rows(&[[1.0], [0.0], [1.0]]).unwrap());
        let all = effective_rank_report(&p, LayerFilter::All).unwrap();
        assert_eq!(all.layers[0], ("l0".into(), 4.0));
        assert!((all.layers[1].1 - 1.0).abs() < 1e-12);
        let fact = effective_rank_report(&p, LayerFilter::Factorized).unwrap();
        assert_eq!(fact.layers.len(), 1);
        p.remove("l1.u");
        p.remove("l1.v");
        assert!(matches!(effective_rank_report(&p, LayerFilter::Factorized), Err(Error::Degenerate(_))));
    }

    #[test]
    fn esd_rejects_small_and_flags_identity() {
        assert!(matches!(
            esd_vs_mp(&Matrix::zeros(100, 100), 1.0),
            Err(Error::InsufficientData(_))
        ));
        let w = Matrix::from_fn(400, 200, |i, j| if i == j { 1.0 } else { 0.0 });
        let r = esd_vs_mp(&w, 1e-3).unwrap();
        assert!(r.ks_distance > 0.99, "{}", r.ks_distance);
        assert_eq!(r.histogram.iter().map(|b| b.1).sum::<usize>(), 200);
        let wide = esd_vs_mp(&w, 2e-3).unwrap();
        assert!((wide.lambda_plus / r.lambda_plus - 4.0).abs() < 1e-12);
    }

    #[test]
    fn cost_examples() {
        let c = layer_cost("l0", 1024, 1024, 128);
        assert_eq!((c.fact_flops, c.full_flops, c.breakeven_rank), (262_144, 1_048_576, 512));
        assert!(!layer_cost("l0", 1024, 1024, 513).economical);
        assert!(layer_cost("l0", 1024, 1024, 511).economical);
        assert_eq!(breakeven_rank(64, 64), 32);
        // conv 3x3, 16 -> 32 channels: K = 144
        let k = layer_cost("l1", 144, 32, 8);
        assert_eq!(k.fact_flops, 144 * 8 + 8 * 32);
    }

    #[test]
    fn default_grid() {
        let ts = default_ts(11);
        assert_eq!(ts[0], 0.0);
        assert_eq!(ts[10], 1.0);
        assert!((ts[3] - 0.3).abs() < 1e-15);
    }
}
