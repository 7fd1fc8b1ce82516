//! Self-checks behind the `verify` command: algebraic identities and oracle
//! comparisons that must hold for any correct build.

use std::time::Instant;

use serde::Serialize;

use crate::analytics::{breakeven_rank, layer_cost, normalized_update_check, update_identity_check};
use crate::error::Result;
use crate::linalg::{effective_rank, gaussian_matrix, mp_edges, singular_values, MpParams, Rng};
use crate::net::{backward, forward, ConvSpec, LayerSpec, NetworkSpec, Padding, ParamSet, Shape, Targets};
use crate::schemes::{init_params, spectral_init, spectral_ones_init, InitScheme, RegKind, RegPenalty};
use crate::trainer::penalty_gradients;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub id: u32,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn timed(id: u32, name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let t = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckResult {
        id,
        name,
        passed,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    }
}

/// Runs every check with the given seed.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    vec![
        timed(1, "update-equation identity", || update_identity(seed)),
        timed(2, "normalized update O(α²)", || normalized_update(seed)),
        timed(3, "gradients vs finite differences", || gradient_oracle(seed)),
        timed(4, "spectral init", || spectral(seed)),
        timed(5, "spectral-ones init", || spectral_ones(seed)),
        timed(8, "Marchenko-Pastur law", || marchenko_pastur(seed)),
        timed(11, "cost model", || cost(seed)),
    ]
}

fn dims(rng: &mut Rng, max: usize) -> (usize, usize, usize) {
    let m = 1 + rng.below(max);
    let n = 1 + rng.below(max);
    let r = 1 + rng.below((m.min(n) / 2).max(1));
    (m, n, r)
}

/// 100 instances with `m, n ≤ 16`, `r ≤ min(m, n)/2`; error relative to `max |W|`.
pub fn update_identity(seed: u64) -> Result<(bool, String)> {
    let mut rng = Rng::new(seed).fork(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (m, n, r) = dims(&mut rng, 16);
        let u = gaussian_matrix(&mut rng, m, r, 1.0)?;
        let v = gaussian_matrix(&mut rng, n, r, 1.0)?;
        let g = gaussian_matrix(&mut rng, m, n, 1.0)?;
        let alpha = 10f64.powf(-3.0 + 2.0 * rng.uniform());
        let scale = u.matmul_t(&v)?.max_abs().max(f64::MIN_POSITIVE);
        worst = worst.max(update_identity_check(&u, &v, &g, alpha)? / scale);
    }
    Ok((worst <= 1e-12, format!("max |A-B| / max|W| = {worst:.2e} (limit 1e-12)")))
}

/// 20 instances; every consecutive residual ratio for α = 1e-2, 5e-3, 2.5e-3 in [3.5, 4.5].
pub fn normalized_update(seed: u64) -> Result<(bool, String)> {
    let mut rng = Rng::new(seed).fork(2);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..20 {
        let (m, n, r) = loop {
            let d = dims(&mut rng, 8);
            if d.0 * d.1 > 1 {
                break d;
            }
        };
        let u = gaussian_matrix(&mut rng, m, r, 1.0)?;
        let v = gaussian_matrix(&mut rng, n, r, 1.0)?;
        let g = gaussian_matrix(&mut rng, m, n, 1.0)?;
        let rep = normalized_update_check(&u, &v, &g, &[1e-2, 5e-3, 2.5e-3])?;
        for q in rep.ratios {
            lo = lo.min(q);
            hi = hi.max(q);
        }
    }
    Ok((
        lo >= 3.5 && hi <= 4.5,
        format!("residual ratios in [{lo:.3}, {hi:.3}] (need [3.5, 4.5])"),
    ))
}

/// Reference networks for the gradient oracle: an MLP with two factorized
/// layers and a CNN with one factorized conv.
pub fn reference_networks() -> Vec<(&'static str, NetworkSpec, RegPenalty)> {
    let mlp = NetworkSpec::new(
        Shape::Flat { features: 5 },
        vec![
            LayerSpec::FactorizedDense { inputs: 5, outputs: 6, rank: 3, bias: true },
            LayerSpec::Relu,
            LayerSpec::FactorizedDense { inputs: 6, outputs: 4, rank: 2, bias: true },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 4, outputs: 3, bias: true },
            LayerSpec::SoftmaxCrossEntropy,
        ],
    )
    .expect("valid reference MLP");
    let conv = |cin, cout, padding| ConvSpec {
        kernel_h: 3,
        kernel_w: 3,
        in_channels: cin,
        out_channels: cout,
        padding,
        bias: true,
    };
    let cnn = NetworkSpec::new(
        Shape::Image { height: 5, width: 5, channels: 2 },
        vec![
            LayerSpec::Conv(conv(2, 3, Padding::Same)),
            LayerSpec::Relu,
            LayerSpec::FactorizedConv { conv: conv(3, 4, Padding::Valid), rank: 2 },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 36, outputs: 2, bias: true },
            LayerSpec::Mse,
        ],
    )
    .expect("valid reference CNN");
    vec![
        ("mlp", mlp, RegPenalty { kind: RegKind::FrobeniusDecay, lambda: 0.1 }),
        ("cnn", cnn, RegPenalty { kind: RegKind::L2Factors, lambda: 0.1 }),
    ]
}

/// Worst relative error `|a − n| / max(|a|, |n|, 1e-4)` between backprop
/// (plus penalty) gradients and central differences with `ε = 1e-5`.
pub fn gradient_error(spec: &NetworkSpec, reg: &RegPenalty, seed: u64) -> Result<(f64, String)> {
    const EPS: f64 = 1e-5;
    let mut rng = Rng::new(seed);
    let mut params = init_params(spec, InitScheme::He, seed)?;
    for (_, m) in params.iter_mut() {
        for x in m.as_mut_slice() {
            *x += 0.1 * rng.standard_normal();
        }
    }
    let batch = 3;
    let x = gaussian_matrix(&mut rng, batch, spec.input().size(), 1.0)?;
    let t = match spec.head() {
        LayerSpec::SoftmaxCrossEntropy => Targets::Classes((0..batch).map(|_| rng.below(spec.output_size())).collect()),
        _ => Targets::Values(gaussian_matrix(&mut rng, batch, spec.output_size(), 1.0)?),
    };
    let none = RegPenalty::none();
    let total = |p: &ParamSet| -> Result<f64> {
        let (l, _) = forward(spec, p, &x, &t)?;
        Ok(l + penalty_gradients(spec, p, reg, &none)?.0)
    };
    let (_, cache) = forward(spec, &params, &x, &t)?;
    let mut grads = backward(spec, &params, &cache)?;
    let (_, extra) = penalty_gradients(spec, &params, reg, &none)?;
    for (name, g) in extra.iter() {
        grads.get_mut(name).expect("penalty on a parameter").add_scaled(1.0, g)?;
    }
    let mut worst = (0.0, String::new());
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let len = params.require(&name)?.len();
        for k in 0..len {
            let orig = params.require(&name)?.as_slice()[k];
            params.get_mut(&name).unwrap().as_mut_slice()[k] = orig + EPS;
            let up = total(&params)?;
            params.get_mut(&name).unwrap().as_mut_slice()[k] = orig - EPS;
            let down = total(&params)?;
            params.get_mut(&name).unwrap().as_mut_slice()[k] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            let analytic = grads.require(&name)?.as_slice()[k];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{k}]"));
            }
        }
    }
    Ok(worst)
}

pub fn gradient_oracle(seed: u64) -> Result<(bool, String)> {
    let mut parts = Vec::new();
    let mut ok = true;
    for (label, spec, reg) in reference_networks() {
        let (err, at) = gradient_error(&spec, &reg, seed)?;
        ok &= err < 1e-6;
        parts.push(format!("{label} {err:.2e} at {at}"));
    }
    Ok((ok, format!("worst relative error: {} (limit 1e-6)", parts.join(", "))))
}

pub fn spectral(seed: u64) -> Result<(bool, String)> {
    let mut rng = Rng::new(seed).fork(4);
    let w = gaussian_matrix(&mut rng, 12, 8, 1.0)?;
    let full = spectral_init(&w, 8)?;
    let recon = full.compose().sub(&w)?.frobenius() / w.frobenius();
    let sigma = singular_values(&w)?;
    let mut tail_err: f64 = 0.0;
    let mut balance: f64 = 0.0;
    for r in 1..=8 {
        let p = spectral_init(&w, r)?;
        let resid = w.sub(&p.compose())?.frobenius();
        let tail = sigma[r..].iter().map(|s| s * s).sum::<f64>().sqrt();
        tail_err = tail_err.max((resid - tail).abs());
        let (nu, nv) = (p.u.frobenius(), p.v.frobenius());
        balance = balance.max((nu - nv).abs() / nu);
    }
    Ok((
        recon <= 1e-10 && tail_err <= 1e-9 && balance <= 1e-12,
        format!("full-rank rel. error {recon:.2e}; tail residual error {tail_err:.2e}; ‖U‖/‖V‖ imbalance {balance:.2e}"),
    ))
}

pub fn spectral_ones(seed: u64) -> Result<(bool, String)> {
    let mut rng = Rng::new(seed).fork(5);
    let mut sv_err: f64 = 0.0;
    let mut er_err: f64 = 0.0;
    for (m, n) in [(12, 8), (7, 9), (16, 16)] {
        let w = gaussian_matrix(&mut rng, m, n, 1.0)?;
        for r in 1..=m.min(n) {
            let c = spectral_ones_init(&w, r)?.compose();
            let s = singular_values(&c)?;
            for (i, &x) in s.iter().enumerate() {
                sv_err = sv_err.max((x - if i < r { 1.0 } else { 0.0 }).abs());
            }
            er_err = er_err.max((effective_rank(&c)? - r as f64).abs());
        }
    }
    Ok((
        sv_err <= 1e-9 && er_err <= 1e-9,
        format!("max |σ - 1| {sv_err:.2e}; max |eff. rank - r| {er_err:.2e}"),
    ))
}

pub fn marchenko_pastur(seed: u64) -> Result<(bool, String)> {
    let (n_rows, n_cols) = (1000usize, 500usize);
    let std = 1.0 / (n_rows as f64).sqrt();
    let w = gaussian_matrix(&mut Rng::new(seed).fork(8), n_rows, n_cols, std)?;
    let rep = crate::analytics::esd_vs_mp(&w, std)?;
    // σ² = std² · N = 1, M/N = 1/2
    let q: f64 = 0.5;
    let (lo, hi) = ((1.0 - q.sqrt()).powi(2), (1.0 + q.sqrt()).powi(2));
    let (a, b) = mp_edges(&MpParams::for_matrix(n_rows, n_cols, std)?);
    let edge_err = (a - lo).abs().max((b - hi).abs());
    Ok((
        rep.ks_distance < 0.05 && edge_err <= 1e-12,
        format!("KS {:.4} (limit 0.05); edge error {edge_err:.1e}", rep.ks_distance),
    ))
}

pub fn cost(seed: u64) -> Result<(bool, String)> {
    let mut rng = Rng::new(seed).fork(11);
    let mut bad = 0;
    for _ in 0..1000 {
        let m = 1 + rng.below(4096);
        let n = 1 + rng.below(4096);
        let b = breakeven_rank(m, n);
        let full = m * n;
        if !(b * (m + n) <= full && full < (b + 1) * (m + n)) {
            bad += 1;
        }
    }
    let c = layer_cost("dense", 1024, 1024, 128);
    let ratio = c.full_flops as f64 / c.fact_flops as f64;
    Ok((
        bad == 0 && ratio == 4.0 && c.breakeven_rank == 512,
        format!("{bad} breakeven violations in 1000 shapes; 1024x1024 r=128 reduction {ratio}x"),
    ))
}
