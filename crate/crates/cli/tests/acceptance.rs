//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Runs without the libtest harness so the lines always reach the console.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use lrlab_core::analytics::{
    breakeven_rank, default_ts, effective_rank_report, esd_vs_mp, interpolate, layer_cost, normalized_update_check,
    update_identity_check, LayerFilter,
};
use lrlab_core::data::synthetic_blobs;
use lrlab_core::linalg::{gaussian_matrix, singular_values, Matrix, Rng};
use lrlab_core::net::{backward, evaluate, forward, LayerSpec, NetworkSpec, Shape, Targets};
use lrlab_core::schemes::{he_init, init_params, spectral_init, spectral_ones_init};
use lrlab_core::trainer::{penalty_gradients, pretrain_switch, train, MemorySink, RunSummary};
use lrlab_core::verify::reference_networks;
use lrlab_core::{
    Cadence, Checkpoint, Dataset, InitScheme, ParamSet, RegKind, RegPenalty, RunOptions, SwitchPolicy, TrainConfig,
};

const SEEDS: u64 = 5;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

// Random orthonormal columns by Gram–Schmidt on a Gaussian draw.
fn orthonormal(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    let mut q = gaussian_matrix(rng, rows, cols, 1.0).unwrap();
    for j in 0..cols {
        let mut c = q.column(j);
        for _ in 0..2 {
            for p in 0..j {
                let b = q.column(p);
                let d: f64 = c.iter().zip(&b).map(|(x, y)| x * y).sum();
                c.iter_mut().zip(&b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let n = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        c.iter_mut().for_each(|x| *x /= n);
        q.set_column(j, &c);
    }
    q
}

fn c1_update_identity() -> Outcome {
    let mut rng = Rng::new(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let m = 2 + rng.below(15);
        let n = 2 + rng.below(15);
        let r = 1 + rng.below(m.min(n) / 2);
        let u = gaussian_matrix(&mut rng, m, r, 1.0).unwrap();
        let v = gaussian_matrix(&mut rng, n, r, 1.0).unwrap();
        let g = gaussian_matrix(&mut rng, m, n, 1.0).unwrap();
        let alpha = 10f64.powf(-1.0 - 2.0 * rng.uniform());
        let w_max = u.matmul_t(&v).unwrap().max_abs();
        worst = worst.max(update_identity_check(&u, &v, &g, alpha).unwrap() / w_max);
    }
    outcome(worst <= 1e-12, format!("max residual / max|W| = {worst:.2e} over 100 instances (limit 1e-12)"))
}

fn c2_normalized_update() -> Outcome {
    let mut rng = Rng::new(2);
    let alphas = [1e-2, 5e-3, 2.5e-3];
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..20 {
        let m = 3 + rng.below(8);
        let n = 3 + rng.below(8);
        let r = 1 + rng.below(m.min(n) / 2);
        let u = gaussian_matrix(&mut rng, m, r, 1.0).unwrap();
        let v = gaussian_matrix(&mut rng, n, r, 1.0).unwrap();
        let g = gaussian_matrix(&mut rng, m, n, 1.0).unwrap();
        for q in normalized_update_check(&u, &v, &g, &alphas).unwrap().ratios {
            lo = lo.min(q);
            hi = hi.max(q);
        }
    }
    outcome(3.5 <= lo && hi <= 4.5, format!("r(a)/r(a/2) in [{lo:.4}, {hi:.4}] over 20 instances (band [3.5, 4.5])"))
}

fn c3_gradients() -> Outcome {
    const H: f64 = 1e-5;
    let mut worst = 0.0f64;
    let mut names = Vec::new();
    for (seed, (name, spec, reg)) in reference_networks().into_iter().enumerate() {
        names.push(name);
        let mut rng = Rng::new(30 + seed as u64);
        let mut params = init_params(&spec, InitScheme::Spectral, seed as u64).unwrap();
        for (_, m) in params.iter_mut() {
            m.as_mut_slice().iter_mut().for_each(|x| *x += 0.1 * rng.standard_normal());
        }
        let x = gaussian_matrix(&mut rng, 3, spec.input().size(), 1.0).unwrap();
        let t = match spec.head() {
            LayerSpec::SoftmaxCrossEntropy => Targets::Classes((0..3).map(|_| rng.below(spec.output_size())).collect()),
            _ => Targets::Values(gaussian_matrix(&mut rng, 3, spec.output_size(), 1.0).unwrap()),
        };
        let none = RegPenalty::none();
        let objective =
            |p: &ParamSet| forward(&spec, p, &x, &t).unwrap().0 + penalty_gradients(&spec, p, &reg, &none).unwrap().0;
        let (_, cache) = forward(&spec, &params, &x, &t).unwrap();
        let mut grads = backward(&spec, &params, &cache).unwrap();
        for (k, e) in penalty_gradients(&spec, &params, &reg, &none).unwrap().1.iter() {
            grads.get_mut(k).unwrap().add_scaled(1.0, e).unwrap();
        }
        let keys: Vec<String> = params.names().map(str::to_string).collect();
        for key in keys {
            for i in 0..params.get(&key).unwrap().len() {
                let orig = params.get(&key).unwrap().as_slice()[i];
                params.get_mut(&key).unwrap().as_mut_slice()[i] = orig + H;
                let up = objective(&params);
                params.get_mut(&key).unwrap().as_mut_slice()[i] = orig - H;
                let down = objective(&params);
                params.get_mut(&key).unwrap().as_mut_slice()[i] = orig;
                let numeric = (up - down) / (2.0 * H);
                let analytic = grads.get(&key).unwrap().as_slice()[i];
                worst = worst.max((numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-4));
            }
        }
    }
    outcome(worst < 1e-6, format!("max relative error {worst:.2e} on {} (limit 1e-6)", names.join(" + ")))
}

fn c4_spectral() -> Outcome {
    let mut rng = Rng::new(4);
    // W0 = P diag(s) Qᵀ with known singular values.
    let (m, n) = (14, 9);
    let s: Vec<f64> = (0..n).map(|i| 3.0 * 0.7f64.powi(i as i32)).collect();
    let p = orthonormal(&mut rng, m, n);
    let q = orthonormal(&mut rng, n, n);
    let w0 = Matrix::from_fn(m, n, |i, j| s[j] * p[(i, j)]).matmul_t(&q).unwrap();
    let full = spectral_init(&w0, n).unwrap();
    let recon = full.compose().sub(&w0).unwrap().frobenius() / w0.frobenius();
    let mut trunc_err = 0.0f64;
    let mut balance = 0.0f64;
    for r in 1..=n {
        let f = spectral_init(&w0, r).unwrap();
        let resid = w0.sub(&f.compose()).unwrap().frobenius();
        let tail = s[r..].iter().map(|x| x * x).sum::<f64>().sqrt();
        trunc_err = trunc_err.max((resid - tail).abs());
        let (nu, nv) = (f.u.frobenius(), f.v.frobenius());
        balance = balance.max((nu - nv).abs() / nu);
    }
    // He draws of the desk shapes as well.
    for &(rows, cols, r) in &[(32, 128, 32), (128, 128, 32), (128, 10, 3)] {
        let w = he_init(&mut rng, rows, cols, rows).unwrap();
        let f = spectral_init(&w, r).unwrap();
        balance = balance.max((f.u.frobenius() - f.v.frobenius()).abs() / f.u.frobenius());
    }
    outcome(
        recon <= 1e-10 && trunc_err <= 1e-9 && balance <= 1e-12,
        format!(
            "full-rank reconstruction {recon:.1e} (limit 1e-10), truncation residual error {trunc_err:.1e} (limit 1e-9), \
             | ‖U‖-‖V‖ |/‖U‖ {balance:.1e} (limit 1e-12)"
        ),
    )
}

fn c5_spectral_ones() -> Outcome {
    let mut rng = Rng::new(5);
    let (mut worst_sv, mut worst_er) = (0.0f64, 0.0f64);
    for &(m, n, r) in &[(32, 128, 8), (128, 128, 32), (20, 12, 5), (9, 9, 9)] {
        let w0 = he_init(&mut rng, m, n, m).unwrap();
        let f = spectral_ones_init(&w0, r).unwrap();
        let sv = singular_values(&f.compose()).unwrap();
        worst_sv = worst_sv.max(sv[..r].iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max));
        let mut p = ParamSet::new();
        p.insert("l0.u", f.u.clone());
        p.insert("l0.v", f.v.clone());
        let er = effective_rank_report(&p, LayerFilter::All).unwrap().mean;
        worst_er = worst_er.max((er - r as f64).abs());
    }
    outcome(
        worst_sv <= 1e-9 && worst_er <= 1e-9,
        format!("max |σ - 1| {worst_sv:.1e}, max |effective rank - r| {worst_er:.1e} (limits 1e-9)"),
    )
}

fn c8_marchenko_pastur() -> Outcome {
    let w = gaussian_matrix(&mut Rng::new(8), 1000, 500, 1.0 / 1000f64.sqrt()).unwrap();
    let r = esd_vs_mp(&w, 1.0 / 1000f64.sqrt()).unwrap();
    let (lm, lp) = ((1.0 - 0.5f64.sqrt()).powi(2), (1.0 + 0.5f64.sqrt()).powi(2));
    let edge = (r.lambda_minus - lm).abs().max((r.lambda_plus - lp).abs());
    outcome(
        r.ks_distance < 0.05 && edge <= 1e-12,
        format!("KS {:.4} (limit 0.05), edge error {edge:.1e} (limit 1e-12)", r.ks_distance),
    )
}

fn c11_cost() -> Outcome {
    let mut rng = Rng::new(11);
    let mut bad = 0;
    for _ in 0..1000 {
        let (m, n) = (1 + rng.below(4096), 1 + rng.below(4096));
        let r = breakeven_rank(m, n);
        let (at, above) = (layer_cost("x", m, n, r), layer_cost("x", m, n, r + 1));
        if !(at.fact_flops <= at.full_flops && above.full_flops < above.fact_flops) {
            bad += 1;
        }
    }
    let c = layer_cost("x", 1024, 1024, 128);
    let ratio = c.full_flops as f64 / c.fact_flops as f64;
    outcome(
        bad == 0 && ratio == 4.0 && c.breakeven_rank == 512,
        format!(
            "{bad} of 1000 shapes violate the breakeven bracket; 1024x1024 r=128: {} vs {} flops ({ratio:.2}x), breakeven {}",
            c.fact_flops, c.full_flops, c.breakeven_rank
        ),
    )
}

// Desk task: 10-class Gaussian blobs in 32 dimensions, MLP with three hidden layers of 128.
fn desk_spec() -> NetworkSpec {
    let mut layers = Vec::new();
    let mut inputs = 32;
    for _ in 0..3 {
        layers.push(LayerSpec::Dense { inputs, outputs: 128, bias: true });
        layers.push(LayerSpec::Relu);
        inputs = 128;
    }
    layers.push(LayerSpec::Dense { inputs, outputs: 10, bias: true });
    layers.push(LayerSpec::SoftmaxCrossEntropy);
    NetworkSpec::new(Shape::Flat { features: 32 }, layers).unwrap()
}

fn desk_data(seed: u64) -> Dataset {
    synthetic_blobs(10, 32, 8000, 500, 2.0, 100 + seed).unwrap()
}

fn desk_config(seed: u64, steps: u64, reg: RegKind) -> TrainConfig {
    TrainConfig {
        lr: 0.01,
        momentum: 0.9,
        steps,
        batch_size: 32,
        seed,
        rank_fraction: 0.25,
        init: InitScheme::Spectral,
        reg: RegPenalty::new(reg, 1e-2).unwrap(),
        baseline_reg: RegPenalty::new(RegKind::WeightDecay, 1e-2).unwrap(),
        ..TrainConfig::default()
    }
}

fn opts(eval_every: u64) -> RunOptions {
    RunOptions { cadence: Cadence { eval_every, ..Cadence::default() }, ..RunOptions::default() }
}

fn factorized_rank(r: &RunSummary) -> f64 {
    effective_rank_report(&r.params, LayerFilter::Factorized).unwrap().mean
}

struct RegRuns {
    fd: Vec<RunSummary>,
    l2: Vec<RunSummary>,
    fd_half: Vec<RunSummary>,
}

fn reg_runs() -> RegRuns {
    let spec = desk_spec();
    let mut out = RegRuns { fd: Vec::new(), l2: Vec::new(), fd_half: Vec::new() };
    for seed in 0..SEEDS {
        let data = desk_data(seed);
        let run = |c: TrainConfig| train(&spec, &c, &data, &opts(1000), &mut MemorySink::default()).unwrap();
        out.fd.push(run(desk_config(seed, 2000, RegKind::FrobeniusDecay)));
        out.l2.push(run(desk_config(seed, 2000, RegKind::L2Factors)));
        out.fd_half.push(run(TrainConfig { lr_scale: 0.5, ..desk_config(seed, 2000, RegKind::FrobeniusDecay) }));
    }
    out
}

fn c6_fd_vs_l2(runs: &RegRuns) -> Outcome {
    let fd: Vec<f64> = runs.fd.iter().map(factorized_rank).collect();
    let l2: Vec<f64> = runs.l2.iter().map(factorized_rank).collect();
    let (mf, ml) = (median(fd.clone()), median(l2.clone()));
    outcome(
        mf > ml,
        format!("median mean effective rank: Frobenius decay {mf:.3} {} vs L2 {ml:.3} {}", fmt(&fd), fmt(&l2)),
    )
}

fn c7_half_step(runs: &RegRuns) -> Outcome {
    let full: Vec<f64> = runs.fd.iter().map(|r| r.eval_loss).collect();
    let half: Vec<f64> = runs.fd_half.iter().map(|r| r.eval_loss).collect();
    let (mf, mh) = (median(full.clone()), median(half.clone()));
    outcome(
        mh <= 1.05 * mf,
        format!("median final eval loss: lr_scale 0.5 {mh:.4} {} vs lr_scale 1.0 {mf:.4} {} (limit 1.05x)", fmt(&half), fmt(&full)),
    )
}

const SWITCH_STEPS: u64 = 2100;
const T0: u64 = SWITCH_STEPS / 6;
const WINDOW: u64 = 50;

struct SwitchRuns {
    baseline: Vec<RunSummary>,
    scratch: Vec<RunSummary>,
    switched: Vec<RunSummary>,
    post_windows: Vec<Vec<f64>>,
    data: Vec<Dataset>,
}

fn switch_policy() -> SwitchPolicy {
    SwitchPolicy { pretrain_steps: T0, resume_init: InitScheme::Spectral, lr_multiplier_after_switch: 0.5 }
}

fn switch_runs() -> SwitchRuns {
    let spec = desk_spec();
    let mut out =
        SwitchRuns { baseline: Vec::new(), scratch: Vec::new(), switched: Vec::new(), post_windows: Vec::new(), data: Vec::new() };
    for seed in 0..SEEDS {
        let data = desk_data(seed);
        let cfg = desk_config(seed, SWITCH_STEPS, RegKind::FrobeniusDecay);
        let o = opts(WINDOW);
        out.baseline.push(train(&spec, &TrainConfig { low_rank: false, ..cfg.clone() }, &data, &o, &mut MemorySink::default()).unwrap());
        out.scratch.push(train(&spec, &cfg, &data, &o, &mut MemorySink::default()).unwrap());
        let mut sink = MemorySink::default();
        out.switched.push(pretrain_switch(&spec, &cfg, &switch_policy(), &data, &o, &mut sink).unwrap());
        // Mean training loss over each 50-step window in the 200 steps after the switch.
        out.post_windows.push(
            sink.metrics
                .iter()
                .filter(|m| m.step > T0 && m.step <= T0 + 200)
                .map(|m| m.loss.expect("window loss"))
                .collect(),
        );
        out.data.push(data);
    }
    out
}

fn c9_pretrain_switch(runs: &SwitchRuns) -> Outcome {
    let spec = desk_spec();
    let mut worst_rel = 0.0f64;
    for seed in 0..SEEDS {
        let data = desk_data(seed);
        let cfg = TrainConfig { rank_fraction: 1.0, ..desk_config(seed, T0 + 50, RegKind::FrobeniusDecay) };
        let r = pretrain_switch(&spec, &cfg, &switch_policy(), &data, &opts(WINDOW), &mut MemorySink::default()).unwrap();
        let s = r.switch.unwrap();
        worst_rel = worst_rel.max((s.post_eval_loss - s.pre_eval_loss).abs() / s.pre_eval_loss.abs());
    }
    let monotone = runs
        .post_windows
        .iter()
        .filter(|w| w.len() == 4 && w.windows(2).all(|p| p[1] <= p[0]))
        .count();
    let acc = |v: &[RunSummary]| v.iter().map(|r| r.eval_acc.unwrap()).collect::<Vec<_>>();
    let (sw, sc) = (acc(&runs.switched), acc(&runs.scratch));
    let (msw, msc) = (median(sw.clone()), median(sc.clone()));
    let windows: Vec<String> = runs.post_windows.iter().map(|w| fmt(w)).collect();
    outcome(
        worst_rel <= 1e-8 && monotone == SEEDS as usize && msw >= msc - 0.01,
        format!(
            "full-rank switch loss change {worst_rel:.1e} (limit 1e-8); post-switch 50-step loss non-increasing in {monotone}/{SEEDS} seeds {}; \
             median accuracy switch {msw:.4} {} vs scratch {msc:.4} {} (limit scratch - 0.01)",
            windows.join(" "),
            fmt(&sw),
            fmt(&sc)
        ),
    )
}

fn c10_interpolation(runs: &SwitchRuns) -> Outcome {
    let full = desk_spec();
    let ts = default_ts(11);
    let mut exact = true;
    let (mut b_scratch, mut b_switch) = (Vec::new(), Vec::new());
    for i in 0..SEEDS as usize {
        let data = &runs.data[i];
        let base = &runs.baseline[i];
        for (theta_l, barriers) in [(&runs.scratch[i], &mut b_scratch), (&runs.switched[i], &mut b_switch)] {
            let r = interpolate(&base.params, &theta_l.params, &theta_l.spec, &data.eval, &ts).unwrap();
            let composed = theta_l.params.composed().unwrap();
            let (ll, la) = evaluate(&full, &composed, &data.eval.inputs, &data.eval.targets).unwrap();
            exact &= r.loss[0].to_bits() == base.eval_loss.to_bits() && r.accuracy[0] == base.eval_acc;
            exact &= r.loss[10].to_bits() == ll.to_bits() && r.accuracy[10] == la;
            barriers.push(r.barrier());
        }
    }
    let (ms, mw) = (median(b_scratch.clone()), median(b_switch.clone()));
    outcome(
        exact && mw <= ms,
        format!(
            "endpoints bit-exact: {exact}; median barrier from the full-rank baseline: switch {mw:.4} {} vs scratch {ms:.4} {}",
            fmt(&b_switch),
            fmt(&b_scratch)
        ),
    )
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_lrlab")
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn c12_plumbing(runs: &SwitchRuns) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();

    let path = dir.path().join("final.ckpt");
    let ckpt = Checkpoint::new(SWITCH_STEPS, [3; 32], runs.switched[0].params.clone());
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let bitwise = back.step == ckpt.step
        && back.digest == ckpt.digest
        && back.params.len() == ckpt.params.len()
        && back.params.iter().zip(ckpt.params.iter()).all(|((na, a), (nb, b))| {
            na == nb && a.shape() == b.shape() && a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
        && back.encode() == std::fs::read(&path).unwrap();
    notes.push(format!("checkpoint round trip bitwise: {bitwise}"));

    let cfg = configs_dir().join("blobs_switch.json");
    let mut outputs = Vec::new();
    let mut runs_ok = true;
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let status = Command::new(bin())
            .args(["pretrain-switch", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        runs_ok &= status.status.success();
        outputs.push(std::fs::read(out.join("metrics.jsonl")).unwrap_or_default());
    }
    let identical = runs_ok && !outputs[0].is_empty() && outputs[0] == outputs[1];
    notes.push(format!("metrics.jsonl byte-identical across two runs: {identical}"));

    let t = Instant::now();
    let v = Command::new(bin()).args(["verify"]).output().unwrap();
    let secs = t.elapsed().as_secs_f64();
    let text = String::from_utf8_lossy(&v.stdout);
    let ids: Vec<&str> = text
        .lines()
        .filter(|l| l.contains("PASS"))
        .filter_map(|l| l.split_whitespace().next())
        .collect();
    let verify_ok = v.status.success() && secs < 120.0 && ids == ["1", "2", "3", "4", "5", "8", "11"];
    notes.push(format!("verify exit {:?}, checks passed {ids:?}, {secs:.1}s (limit 120s)", v.status.code()));

    outcome(bitwise && identical && verify_ok, notes.join("; "))
}

fn report(id: u32, name: &str, started: Instant, o: Outcome, failed: &mut u32) {
    let verdict = if o.passed { "PASS" } else { "FAIL" };
    if !o.passed {
        *failed += 1;
    }
    println!("criterion {id:>2} {verdict} {name} ({:.1}s): {}", started.elapsed().as_secs_f64(), o.detail);
}

fn main() {
    let mut failed = 0;
    macro_rules! criterion {
        ($id:expr, $name:expr, $body:expr) => {{
            let t = Instant::now();
            let o = $body;
            report($id, $name, t, o, &mut failed);
        }};
    }
    criterion!(1, "update-equation identity", c1_update_identity());
    criterion!(2, "normalized update", c2_normalized_update());
    criterion!(3, "gradient oracle", c3_gradients());
    criterion!(4, "spectral init", c4_spectral());
    criterion!(5, "spectral-ones init", c5_spectral_ones());

    let t = Instant::now();
    let reg = reg_runs();
    println!("(desk regularization runs: {:.1}s)", t.elapsed().as_secs_f64());
    criterion!(6, "Frobenius decay vs L2 effective rank", c6_fd_vs_l2(&reg));
    criterion!(7, "effective step size ablation", c7_half_step(&reg));

    criterion!(8, "Marchenko-Pastur law", c8_marchenko_pastur());

    let t = Instant::now();
    let sw = switch_runs();
    println!("(desk switch runs: {:.1}s)", t.elapsed().as_secs_f64());
    criterion!(9, "pretrain-switch", c9_pretrain_switch(&sw));
    criterion!(10, "interpolation", c10_interpolation(&sw));
    criterion!(11, "cost model", c11_cost());
    criterion!(12, "plumbing", c12_plumbing(&sw));

    if failed > 0 {
        println!("{failed} of 12 criteria failed");
        std::process::exit(1);
    }
    println!("all 12 criteria passed");
}
