use std::path::{Path, PathBuf};
use std::process::ExitCode;

use lrlab_core::analytics::{
    cost_model, default_ts, effective_rank_report, esd_vs_mp, interpolate as interpolate_path, layer_cost,
    sv_trajectory, LayerCost, LayerFilter,
};
use lrlab_core::io::config::hex;
use lrlab_core::linalg::gaussian_matrix;
use lrlab_core::trainer::{self, RunOptions, RunSummary};
use lrlab_core::{Checkpoint, Config, DatasetSpec, Error, Result, Rng};

use crate::sink::FileSink;
use crate::OutArg;

pub const OUT_ENV: &str = "LRLAB_OUT";
const DEFAULT_OUT: &str = "lrlab-out";

fn out_dir(arg: &OutArg, configured: Option<&Path>) -> PathBuf {
    arg.out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .or_else(|| configured.map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json(path: &Path, json: serde_json::Result<String>) -> Result<()> {
    let text = json.map_err(|e| Error::Format(e.to_string()))?;
    write_file(path, &(text + "\n"))
}

/// Loads a config, resolving relative IDX paths against the config's directory.
fn load_config(path: &Path) -> Result<Config> {
    let mut cfg = Config::load(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    if let DatasetSpec::IdxImages {
        images,
        labels,
        eval_images,
        eval_labels,
        ..
    } = &mut cfg.data
    {
        for p in [Some(images), Some(labels), eval_images.as_mut(), eval_labels.as_mut()].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
    Ok(cfg)
}

pub fn train(config: &Path, resume: Option<&Path>, out: &OutArg, switch: bool) -> Result<ExitCode> {
    let cfg = load_config(config)?;
    let policy = match (&cfg.switch, switch) {
        (Some(p), true) => Some(p.clone()),
        (None, true) => return Err(Error::Config(format!("{}: pretrain-switch needs a \"switch\" section", config.display()))),
        (Some(_), false) => {
            eprintln!("warning: train ignores the \"switch\" section; use pretrain-switch");
            None
        }
        (None, false) => None,
    };
    let data = cfg.data.load()?;
    let spec = cfg.network(&data)?;
    let eff = cfg.effective(&data);
    let digest = eff.digest();
    let dir = out_dir(out, cfg.output.dir.as_deref());
    ensure_dir(&dir)?;
    write_file(&dir.join("config.json"), &(eff.to_pretty_json() + "\n"))?;

    let resume = resume.map(Checkpoint::load).transpose()?;
    let mut sink = FileSink::create(&dir, resume.as_ref().map(|c| c.step))?;
    let opts = RunOptions {
        cadence: eff.output.cadence(),
        digest,
        resume,
    };
    let summary: RunSummary = match &policy {
        Some(p) => trainer::pretrain_switch(&spec, &eff.train, p, &data, &opts, &mut sink)?,
        None => trainer::train(&spec, &eff.train, &data, &opts, &mut sink)?,
    };
    let final_path = dir.join("final.ckpt");
    Checkpoint::new(summary.step, digest, summary.params).save(&final_path)?;

    if let Some(s) = &summary.switch {
        println!(
            "switch at step {}: eval loss {:.6} -> {:.6}",
            s.step, s.pre_eval_loss, s.post_eval_loss
        );
    }
    match summary.eval_acc {
        Some(acc) => println!("step {}  eval_loss {:.6}  eval_acc {:.4}", summary.step, summary.eval_loss, acc),
        None => println!("step {}  eval_loss {:.6}", summary.step, summary.eval_loss),
    }
    println!("config digest {}", hex(&digest));
    println!("outputs in {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

pub fn analyze_rank(ckpt: &Path, all_layers: bool, out: &OutArg) -> Result<ExitCode> {
    let c = Checkpoint::load(ckpt)?;
    let has_factors = c.params.names().any(|n| n.ends_with(".u"));
    let filter = if all_layers || !has_factors {
        LayerFilter::All
    } else {
        LayerFilter::Factorized
    };
    let report = effective_rank_report(&c.params, filter)?;
    println!("layer\teff_rank");
    for (name, er) in &report.layers {
        println!("{name}\t{er:.6}");
    }
    println!("mean\t{:.6}", report.mean);
    let dir = out_dir(out, None);
    ensure_dir(&dir)?;
    write_json(&dir.join("rank.json"), serde_json::to_string_pretty(&report))?;
    Ok(ExitCode::SUCCESS)
}

pub fn analyze_esd(
    ckpt: Option<&Path>,
    layer: Option<&str>,
    std: Option<f64>,
    rows: usize,
    cols: usize,
    seed: u64,
    out: &OutArg,
) -> Result<ExitCode> {
    let (w, std) = match (ckpt, layer) {
        (Some(path), Some(layer)) => {
            let w = Checkpoint::load(path)?.params.composed_weight(layer)?;
            let s = std.unwrap_or((2.0 / w.rows() as f64).sqrt());
            (w, s)
        }
        _ => {
            let s = std.unwrap_or(1.0 / (rows.max(cols) as f64).sqrt());
            (gaussian_matrix(&mut Rng::new(seed), rows, cols, s)?, s)
        }
    };
    let report = esd_vs_mp(&w, std)?;
    println!("matrix {}x{}  assumed std {std:.6e}", w.rows(), w.cols());
    println!("ks_distance {:.6}", report.ks_distance);
    println!("lambda_minus {:.6e}  lambda_plus {:.6e}", report.lambda_minus, report.lambda_plus);
    println!("empirical_max {:.6e}", report.empirical_max);
    let dir = out_dir(out, None);
    ensure_dir(&dir)?;
    write_json(&dir.join("esd.json"), serde_json::to_string_pretty(&report))?;
    let mut tsv = String::from("bin_edge\tcount\n");
    for (edge, count) in &report.histogram {
        tsv += &format!("{edge:.6e}\t{count}\n");
    }
    write_file(&dir.join("esd_hist.tsv"), &tsv)?;
    Ok(ExitCode::SUCCESS)
}

fn run_checkpoints(run: &Path) -> Result<Vec<PathBuf>> {
    let dir = run.join("ckpt");
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let mut paths = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        let p = entry.path();
        if p.extension().is_some_and(|x| x == "ckpt") {
            paths.push(p);
        }
    }
    Ok(paths)
}

pub fn analyze_svtraj(run: Option<&Path>, ckpts: &[PathBuf], layer: &str, out: &OutArg) -> Result<ExitCode> {
    let paths = match run {
        Some(r) => run_checkpoints(r)?,
        None => ckpts.to_vec(),
    };
    let mut loaded = paths.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
    loaded.sort_by_key(|c| c.step);
    let report = sv_trajectory(&loaded, layer)?;
    println!("step\ttop1_share\teff_rank\tsv_top");
    for i in 0..report.steps.len() {
        let top: Vec<String> = report.singular_values[i].iter().take(5).map(|s| format!("{s:.4}")).collect();
        println!(
            "{}\t{:.6}\t{:.4}\t{}",
            report.steps[i],
            report.top1_share[i],
            report.effective_rank[i],
            top.join(",")
        );
    }
    println!("kendall_tau {:.4}", report.tau);
    let dir = out_dir(out, None);
    ensure_dir(&dir)?;
    write_json(&dir.join(format!("svtraj_{layer}.json")), serde_json::to_string_pretty(&report))?;
    Ok(ExitCode::SUCCESS)
}

fn find_config(a: &Path) -> Result<PathBuf> {
    let parent = a.parent().unwrap_or(Path::new(""));
    [parent.join("config.json"), parent.parent().map(|p| p.join("config.json")).unwrap_or_default()]
        .into_iter()
        .find(|p| p.is_file())
        .ok_or_else(|| Error::Config(format!("no config.json beside {}; pass --config", a.display())))
}

pub fn interpolate(a: &Path, b: &Path, steps: usize, config: Option<&Path>, out: &OutArg) -> Result<ExitCode> {
    if steps < 2 {
        return Err(Error::Config(format!("--steps must be at least 2, got {steps}")));
    }
    let config = match config {
        Some(c) => c.to_path_buf(),
        None => find_config(a)?,
    };
    let cfg = load_config(&config)?;
    let data = cfg.data.load()?;
    let spec = cfg.network(&data)?;
    let (ca, cb) = (Checkpoint::load(a)?, Checkpoint::load(b)?);
    let result = interpolate_path(&ca.params, &cb.params, &spec, &data.eval, &default_ts(steps))?;
    let mut tsv = String::from("t\tloss\taccuracy\n");
    for i in 0..result.ts.len() {
        let acc = result.accuracy[i].map(|a| format!("{a:.6}")).unwrap_or_else(|| "-".into());
        tsv += &format!("{:.4}\t{:.8}\t{acc}\n", result.ts[i], result.loss[i]);
    }
    print!("{tsv}");
    println!("barrier {:.8}", result.barrier());
    let dir = out_dir(out, None);
    ensure_dir(&dir)?;
    write_file(&dir.join("interpolate.tsv"), &tsv)?;
    write_json(&dir.join("interpolate.json"), serde_json::to_string_pretty(&result))?;
    Ok(ExitCode::SUCCESS)
}

pub fn verify(seed: u64) -> Result<ExitCode> {
    let results = lrlab_core::verify::run_all(seed);
    println!("{:>3}  {:<32} {:<6} {:>8}  detail", "id", "check", "result", "time");
    for r in &results {
        println!(
            "{:>3}  {:<32} {:<6} {:>7.2}s  {}",
            r.id,
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.seconds,
            r.detail
        );
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed == 0 {
        println!("all {} checks passed", results.len());
        Ok(ExitCode::SUCCESS)
    } else {
        println!("{failed} of {} checks failed", results.len());
        Ok(ExitCode::from(2))
    }
}

fn print_costs(rows: &[LayerCost]) {
    println!(
        "{:<8} {:>7} {:>7} {:>6} {:>12} {:>12} {:>9} {:>10} {:>11}",
        "layer", "m", "n", "r", "full_flops", "fact_flops", "reduction", "breakeven", "economical"
    );
    for c in rows {
        println!(
            "{:<8} {:>7} {:>7} {:>6} {:>12} {:>12} {:>8.2}x {:>10} {:>11}",
            c.layer,
            c.m,
            c.n,
            c.rank,
            c.full_flops,
            c.fact_flops,
            c.full_flops as f64 / c.fact_flops as f64,
            c.breakeven_rank,
            if c.economical { "yes" } else { "no" }
        );
    }
}

pub fn cost(
    m: Option<usize>,
    n: Option<usize>,
    r: Option<usize>,
    kernel: Option<usize>,
    config: Option<&Path>,
) -> Result<ExitCode> {
    match (m, n, r, config) {
        (Some(m), Some(n), Some(r), None) => {
            let rows = kernel.map_or(m, |k| k * k * m);
            if rows == 0 || n == 0 {
                return Err(Error::InvalidInput("--m, --n and --kernel must be positive".into()));
            }
            if r == 0 || r > rows.min(n) {
                return Err(Error::Rank { rank: r, max: rows.min(n) });
            }
            let c = layer_cost(if kernel.is_some() { "conv" } else { "dense" }, rows, n, r);
            print_costs(std::slice::from_ref(&c));
            println!(
                "params {} vs {}; training memory {} vs {}",
                c.fact_params, c.full_params, c.fact_train_memory, c.full_train_memory
            );
        }
        (None, None, None, Some(path)) => {
            let cfg = load_config(path)?;
            let spec = match cfg.model.input {
                Some(input) => cfg.model.build(input)?,
                None => cfg.network(&cfg.data.load()?)?,
            };
            let spec = if cfg.train.low_rank || cfg.switch.is_some() {
                spec.to_low_rank(cfg.train.rank_fraction)?
            } else {
                spec
            };
            let report = cost_model(&spec);
            print_costs(&report.layers);
            println!(
                "total params {} factorized vs {} full",
                report.total_fact_params, report.total_full_params
            );
        }
        _ => return Err(Error::InvalidInput("give either --m, --n and --r, or --config".into())),
    }
    Ok(ExitCode::SUCCESS)
}
