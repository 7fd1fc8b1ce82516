//! SGD training loop: direct low-rank training and pretrain-then-factorize.

use std::time::Instant;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::io::checkpoint::{Checkpoint, Digest};
use crate::io::metrics::{LayerMetrics, MetricRecord, SCHEMA_VERSION};
use crate::linalg::{effective_rank_from_sigma, Matrix, Rng};
use crate::net::{
    backward, evaluate, forward, Gradients, KernelShape, LayerSpec, NetworkSpec, ParamSet, Targets, TensorMap,
};
use crate::schemes::{
    frobenius_decay_penalty, init_params, l2_factor_penalty, spectral_init, spectral_ones_init, weight_decay_penalty,
    InitScheme, RegKind, RegPenalty,
};

const BATCH_STREAM: u64 = 0xba7c_4e5d;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    #[default]
    Constant,
    /// At each `(step, factor)` milestone the rate is multiplied by `factor`.
    StepDecay { milestones: Vec<(u64, f64)> },
}

impl Schedule {
    pub fn factor(&self, step: u64) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::StepDecay { milestones } => milestones.iter().filter(|(s, _)| step >= *s).map(|(_, f)| f).product(),
        }
    }

    fn validate(&self) -> Result<()> {
        if let Schedule::StepDecay { milestones } = self {
            if milestones.windows(2).any(|w| w[0].0 >= w[1].0) {
                return Err(Error::Config("schedule milestones must be strictly increasing".into()));
            }
            if let Some((_, f)) = milestones.iter().find(|(_, f)| !(*f > 0.0 && f.is_finite())) {
                return Err(Error::Config(format!("schedule factor must be positive, got {f}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Constant multiplier on `lr`, applied from the first step.
    pub lr_scale: f64,
    pub momentum: f64,
    /// Penalty on factorized layers: none, `l2` or `frobenius_decay`.
    pub reg: RegPenalty,
    /// Penalty on unfactorized weights: none or `weight_decay`.
    pub baseline_reg: RegPenalty,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub rank_fraction: f64,
    /// Factorize eligible layers before training.
    pub low_rank: bool,
    pub init: InitScheme,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            lr_scale: 1.0,
            momentum: 0.9,
            reg: RegPenalty::none(),
            baseline_reg: RegPenalty::none(),
            steps: 1000,
            batch_size: 32,
            seed: 0,
            rank_fraction: 0.25,
            low_rank: true,
            init: InitScheme::He,
            schedule: Schedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_scale > 0.0 && self.lr_scale.is_finite()) {
            return bad(format!("lr_scale must be positive, got {}", self.lr_scale));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be >= 1".into());
        }
        if !(self.rank_fraction > 0.0 && self.rank_fraction <= 1.0) {
            return bad(format!("rank_fraction must be in (0, 1], got {}", self.rank_fraction));
        }
        self.reg.validate()?;
        self.baseline_reg.validate()?;
        if self.reg.kind == RegKind::WeightDecay {
            return bad("reg applies to factorized layers: use l2 or frobenius_decay".into());
        }
        if matches!(self.baseline_reg.kind, RegKind::L2Factors | RegKind::FrobeniusDecay) {
            return bad("baseline_reg applies to unfactorized weights: use weight_decay".into());
        }
        self.schedule.validate()
    }

    /// Learning rate before any post-switch multiplier.
    pub fn lr_at(&self, step: u64) -> f64 {
        self.lr * self.lr_scale * self.schedule.factor(step)
    }
}

fn default_after_switch() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchPolicy {
    /// Full-rank steps before factorizing (`T₀`).
    pub pretrain_steps: u64,
    pub resume_init: InitScheme,
    #[serde(default = "default_after_switch")]
    pub lr_multiplier_after_switch: f64,
}

impl SwitchPolicy {
    pub fn validate(&self, steps: u64) -> Result<()> {
        if self.resume_init == InitScheme::He {
            return Err(Error::Config("resume_init must be spectral or spectral_ones".into()));
        }
        if self.pretrain_steps >= steps {
            return Err(Error::Config(format!(
                "pretrain_steps ({}) must be below steps ({steps})",
                self.pretrain_steps
            )));
        }
        if !(self.lr_multiplier_after_switch > 0.0 && self.lr_multiplier_after_switch.is_finite()) {
            return Err(Error::Config("lr_multiplier_after_switch must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cadence {
    pub eval_every: u64,
    /// `None` means every `ceil(steps / 10)` steps.
    pub checkpoint_every: Option<u64>,
    pub sv_top: usize,
    pub wall_clock: bool,
}

impl Default for Cadence {
    fn default() -> Self {
        Self {
            eval_every: 100,
            checkpoint_every: None,
            sv_top: 5,
            wall_clock: false,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub cadence: Cadence,
    pub digest: Digest,
    pub resume: Option<Checkpoint>,
}

/// Receives the run's outputs as they are produced.
pub trait RunSink {
    fn metric(&mut self, record: &MetricRecord) -> Result<()>;
    fn checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()>;
    /// Called with the last state whose parameters were all finite before a
    /// numerics error is returned.
    fn aborted(&mut self, _last_good: &Checkpoint) -> Result<()> {
        Ok(())
    }
    fn warn(&mut self, _msg: &str) {}
}

#[derive(Clone, Debug, Default)]
pub struct MemorySink {
    pub metrics: Vec<MetricRecord>,
    pub checkpoints: Vec<Checkpoint>,
    pub aborted: Option<Checkpoint>,
    pub warnings: Vec<String>,
}

impl RunSink for MemorySink {
    fn metric(&mut self, record: &MetricRecord) -> Result<()> {
        self.metrics.push(record.clone());
        Ok(())
    }

    fn checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.checkpoints.push(ckpt.clone());
        Ok(())
    }

    fn aborted(&mut self, last_good: &Checkpoint) -> Result<()> {
        self.aborted = Some(last_good.clone());
        Ok(())
    }

    fn warn(&mut self, msg: &str) {
        self.warnings.push(msg.to_string());
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SwitchEvent {
    pub step: u64,
    pub pre_eval_loss: f64,
    pub post_eval_loss: f64,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub spec: NetworkSpec,
    pub params: ParamSet,
    pub step: u64,
    pub eval_loss: f64,
    pub eval_acc: Option<f64>,
    pub switch: Option<SwitchEvent>,
}

/// `lr / ‖W‖_F²`, the step size seen by the normalized weight.
pub fn effective_step_size(w: &Matrix, lr: f64) -> Result<f64> {
    let n2 = w.inner(w)?;
    if n2 == 0.0 {
        return Err(Error::Degenerate("effective step size of a zero weight".into()));
    }
    Ok(lr / n2)
}

/// Penalty loss and per-parameter gradients for the current parameters.
pub fn penalty_gradients(spec: &NetworkSpec, params: &ParamSet, reg: &RegPenalty, baseline: &RegPenalty) -> Result<(f64, TensorMap)> {
    let mut loss = 0.0;
    let mut grads = TensorMap::new();
    for i in spec.weight_layers() {
        let name = crate::net::layer_name(i);
        if spec.layers()[i].is_factorized() {
            let (u, v) = (params.require(&format!("{name}.u"))?, params.require(&format!("{name}.v"))?);
            let p = match reg.kind {
                _ if reg.lambda == 0.0 => continue,
                RegKind::L2Factors => l2_factor_penalty(u, v, reg.lambda)?,
                RegKind::FrobeniusDecay => frobenius_decay_penalty(u, v, reg.lambda)?,
                RegKind::None | RegKind::WeightDecay => continue,
            };
            loss += p.loss;
            grads.insert(format!("{name}.u"), p.grad_u);
            grads.insert(format!("{name}.v"), p.grad_v);
        } else if baseline.kind == RegKind::WeightDecay && baseline.lambda > 0.0 {
            let key = format!("{name}.w");
            let (l, g) = weight_decay_penalty(params.require(&key)?, baseline.lambda)?;
            loss += l;
            grads.insert(key, g);
        }
    }
    Ok((loss, grads))
}

/// One momentum-SGD update, `buf ← μ·buf + g`, `θ ← θ − lr·buf`, where `g`
/// is the loss gradient plus any `extra` (penalty) gradient. Nothing is
/// written unless every updated value is finite.
pub fn sgd_step(
    params: &mut ParamSet,
    momentum: &mut TensorMap,
    grads: &Gradients,
    extra: &TensorMap,
    lr: f64,
    mu: f64,
) -> Result<()> {
    let mut updates = Vec::with_capacity(params.len());
    for (name, p) in params.iter() {
        let g = grads.require(name)?;
        let mut buf = match momentum.get(name) {
            Some(b) if mu != 0.0 => b.scale(mu).add(g)?,
            _ => g.clone(),
        };
        if let Some(e) = extra.get(name) {
            buf.add_scaled(1.0, e)?;
        }
        let mut next = p.clone();
        next.add_scaled(-lr, &buf)?;
        if !next.is_finite() || !buf.is_finite() {
            return Err(Error::numerics(name, "parameter update"));
        }
        updates.push((name.to_string(), next, buf));
    }
    for (name, next, buf) in updates {
        params.insert(name.clone(), next);
        momentum.insert(name, buf);
    }
    Ok(())
}

/// Replaces each eligible unfactorized weight with its rank-`r` factors.
pub fn switch_to_low_rank(
    spec: &NetworkSpec,
    params: &ParamSet,
    fraction: f64,
    scheme: InitScheme,
) -> Result<(NetworkSpec, ParamSet)> {
    let target = spec.to_low_rank(fraction)?;
    let mut out = ParamSet::new();
    for (i, (before, after)) in spec.layers().iter().zip(target.layers()).enumerate() {
        let name = crate::net::layer_name(i);
        if before.is_factorized() || !after.is_factorized() {
            continue;
        }
        let w = params.require(&format!("{name}.w"))?;
        let r = after.rank().expect("factorized layer has a rank");
        let p = match scheme {
            InitScheme::Spectral => spectral_init(w, r)?,
            InitScheme::SpectralOnes => spectral_ones_init(w, r)?,
            InitScheme::He => return Err(Error::Config("cannot switch with He init".into())),
        };
        let p = match *after {
            LayerSpec::FactorizedConv { conv, .. } => p.with_kernel(KernelShape {
                h: conv.kernel_h,
                w: conv.kernel_w,
                c_in: conv.in_channels,
                c_out: conv.out_channels,
            })?,
            _ => p,
        };
        out.insert(format!("{name}.u"), p.u);
        out.insert(format!("{name}.v"), p.v);
    }
    let mut params_out = ParamSet::new();
    for (key, _) in target.param_shapes() {
        let m = match out.remove(&key) {
            Some(m) => m,
            None => params.require(&key)?.clone(),
        };
        params_out.insert(key, m);
    }
    Ok((target, params_out))
}

/// Norms, effective rank, effective step size and leading singular values
/// of every weight layer.
pub fn layer_metrics(params: &ParamSet, lr: f64, top: usize) -> Result<IndexMap<String, LayerMetrics>> {
    let mut out = IndexMap::new();
    for layer in params.weight_layers() {
        let w = params.composed_weight(&layer)?;
        let sigma = params.layer_singular_values(&layer)?;
        out.insert(
            layer,
            LayerMetrics {
                frob: w.frobenius(),
                eff_rank: effective_rank_from_sigma(&sigma).ok(),
                eff_step: effective_step_size(&w, lr).ok(),
                sv_top: sigma.iter().take(top).copied().collect(),
            },
        );
    }
    Ok(out)
}

fn params_match(spec: &NetworkSpec, params: &ParamSet) -> bool {
    let shapes = spec.param_shapes();
    shapes.len() == params.len()
        && shapes
            .iter()
            .all(|(name, shape)| params.get(name).is_some_and(|m| m.shape() == *shape))
}

fn check_data(spec: &NetworkSpec, data: &Dataset) -> Result<()> {
    if data.input.size() != spec.input().size() {
        return Err(Error::Config(format!(
            "dataset has {} input features, model expects {}",
            data.input.size(),
            spec.input().size()
        )));
    }
    match (&data.train.targets, spec.head()) {
        (Targets::Classes(_), LayerSpec::SoftmaxCrossEntropy) => {
            let k = data.classes.unwrap_or(0);
            if k > spec.output_size() {
                return Err(Error::Config(format!(
                    "dataset has {k} classes, model outputs {}",
                    spec.output_size()
                )));
            }
        }
        (Targets::Values(y), LayerSpec::Mse) if y.cols() == spec.output_size() => {}
        _ => {
            return Err(Error::Config(format!(
                "dataset targets do not fit the {} head with {} outputs",
                spec.head().kind_name(),
                spec.output_size()
            )))
        }
    }
    Ok(())
}

/// Samples each epoch as a seeded permutation; batch `t` is a pure function
/// of `(seed, t)`, so a resumed run sees the same batches.
struct Batcher {
    n: usize,
    batch: usize,
    rng: Rng,
    epoch: Option<u64>,
    perm: Vec<usize>,
}

impl Batcher {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        Self {
            n,
            batch,
            rng: Rng::new(seed).fork(BATCH_STREAM),
            epoch: None,
            perm: Vec::new(),
        }
    }

    fn indices(&mut self, step: u64) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        for k in 0..self.batch as u64 {
            let g = step * self.batch as u64 + k;
            let epoch = g / self.n as u64;
            if self.epoch != Some(epoch) {
                self.perm = self.rng.fork(epoch).permutation(self.n);
                self.epoch = Some(epoch);
            }
            out.push(self.perm[(g % self.n as u64) as usize]);
        }
        out
    }
}

/// Trains `spec` (factorized first when `config.low_rank`).
pub fn train(
    spec: &NetworkSpec,
    config: &TrainConfig,
    data: &Dataset,
    opts: &RunOptions,
    sink: &mut dyn RunSink,
) -> Result<RunSummary> {
    run(spec, config, None, data, opts, sink)
}

/// Trains full-rank for `policy.pretrain_steps`, factorizes, then continues.
pub fn pretrain_switch(
    spec: &NetworkSpec,
    config: &TrainConfig,
    policy: &SwitchPolicy,
    data: &Dataset,
    opts: &RunOptions,
    sink: &mut dyn RunSink,
) -> Result<RunSummary> {
    run(spec, config, Some(policy), data, opts, sink)
}

struct State {
    spec: NetworkSpec,
    params: ParamSet,
    momentum: TensorMap,
    step: u64,
    lr_mult: f64,
    switch_pending: bool,
}

fn run(
    base: &NetworkSpec,
    config: &TrainConfig,
    policy: Option<&SwitchPolicy>,
    data: &Dataset,
    opts: &RunOptions,
    sink: &mut dyn RunSink,
) -> Result<RunSummary> {
    config.validate()?;
    if let Some(p) = policy {
        p.validate(config.steps)?;
    }
    let cadence = &opts.cadence;
    if cadence.eval_every == 0 || cadence.checkpoint_every == Some(0) {
        return Err(Error::Config("eval_every and checkpoint_every must be >= 1".into()));
    }
    check_data(base, data)?;
    if data.train.is_empty() || data.eval.is_empty() {
        return Err(Error::InsufficientData("empty train or eval split".into()));
    }

    let (start, post) = match policy {
        Some(_) => {
            let full = base.to_full_rank();
            let low = full.to_low_rank(config.rank_fraction)?;
            (full, Some(low))
        }
        None if config.low_rank => (base.to_low_rank(config.rank_fraction)?, None),
        None => (base.clone(), None),
    };

    let mut st = match &opts.resume {
        None => State {
            params: init_params(&start, if policy.is_some() { InitScheme::He } else { config.init }, config.seed)?,
            spec: start,
            momentum: TensorMap::new(),
            step: 0,
            lr_mult: 1.0,
            switch_pending: policy.is_some(),
        },
        Some(ckpt) => {
            if ckpt.digest != opts.digest {
                sink.warn("checkpoint config digest differs from the current config");
            }
            if ckpt.step >= config.steps {
                return Err(Error::Config(format!(
                    "checkpoint is at step {}, run has {} steps",
                    ckpt.step, config.steps
                )));
            }
            let (spec, pending) = if params_match(&start, &ckpt.params) {
                let pending = policy.is_some();
                if pending && ckpt.step > policy.unwrap().pretrain_steps {
                    return Err(Error::Config("unfactorized checkpoint is past the switch step".into()));
                }
                (start, pending)
            } else if post.as_ref().is_some_and(|p| params_match(p, &ckpt.params)) {
                (post.clone().unwrap(), false)
            } else {
                return Err(Error::shape("checkpoint tensors do not match the model"));
            };
            State {
                spec,
                params: ckpt.params.clone(),
                momentum: TensorMap::new(),
                step: ckpt.step,
                lr_mult: match (policy, pending) {
                    (Some(p), false) => p.lr_multiplier_after_switch,
                    _ => 1.0,
                },
                switch_pending: pending,
            }
        }
    };

    let ckpt_every = cadence.checkpoint_every.unwrap_or(config.steps.div_ceil(10));
    let t0 = policy.map(|p| p.pretrain_steps);
    let mut batcher = Batcher::new(data.train.len(), config.batch_size, config.seed);
    let started = Instant::now();
    let mut window = (0.0, 0u64);
    let mut switch = None;

    let mut body = |st: &mut State, sink: &mut dyn RunSink| -> Result<()> {
        let eval = |st: &State| evaluate(&st.spec, &st.params, &data.eval.inputs, &data.eval.targets);
        let record = |st: &State, window: &mut (f64, u64), eval_loss: f64, eval_acc: Option<f64>| -> Result<MetricRecord> {
            let lr = config.lr_at(st.step) * st.lr_mult;
            let loss = (window.1 > 0).then(|| window.0 / window.1 as f64);
            *window = (0.0, 0);
            Ok(MetricRecord {
                schema: SCHEMA_VERSION,
                step: st.step,
                wall_ms: cadence.wall_clock.then(|| started.elapsed().as_millis() as u64),
                loss,
                eval_loss,
                eval_acc,
                lr,
                event: None,
                pre_switch_eval_loss: None,
                layers: layer_metrics(&st.params, lr, cadence.sv_top)?,
            })
        };

        while st.step < config.steps {
            if st.switch_pending && Some(st.step) == t0 {
                let policy = policy.expect("pending switch has a policy");
                let (pre, _) = eval(st)?;
                let (spec, params) = switch_to_low_rank(&st.spec, &st.params, config.rank_fraction, policy.resume_init)?;
                st.spec = spec;
                st.params = params;
                st.momentum = TensorMap::new();
                st.lr_mult *= policy.lr_multiplier_after_switch;
                st.switch_pending = false;
                let (post_loss, post_acc) = eval(st)?;
                let mut r = record(st, &mut window, post_loss, post_acc)?;
                r.event = Some("switch".into());
                r.pre_switch_eval_loss = Some(pre);
                sink.metric(&r)?;
                switch = Some(SwitchEvent {
                    step: st.step,
                    pre_eval_loss: pre,
                    post_eval_loss: post_loss,
                });
            }

            let idx = batcher.indices(st.step);
            let batch = data.train.select(&idx);
            let (loss, cache) = forward(&st.spec, &st.params, &batch.inputs, &batch.targets)?;
            let grads = backward(&st.spec, &st.params, &cache)?;
            let (_, extra) = penalty_gradients(&st.spec, &st.params, &config.reg, &config.baseline_reg)?;
            let lr = config.lr_at(st.step) * st.lr_mult;
            sgd_step(&mut st.params, &mut st.momentum, &grads, &extra, lr, config.momentum)?;
            st.step += 1;
            window.0 += loss;
            window.1 += 1;

            let s = st.step;
            let deferred = st.switch_pending && Some(s) == t0;
            if (s % cadence.eval_every == 0 || s == config.steps) && !deferred {
                let (l, a) = eval(st)?;
                sink.metric(&record(st, &mut window, l, a)?)?;
            }
            if s % ckpt_every == 0 || s == config.steps {
                sink.checkpoint(&Checkpoint::new(s, opts.digest, st.params.clone()))?;
            }
        }
        Ok(())
    };

    if let Err(e) = body(&mut st, sink) {
        if e.is_numeric() {
            sink.aborted(&Checkpoint::new(st.step, opts.digest, st.params.clone()))?;
        }
        return Err(e);
    }
    let (eval_loss, eval_acc) = evaluate(&st.spec, &st.params, &data.eval.inputs, &data.eval.targets)?;
    Ok(RunSummary {
        spec: st.spec,
        params: st.params,
        step: st.step,
        eval_loss,
        eval_acc,
        switch,
    })
}
