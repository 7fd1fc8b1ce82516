//! Forward pass with activation cache, and exact reverse-mode gradients.
//!
//! Losses are means over the batch. The MSE head uses `½‖ŷ − y‖²` per sample.
//! Factorized layers run `x·U` then `(·)·Vᵀ` and never form `UVᵀ`.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::net::conv::{col2im, im2col, regroup, ConvGeometry};
use crate::net::params::{Gradients, ParamSet};
use crate::net::spec::{layer_name, LayerSpec, NetworkSpec};

/// Supervision for a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Matrix),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `idx` of the targets.
    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Values(m) => Targets::Values(select_rows(m, idx)),
        }
    }
}

pub fn select_rows(m: &Matrix, idx: &[usize]) -> Matrix {
    let cols = m.cols();
    let mut data = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        data.extend_from_slice(m.row(i));
    }
    Matrix::new(idx.len(), cols, data).expect("non-empty selection")
}

enum LayerCache {
    Dense { x: Matrix },
    FactDense { x: Matrix, h: Matrix },
    Conv { patches: Matrix, geom: ConvGeometry },
    FactConv { patches: Matrix, h: Matrix, geom: ConvGeometry },
    Relu { y: Matrix },
    Passthrough,
}

enum HeadCache {
    Softmax { probs: Matrix, labels: Vec<usize> },
    Mse { diff: Matrix },
}

/// Activations saved by [`forward`] for [`backward`].
pub struct Cache {
    fingerprint: u64,
    batch: usize,
    layers: Vec<LayerCache>,
    head: HeadCache,
}

struct Pass {
    loss: f64,
    correct: Option<usize>,
    layers: Vec<LayerCache>,
    head: HeadCache,
}

fn weight<'a>(params: &'a ParamSet, name: &str, suffix: &str) -> Result<&'a Matrix> {
    params.require(&format!("{name}.{suffix}"))
}

fn add_bias(y: &mut Matrix, params: &ParamSet, name: &str, bias: bool) -> Result<()> {
    if !bias {
        return Ok(());
    }
    let b = weight(params, name, "b")?;
    if b.cols() != y.cols() {
        return Err(Error::shape(format!("{name}.b has {} entries, layer emits {}", b.cols(), y.cols())));
    }
    for i in 0..y.rows() {
        for (o, bv) in y.row_mut(i).iter_mut().zip(b.as_slice()) {
            *o += bv;
        }
    }
    Ok(())
}

fn run(spec: &NetworkSpec, params: &ParamSet, input: &Matrix, targets: &Targets, keep: bool) -> Result<Pass> {
    let batch = input.rows();
    if input.cols() != spec.input().size() {
        return Err(Error::shape(format!(
            "batch has {} features, network expects {}",
            input.cols(),
            spec.input().size()
        )));
    }
    if targets.len() != batch {
        return Err(Error::shape(format!("{batch} inputs but {} targets", targets.len())));
    }
    let mut x = input.clone();
    let mut caches = Vec::with_capacity(spec.layers().len());
    for (i, layer) in spec.layers().iter().enumerate() {
        let name = layer_name(i);
        let (y, cache) = match *layer {
            LayerSpec::Dense { bias, .. } => {
                let mut y = x.matmul(weight(params, &name, "w")?)?;
                add_bias(&mut y, params, &name, bias)?;
                (y, LayerCache::Dense { x })
            }
            LayerSpec::FactorizedDense { bias, .. } => {
                let h = x.matmul(weight(params, &name, "u")?)?;
                let mut y = h.matmul_t(weight(params, &name, "v")?)?;
                add_bias(&mut y, params, &name, bias)?;
                (y, LayerCache::FactDense { x, h })
            }
            LayerSpec::Conv(c) => {
                let geom = spec.conv_geometry(i).expect("validated conv layer");
                let patches = im2col(&x, &geom)?;
                let y = patches.matmul(weight(params, &name, "w")?)?;
                let mut y = regroup(y, batch, geom.positions() * c.out_channels);
                add_conv_bias(&mut y, params, &name, c.bias, c.out_channels)?;
                (y, LayerCache::Conv { patches, geom })
            }
            LayerSpec::FactorizedConv { conv: c, .. } => {
                let geom = spec.conv_geometry(i).expect("validated conv layer");
                let patches = im2col(&x, &geom)?;
                let h = patches.matmul(weight(params, &name, "u")?)?;
                let y = h.matmul_t(weight(params, &name, "v")?)?;
                let mut y = regroup(y, batch, geom.positions() * c.out_channels);
                add_conv_bias(&mut y, params, &name, c.bias, c.out_channels)?;
                (y, LayerCache::FactConv { patches, h, geom })
            }
            LayerSpec::Relu => {
                let y = x.map(|v| v.max(0.0));
                (y.clone(), LayerCache::Relu { y })
            }
            LayerSpec::Flatten => (x, LayerCache::Passthrough),
            LayerSpec::SoftmaxCrossEntropy => {
                let Targets::Classes(labels) = targets else {
                    return Err(Error::shape("softmax head needs class targets"));
                };
                let (loss, correct, probs) = softmax_ce(&x, labels)?;
                if !loss.is_finite() {
                    return Err(Error::numerics(format!("{name} (softmax_cross_entropy)"), format!("loss {loss}")));
                }
                return Ok(Pass {
                    loss,
                    correct: Some(correct),
                    layers: caches,
                    head: HeadCache::Softmax {
                        probs,
                        labels: labels.clone(),
                    },
                });
            }
            LayerSpec::Mse => {
                let Targets::Values(t) = targets else {
                    return Err(Error::shape("mse head needs value targets"));
                };
                let diff = x.sub(t)?;
                let loss = 0.5 * diff.frobenius().powi(2) / batch as f64;
                if !loss.is_finite() {
                    return Err(Error::numerics(format!("{name} (mse)"), format!("loss {loss}")));
                }
                return Ok(Pass {
                    loss,
                    correct: None,
                    layers: caches,
                    head: HeadCache::Mse { diff },
                });
            }
        };
        if !y.is_finite() {
            return Err(Error::numerics(format!("{name} ({})", layer.kind_name()), "activation"));
        }
        if keep {
            caches.push(cache);
        } else {
            caches.push(LayerCache::Passthrough);
        }
        x = y;
    }
    unreachable!("validated spec ends in a head")
}

fn add_conv_bias(y: &mut Matrix, params: &ParamSet, name: &str, bias: bool, channels: usize) -> Result<()> {
    if !bias {
        return Ok(());
    }
    let b = weight(params, name, "b")?;
    if b.cols() != channels {
        return Err(Error::shape(format!("{name}.b has {} entries, conv has {channels} channels", b.cols())));
    }
    for i in 0..y.rows() {
        for chunk in y.row_mut(i).chunks_mut(channels) {
            for (o, bv) in chunk.iter_mut().zip(b.as_slice()) {
                *o += bv;
            }
        }
    }
    Ok(())
}

/// Returns `(mean loss, #correct, softmax probabilities)`.
fn softmax_ce(logits: &Matrix, labels: &[usize]) -> Result<(f64, usize, Matrix)> {
    let k = logits.cols();
    let mut probs = Matrix::zeros(logits.rows(), k);
    let mut loss = 0.0;
    let mut correct = 0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::shape(format!("label {label} out of range for {k} classes")));
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss -= row[label] - log_z;
        for (p, v) in probs.row_mut(i).iter_mut().zip(row) {
            *p = (v - log_z).exp();
        }
        // First maximal logit wins ties.
        let argmax = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (j, &v)| if v > bv { (j, v) } else { (bi, bv) })
            .0;
        if argmax == label {
            correct += 1;
        }
    }
    Ok((loss / labels.len() as f64, correct, probs))
}

/// Mean batch loss and the cache needed by [`backward`].
pub fn forward(spec: &NetworkSpec, params: &ParamSet, input: &Matrix, targets: &Targets) -> Result<(f64, Cache)> {
    let pass = run(spec, params, input, targets, true)?;
    Ok((
        pass.loss,
        Cache {
            fingerprint: params.fingerprint(),
            batch: input.rows(),
            layers: pass.layers,
            head: pass.head,
        },
    ))
}

/// Loss only, no cache. Returns `(mean loss, #correct)`; `#correct` is `None`
/// for regression heads.
pub fn forward_loss(
    spec: &NetworkSpec,
    params: &ParamSet,
    input: &Matrix,
    targets: &Targets,
) -> Result<(f64, Option<usize>)> {
    let pass = run(spec, params, input, targets, false)?;
    Ok((pass.loss, pass.correct))
}

pub fn backward(spec: &NetworkSpec, params: &ParamSet, cache: &Cache) -> Result<Gradients> {
    backward_seeded(spec, params, cache, 1.0)
}

/// Backpropagates `seed · ∂loss`. `seed = 0` yields all-zero gradients.
pub fn backward_seeded(spec: &NetworkSpec, params: &ParamSet, cache: &Cache, seed: f64) -> Result<Gradients> {
    if cache.fingerprint != params.fingerprint() {
        return Err(Error::State("parameters changed since the forward pass".into()));
    }
    if cache.layers.len() + 1 != spec.layers().len() {
        return Err(Error::State("cache was produced by a different network".into()));
    }
    let batch = cache.batch as f64;
    let mut g = match &cache.head {
        HeadCache::Softmax { probs, labels } => {
            let mut g = probs.clone();
            for (i, &l) in labels.iter().enumerate() {
                g[(i, l)] -= 1.0;
            }
            g.scale(seed / batch)
        }
        HeadCache::Mse { diff } => diff.scale(seed / batch),
    };

    let mut grads: Vec<(String, Matrix)> = Vec::new();
    for (i, (layer, lc)) in spec.layers().iter().zip(&cache.layers).enumerate().rev() {
        let name = layer_name(i);
        let need_dx = i > 0;
        match (*layer, lc) {
            (LayerSpec::Dense { bias, .. }, LayerCache::Dense { x }) => {
                if bias {
                    grads.push((format!("{name}.b"), column_sums(&g, g.cols())));
                }
                grads.push((format!("{name}.w"), x.t_matmul(&g)?));
                if need_dx {
                    g = g.matmul_t(weight(params, &name, "w")?)?;
                }
            }
            (LayerSpec::FactorizedDense { bias, .. }, LayerCache::FactDense { x, h }) => {
                let u = weight(params, &name, "u")?;
                let v = weight(params, &name, "v")?;
                if bias {
                    grads.push((format!("{name}.b"), column_sums(&g, g.cols())));
                }
                // ∇V = gᵀh = ∇Wᵀ U,  ∇U = xᵀ(gV) = ∇W V
                grads.push((format!("{name}.v"), g.t_matmul(h)?));
                let dh = g.matmul(v)?;
                grads.push((format!("{name}.u"), x.t_matmul(&dh)?));
                if need_dx {
                    g = dh.matmul_t(u)?;
                }
            }
            (LayerSpec::Conv(c), LayerCache::Conv { patches, geom }) => {
                let gpos = regroup(g, cache.batch * geom.positions(), c.out_channels);
                if c.bias {
                    grads.push((format!("{name}.b"), column_sums(&gpos, c.out_channels)));
                }
                grads.push((format!("{name}.w"), patches.t_matmul(&gpos)?));
                g = if need_dx {
                    let dp = gpos.matmul_t(weight(params, &name, "w")?)?;
                    col2im(&dp, geom, cache.batch)
                } else {
                    gpos
                };
            }
            (LayerSpec::FactorizedConv { conv: c, .. }, LayerCache::FactConv { patches, h, geom }) => {
                let u = weight(params, &name, "u")?;
                let v = weight(params, &name, "v")?;
                let gpos = regroup(g, cache.batch * geom.positions(), c.out_channels);
                if c.bias {
                    grads.push((format!("{name}.b"), column_sums(&gpos, c.out_channels)));
                }
                grads.push((format!("{name}.v"), gpos.t_matmul(h)?));
                let dh = gpos.matmul(v)?;
                grads.push((format!("{name}.u"), patches.t_matmul(&dh)?));
                g = if need_dx {
                    let dp = dh.matmul_t(u)?;
                    col2im(&dp, geom, cache.batch)
                } else {
                    dh
                };
            }
            (LayerSpec::Relu, LayerCache::Relu { y }) => {
                for (gv, yv) in g.as_mut_slice().iter_mut().zip(y.as_slice()) {
                    if *yv <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            (LayerSpec::Flatten, LayerCache::Passthrough) => {}
            _ => return Err(Error::State(format!("cache entry does not match layer {i}"))),
        }
    }

    // Emit in canonical parameter order.
    let mut out = Gradients::new();
    for (pname, _) in spec.param_shapes() {
        let pos = grads
            .iter()
            .position(|(n, _)| *n == pname)
            .ok_or_else(|| Error::State(format!("missing gradient for {pname}")))?;
        out.insert(pname, grads.swap_remove(pos).1);
    }
    Ok(out)
}

/// Sums `g` over rows, treating each row as `chunks` of width `width`.
fn column_sums(g: &Matrix, width: usize) -> Matrix {
    let mut out = Matrix::zeros(1, width);
    let acc = out.as_mut_slice();
    for i in 0..g.rows() {
        for chunk in g.row(i).chunks(width) {
            for (a, v) in acc.iter_mut().zip(chunk) {
                *a += v;
            }
        }
    }
    out
}

/// Mean loss and accuracy over a whole split, evaluated in chunks.
pub fn evaluate(spec: &NetworkSpec, params: &ParamSet, input: &Matrix, targets: &Targets) -> Result<(f64, Option<f64>)> {
    const CHUNK: usize = 512;
    let n = input.rows();
    let mut loss = 0.0;
    let mut correct: Option<usize> = None;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (l, c) = forward_loss(spec, params, &select_rows(input, &idx), &targets.select(&idx))?;
        loss += l * (end - start) as f64;
        if let Some(c) = c {
            *correct.get_or_insert(0) += c;
        }
        start = end;
    }
    Ok((loss / n as f64, correct.map(|c| c as f64 / n as f64)))
}
