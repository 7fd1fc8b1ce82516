use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::conv::ConvGeometry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Same,
    Valid,
}

/// Activation shape between layers. Images are stored flattened per sample
/// in height-width-channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Shape {
    Flat { features: usize },
    Image { height: usize, width: usize, channels: usize },
}

impl Shape {
    pub fn size(&self) -> usize {
        match *self {
            Shape::Flat { features } => features,
            Shape::Image { height, width, channels } => height * width * channels,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub padding: Padding,
    pub bias: bool,
}

impl ConvSpec {
    /// Rows of the `(h·w·c_in) × c_out` kernel matrix.
    pub fn patch_size(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_channels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize, bias: bool },
    FactorizedDense { inputs: usize, outputs: usize, rank: usize, bias: bool },
    Conv(ConvSpec),
    FactorizedConv { conv: ConvSpec, rank: usize },
    Relu,
    Flatten,
    SoftmaxCrossEntropy,
    Mse,
}

impl LayerSpec {
    pub fn is_head(&self) -> bool {
        matches!(self, LayerSpec::SoftmaxCrossEntropy | LayerSpec::Mse)
    }

    pub fn is_factorized(&self) -> bool {
        matches!(self, LayerSpec::FactorizedDense { .. } | LayerSpec::FactorizedConv { .. })
    }

    /// `(m, n)` of the (composed) weight matrix, if the layer has one.
    pub fn weight_shape(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Dense { inputs, outputs, .. } | LayerSpec::FactorizedDense { inputs, outputs, .. } => {
                Some((inputs, outputs))
            }
            LayerSpec::Conv(c) | LayerSpec::FactorizedConv { conv: c, .. } => Some((c.patch_size(), c.out_channels)),
            _ => None,
        }
    }

    pub fn rank(&self) -> Option<usize> {
        match *self {
            LayerSpec::FactorizedDense { rank, .. } | LayerSpec::FactorizedConv { rank, .. } => Some(rank),
            _ => None,
        }
    }

    fn has_bias(&self) -> bool {
        match *self {
            LayerSpec::Dense { bias, .. } | LayerSpec::FactorizedDense { bias, .. } => bias,
            LayerSpec::Conv(c) | LayerSpec::FactorizedConv { conv: c, .. } => c.bias,
            _ => false,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::FactorizedDense { .. } => "factorized_dense",
            LayerSpec::Conv(_) => "conv",
            LayerSpec::FactorizedConv { .. } => "factorized_conv",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
            LayerSpec::SoftmaxCrossEntropy => "softmax_cross_entropy",
            LayerSpec::Mse => "mse",
        }
    }
}

/// Name prefix of layer `i`'s parameters: `l{i}.w`, `l{i}.u`, `l{i}.v`, `l{i}.b`.
pub fn layer_name(i: usize) -> String {
    format!("l{i}")
}

/// Ceiling-rounded rank for a fraction of `min(m, n)`, clamped to `[1, min(m, n)]`.
pub fn rank_for_fraction(fraction: f64, m: usize, n: usize) -> usize {
    let full = m.min(n);
    // Guard against 0.1 * 30 = 3.0000000000000004 rounding up to 4.
    let r = (fraction * full as f64 - 1e-9).ceil();
    (r.max(1.0) as usize).min(full)
}

/// A validated feed-forward architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    input: Shape,
    layers: Vec<LayerSpec>,
    /// Input shape of each layer, plus the final output shape.
    shapes: Vec<Shape>,
}

impl NetworkSpec {
    pub fn new(input: Shape, layers: Vec<LayerSpec>) -> Result<Self> {
        if input.size() == 0 {
            return Err(Error::shape("input shape must be non-empty"));
        }
        let mut shapes = vec![input];
        let mut cur = input;
        for (i, layer) in layers.iter().enumerate() {
            let at = || format!("layer {i} ({})", layer.kind_name());
            if layer.is_head() && i + 1 != layers.len() {
                return Err(Error::shape(format!("{}: loss head must be the last layer", at())));
            }
            cur = match (*layer, cur) {
                (LayerSpec::Dense { inputs, outputs, .. }, Shape::Flat { features })
                | (LayerSpec::FactorizedDense { inputs, outputs, .. }, Shape::Flat { features }) => {
                    if inputs != features {
                        return Err(Error::shape(format!("{}: expects {inputs} inputs, got {features}", at())));
                    }
                    if inputs == 0 || outputs == 0 {
                        return Err(Error::shape(format!("{}: zero-sized weight", at())));
                    }
                    Shape::Flat { features: outputs }
                }
                (LayerSpec::Conv(c), Shape::Image { height, width, channels })
                | (LayerSpec::FactorizedConv { conv: c, .. }, Shape::Image { height, width, channels }) => {
                    if c.in_channels != channels {
                        return Err(Error::shape(format!(
                            "{}: expects {} channels, got {channels}",
                            at(),
                            c.in_channels
                        )));
                    }
                    if c.kernel_h == 0 || c.kernel_w == 0 || c.out_channels == 0 {
                        return Err(Error::shape(format!("{}: zero-sized kernel", at())));
                    }
                    let g = ConvGeometry::new(height, width, &c).map_err(|e| Error::shape(format!("{}: {e}", at())))?;
                    Shape::Image {
                        height: g.out_h,
                        width: g.out_w,
                        channels: c.out_channels,
                    }
                }
                (LayerSpec::Flatten, s) => Shape::Flat { features: s.size() },
                (LayerSpec::Relu, s) => s,
                (LayerSpec::SoftmaxCrossEntropy | LayerSpec::Mse, s @ Shape::Flat { .. }) => s,
                (_, s) => {
                    return Err(Error::shape(format!("{}: incompatible input shape {s:?}", at())));
                }
            };
            if let Some(rank) = layer.rank() {
                let (m, n) = layer.weight_shape().expect("factorized layers have weights");
                if rank == 0 || rank > m.min(n) {
                    return Err(Error::Rank {
                        rank,
                        max: m.min(n),
                    });
                }
            }
            shapes.push(cur);
        }
        match layers.last() {
            Some(l) if l.is_head() => {}
            _ => return Err(Error::shape("network must end in a loss head")),
        }
        Ok(Self { input, layers, shapes })
    }

    pub fn input(&self) -> Shape {
        self.input
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Input shape of layer `i`.
    pub fn shape_in(&self, i: usize) -> Shape {
        self.shapes[i]
    }

    pub fn output_size(&self) -> usize {
        self.shapes.last().map(Shape::size).unwrap_or(0)
    }

    pub fn head(&self) -> LayerSpec {
        *self.layers.last().expect("validated spec has a head")
    }

    pub fn is_factorized(&self) -> bool {
        self.layers.iter().any(LayerSpec::is_factorized)
    }

    pub fn conv_geometry(&self, i: usize) -> Option<ConvGeometry> {
        let c = match self.layers[i] {
            LayerSpec::Conv(c) | LayerSpec::FactorizedConv { conv: c, .. } => c,
            _ => return None,
        };
        match self.shapes[i] {
            Shape::Image { height, width, .. } => ConvGeometry::new(height, width, &c).ok(),
            Shape::Flat { .. } => None,
        }
    }

    /// Parameter names and `(rows, cols)` shapes in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let name = layer_name(i);
            if let Some((m, n)) = layer.weight_shape() {
                match layer.rank() {
                    Some(r) => {
                        out.push((format!("{name}.u"), (m, r)));
                        out.push((format!("{name}.v"), (n, r)));
                    }
                    None => out.push((format!("{name}.w"), (m, n))),
                }
                if layer.has_bias() {
                    out.push((format!("{name}.b"), (1, n)));
                }
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, (r, c))| r * c).sum()
    }

    /// Indices of layers carrying a weight matrix.
    pub fn weight_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].weight_shape().is_some()).collect()
    }

    /// Indices of unfactorized layers that [`NetworkSpec::to_low_rank`] would
    /// factorize: every dense layer except the last affine layer (the
    /// classifier), and every conv layer except the first.
    pub fn factorizable_layers(&self) -> Vec<usize> {
        let weights = self.weight_layers();
        let last_affine = weights.last().copied();
        let first_conv = self
            .layers
            .iter()
            .position(|l| matches!(l, LayerSpec::Conv(_) | LayerSpec::FactorizedConv { .. }));
        weights
            .into_iter()
            .filter(|&i| Some(i) != last_affine)
            .filter(|&i| match self.layers[i] {
                LayerSpec::Dense { .. } => true,
                LayerSpec::Conv(_) => Some(i) != first_conv,
                _ => false,
            })
            .collect()
    }

    /// Same architecture with eligible layers factorized at
    /// `rank = ceil(fraction · min(m, n))`.
    pub fn to_low_rank(&self, fraction: f64) -> Result<NetworkSpec> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidInput(format!("rank fraction must be in (0, 1], got {fraction}")));
        }
        let mut layers = self.layers.clone();
        for i in self.factorizable_layers() {
            let (m, n) = layers[i].weight_shape().expect("weight layer");
            let rank = rank_for_fraction(fraction, m, n);
            layers[i] = match layers[i] {
                LayerSpec::Dense { inputs, outputs, bias } => LayerSpec::FactorizedDense {
                    inputs,
                    outputs,
                    rank,
                    bias,
                },
                LayerSpec::Conv(conv) => LayerSpec::FactorizedConv { conv, rank },
                other => other,
            };
        }
        NetworkSpec::new(self.input, layers)
    }

    /// Same architecture with every factorized layer replaced by its
    /// unfactorized counterpart.
    pub fn to_full_rank(&self) -> NetworkSpec {
        let layers = self
            .layers
            .iter()
            .map(|l| match *l {
                LayerSpec::FactorizedDense { inputs, outputs, bias, .. } => LayerSpec::Dense { inputs, outputs, bias },
                LayerSpec::FactorizedConv { conv, .. } => LayerSpec::Conv(conv),
                other => other,
            })
            .collect();
        NetworkSpec::new(self.input, layers).expect("unfactorizing preserves validity")
    }
}
