//! Run configuration file (JSON). Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::data::{Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::io::checkpoint::Digest;
use crate::net::{ConvGeometry, ConvSpec, LayerSpec, NetworkSpec, Padding, Shape};
use crate::trainer::{Cadence, SwitchPolicy, TrainConfig};

fn yes() -> bool {
    true
}

fn same() -> Padding {
    Padding::Same
}

/// A layer with its input size left to be inferred.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerConfig {
    Dense {
        outputs: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    FactorizedDense {
        outputs: usize,
        rank: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Conv {
        kernel: usize,
        out_channels: usize,
        #[serde(default = "same")]
        padding: Padding,
        #[serde(default = "yes")]
        bias: bool,
    },
    FactorizedConv {
        kernel: usize,
        out_channels: usize,
        rank: usize,
        #[serde(default = "same")]
        padding: Padding,
        #[serde(default = "yes")]
        bias: bool,
    },
    Relu,
    Flatten,
    SoftmaxCrossEntropy,
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Taken from the dataset when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<Shape>,
    pub layers: Vec<LayerConfig>,
}

impl ModelConfig {
    pub fn build(&self, input: Shape) -> Result<NetworkSpec> {
        let mut cur = input;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let conv = |kernel: usize, out_channels: usize, padding: Padding, bias: bool| match cur {
                Shape::Image { channels, .. } => Ok(ConvSpec {
                    kernel_h: kernel,
                    kernel_w: kernel,
                    in_channels: channels,
                    out_channels,
                    padding,
                    bias,
                }),
                Shape::Flat { .. } => Err(Error::Config(format!("layer {i}: conv needs an image input"))),
            };
            let spec = match *l {
                LayerConfig::Dense { outputs, bias } => LayerSpec::Dense {
                    inputs: cur.size(),
                    outputs,
                    bias,
                },
                LayerConfig::FactorizedDense { outputs, rank, bias } => LayerSpec::FactorizedDense {
                    inputs: cur.size(),
                    outputs,
                    rank,
                    bias,
                },
                LayerConfig::Conv {
                    kernel,
                    out_channels,
                    padding,
                    bias,
                } => LayerSpec::Conv(conv(kernel, out_channels, padding, bias)?),
                LayerConfig::FactorizedConv {
                    kernel,
                    out_channels,
                    rank,
                    padding,
                    bias,
                } => LayerSpec::FactorizedConv {
                    conv: conv(kernel, out_channels, padding, bias)?,
                    rank,
                },
                LayerConfig::Relu => LayerSpec::Relu,
                LayerConfig::Flatten => LayerSpec::Flatten,
                LayerConfig::SoftmaxCrossEntropy => LayerSpec::SoftmaxCrossEntropy,
                LayerConfig::Mse => LayerSpec::Mse,
            };
            cur = match spec {
                LayerSpec::Dense { outputs, .. } | LayerSpec::FactorizedDense { outputs, .. } => Shape::Flat { features: outputs },
                LayerSpec::Conv(c) | LayerSpec::FactorizedConv { conv: c, .. } => {
                    let Shape::Image { height, width, .. } = cur else { unreachable!() };
                    let g = ConvGeometry::new(height, width, &c).map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
                    Shape::Image {
                        height: g.out_h,
                        width: g.out_w,
                        channels: c.out_channels,
                    }
                }
                LayerSpec::Flatten => Shape::Flat { features: cur.size() },
                _ => cur,
            };
            layers.push(spec);
        }
        NetworkSpec::new(input, layers).map_err(|e| Error::Config(e.to_string()))
    }
}

fn every_100() -> u64 {
    100
}

fn top_5() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default = "every_100")]
    pub eval_every: u64,
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
    #[serde(default = "top_5")]
    pub sv_top: usize,
    /// Record wall-clock milliseconds in metrics (makes output non-reproducible).
    #[serde(default)]
    pub wall_clock: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: None,
            eval_every: every_100(),
            checkpoint_every: None,
            sv_top: top_5(),
            wall_clock: false,
        }
    }
}

impl OutputConfig {
    pub fn cadence(&self) -> Cadence {
        Cadence {
            eval_every: self.eval_every,
            checkpoint_every: self.checkpoint_every,
            sv_top: self.sv_top,
            wall_clock: self.wall_clock,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switch: Option<SwitchPolicy>,
    pub data: DatasetSpec,
    #[serde(default)]
    pub output: OutputConfig,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let Some(s) = &self.switch {
            s.validate(self.train.steps)?;
        }
        if self.output.eval_every == 0 || self.output.checkpoint_every == Some(0) {
            return Err(Error::Config("eval_every and checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }

    pub fn network(&self, data: &Dataset) -> Result<NetworkSpec> {
        let input = self.model.input.unwrap_or(data.input);
        if input.size() != data.input.size() {
            return Err(Error::Config(format!(
                "model input has {} features, dataset {}",
                input.size(),
                data.input.size()
            )));
        }
        self.model.build(input)
    }

    /// The config with every default and inferred value written out.
    pub fn effective(&self, data: &Dataset) -> Config {
        let mut c = self.clone();
        c.model.input.get_or_insert(data.input);
        c.data = c.data.materialized();
        c.output.checkpoint_every.get_or_insert(c.train.steps.div_ceil(10));
        c
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON serialization.
    pub fn digest(&self) -> Digest {
        Sha256::digest(serde_json::to_vec(self).expect("config serializes")).into()
    }
}

pub fn hex(d: &Digest) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}
