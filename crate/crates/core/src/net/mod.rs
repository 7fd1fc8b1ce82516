//! Feed-forward networks with dense, factorized-dense, conv, and
//! factorized-conv layers.

pub mod conv;
mod factorized;
mod model;
mod params;
mod spec;

pub use conv::{conv2d, conv2d_factorized, ConvGeometry};
pub use factorized::{FactorizedParam, KernelShape};
pub use model::{backward, backward_seeded, evaluate, forward, forward_loss, select_rows, Cache, Targets};
pub use params::{Gradients, ParamSet, TensorMap};
pub use spec::{layer_name, rank_for_fraction, ConvSpec, LayerSpec, NetworkSpec, Padding, Shape};
