//! Low-rank training laboratory.
//!
//! Factorized layers `W = UVᵀ`, spectral initialization, Frobenius decay vs.
//! factor L2, pretrain-then-factorize, and spectral analytics for studying
//! them at desk scale.

pub mod analytics;
pub mod data;
pub mod error;
pub mod io;
pub mod linalg;
pub mod net;
pub mod schemes;
pub mod trainer;
pub mod verify;

pub use data::{Dataset, DatasetSpec, Split};
pub use error::{Error, Result};
pub use io::{Checkpoint, Config, MetricRecord};
pub use linalg::{Matrix, Rng};
pub use net::{NetworkSpec, ParamSet, TensorMap};
pub use schemes::{InitScheme, RegKind, RegPenalty};
pub use trainer::{Cadence, RunOptions, RunSink, SwitchPolicy, TrainConfig};
