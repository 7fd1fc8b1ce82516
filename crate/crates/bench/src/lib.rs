//! Fixtures shared by the benchmarks.

use lrlab_core::data::synthetic_blobs;
use lrlab_core::linalg::{gaussian_matrix, Matrix, Rng};
use lrlab_core::net::{LayerSpec, NetworkSpec, Shape};
use lrlab_core::Dataset;

pub fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    gaussian_matrix(&mut Rng::new(seed), rows, cols, 1.0).expect("valid shape")
}

/// 32 → 128 → 128 → 128 → 10 classifier, the size used by the acceptance runs.
pub fn mlp() -> NetworkSpec {
    let mut layers = Vec::new();
    let mut inputs = 32;
    for _ in 0..3 {
        layers.push(LayerSpec::Dense { inputs, outputs: 128, bias: true });
        layers.push(LayerSpec::Relu);
        inputs = 128;
    }
    layers.push(LayerSpec::Dense { inputs, outputs: 10, bias: true });
    layers.push(LayerSpec::SoftmaxCrossEntropy);
    NetworkSpec::new(Shape::Flat { features: 32 }, layers).expect("valid spec")
}

pub fn blobs() -> Dataset {
    synthetic_blobs(10, 32, 512, 64, 2.0, 1).expect("valid blobs")
}
