use lrlab_core::data::synthetic_blobs;
use lrlab_core::linalg::Matrix;
use lrlab_core::net::{backward, evaluate, forward, LayerSpec, NetworkSpec, Shape, Targets};
use lrlab_core::trainer::{pretrain_switch, sgd_step, train, MemorySink};
use lrlab_core::{Cadence, Error, InitScheme, ParamSet, RegKind, RegPenalty, RunOptions, SwitchPolicy, TensorMap, TrainConfig};

fn mlp(inputs: usize, hidden: usize, classes: usize) -> NetworkSpec {
    NetworkSpec::new(
        Shape::Flat { features: inputs },
        vec![
            LayerSpec::Dense { inputs, outputs: hidden, bias: true },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: hidden, outputs: hidden, bias: true },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: hidden, outputs: classes, bias: true },
            LayerSpec::SoftmaxCrossEntropy,
        ],
    )
    .unwrap()
}

#[test]
fn momentum_on_a_scalar_quadratic() {
    // One weight, input 1, target 0, MSE head: L = w²/2, dL/dw = w.
    let spec = NetworkSpec::new(
        Shape::Flat { features: 1 },
        vec![LayerSpec::Dense { inputs: 1, outputs: 1, bias: false }, LayerSpec::Mse],
    )
    .unwrap();
    let mut params = ParamSet::new();
    params.insert("l0.w", Matrix::from_rows(&[[1.0]]).unwrap());
    let x = Matrix::from_rows(&[[1.0]]).unwrap();
    let t = Targets::Values(Matrix::zeros(1, 1));
    let mut mom = TensorMap::new();
    // buf ← 0.9 buf + w; w ← w − 0.1 buf
    let expected = [0.9, 0.72, 0.486];
    for want in expected {
        let (loss, cache) = forward(&spec, &params, &x, &t).unwrap();
        let w = params.get("l0.w").unwrap()[(0, 0)];
        assert!((loss - 0.5 * w * w).abs() < 1e-15);
        let g = backward(&spec, &params, &cache).unwrap();
        sgd_step(&mut params, &mut mom, &g, &TensorMap::new(), 0.1, 0.9).unwrap();
        assert!((params.get("l0.w").unwrap()[(0, 0)] - want).abs() < 1e-14);
    }
}

#[test]
fn separable_blobs_are_learned() {
    let data = synthetic_blobs(2, 8, 400, 100, 0.3, 3).unwrap();
    let spec = mlp(8, 32, 2);
    let config = TrainConfig {
        lr: 0.05,
        steps: 500,
        batch_size: 16,
        seed: 1,
        rank_fraction: 0.25,
        init: InitScheme::Spectral,
        reg: RegPenalty::new(RegKind::FrobeniusDecay, 1e-4).unwrap(),
        ..TrainConfig::default()
    };
    let r = train(&spec, &config, &data, &RunOptions::default(), &mut MemorySink::default()).unwrap();
    assert!(r.spec.is_factorized());
    let (_, acc) = evaluate(&r.spec, &r.params, &data.train.inputs, &data.train.targets).unwrap();
    assert!(acc.unwrap() >= 0.99, "train accuracy {acc:?}");
}

fn quick_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 0.02,
        steps: 120,
        batch_size: 8,
        seed,
        init: InitScheme::Spectral,
        reg: RegPenalty::new(RegKind::L2Factors, 1e-3).unwrap(),
        ..TrainConfig::default()
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let data = synthetic_blobs(3, 6, 90, 30, 1.0, 5).unwrap();
    let spec = mlp(6, 16, 3);
    let opts = RunOptions { cadence: Cadence { eval_every: 20, ..Cadence::default() }, ..RunOptions::default() };
    let run = |seed| {
        let mut sink = MemorySink::default();
        let r = train(&spec, &quick_config(seed), &data, &opts, &mut sink).unwrap();
        let lines: Vec<String> = sink.metrics.iter().map(|m| m.to_line()).collect();
        (r.params, lines, sink.checkpoints)
    };
    let (p1, m1, c1) = run(0);
    let (p2, m2, c2) = run(0);
    assert_eq!(p1.fingerprint(), p2.fingerprint());
    assert_eq!(m1, m2);
    assert_eq!(c1.iter().map(|c| c.encode()).collect::<Vec<_>>(), c2.iter().map(|c| c.encode()).collect::<Vec<_>>());
    let (p3, _, _) = run(1);
    assert_ne!(p1.fingerprint(), p3.fingerprint());
}

#[test]
fn full_rank_switch_preserves_the_function() {
    let data = synthetic_blobs(3, 6, 90, 30, 1.0, 5).unwrap();
    let spec = mlp(6, 16, 3);
    let config = TrainConfig { rank_fraction: 1.0, ..quick_config(0) };
    let policy = SwitchPolicy { pretrain_steps: 40, resume_init: InitScheme::Spectral, lr_multiplier_after_switch: 0.5 };
    let mut sink = MemorySink::default();
    let r = pretrain_switch(&spec, &config, &policy, &data, &RunOptions::default(), &mut sink).unwrap();
    let s = r.switch.unwrap();
    assert_eq!(s.step, 40);
    assert!((s.post_eval_loss - s.pre_eval_loss).abs() <= 1e-8 * s.pre_eval_loss.abs());
    let rec = sink.metrics.iter().find(|m| m.event.as_deref() == Some("switch")).unwrap();
    assert_eq!(rec.step, 40);
    assert_eq!(rec.pre_switch_eval_loss, Some(s.pre_eval_loss));
}

#[test]
fn divergence_is_reported_with_a_finite_last_state() {
    let data = synthetic_blobs(3, 6, 90, 30, 1.0, 5).unwrap();
    let spec = mlp(6, 16, 3);
    let config = TrainConfig { lr: 1e6, momentum: 0.99, ..quick_config(0) };
    let mut sink = MemorySink::default();
    let e = train(&spec, &config, &data, &RunOptions::default(), &mut sink).unwrap_err();
    assert!(matches!(e, Error::Numerics { .. }), "{e}");
    let last = sink.aborted.expect("last good state");
    assert!(last.params.iter().all(|(_, m)| m.is_finite()));
}
