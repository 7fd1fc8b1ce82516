use std::path::Path;

use lrlab_core::io::idx::{load_idx, parse_idx};
use lrlab_core::io::metrics::{read_metrics, write_record};
use lrlab_core::io::{LayerMetrics, MetricRecord};
use lrlab_core::linalg::Matrix;
use lrlab_core::{Checkpoint, Config, DatasetSpec, Error, ParamSet};

// Big-endian IDX written by hand: magic, dims, payload.
fn images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 0x08, 0x03];
    for d in [n, rows, cols] {
        b.extend_from_slice(&d.to_be_bytes());
    }
    b.extend_from_slice(pixels);
    b
}

fn labels(l: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 0x08, 0x01];
    b.extend_from_slice(&(l.len() as u32).to_be_bytes());
    b.extend_from_slice(l);
    b
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, bytes).unwrap();
    p
}

#[test]
fn idx_fixture_parses() {
    let pixels: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
    let d = parse_idx(&images(3, 2, 2, &pixels), &labels(&[7, 0, 9])).unwrap();
    assert_eq!((d.rows, d.cols), (2, 2));
    assert_eq!(d.labels, vec![7, 0, 9]);
    assert_eq!(d.images.shape(), (3, 4));
    assert_eq!(d.images[(1, 0)], 80.0 / 255.0);
    assert_eq!(d.images[(2, 3)], 220.0 / 255.0);
}

#[test]
fn idx_errors_are_format_errors() {
    let img = images(2, 2, 2, &[0; 8]);
    // truncated payload
    assert!(matches!(parse_idx(&img[..img.len() - 1], &labels(&[1, 2])), Err(Error::Format(_))));
    // truncated header
    assert!(matches!(parse_idx(&img[..6], &labels(&[1, 2])), Err(Error::Format(_))));
    // wrong magic: labels file where images expected
    let e = parse_idx(&labels(&[1, 2]), &labels(&[1, 2])).unwrap_err();
    assert!(matches!(e, Error::Format(ref m) if m.contains("801")), "{e}");
    // count mismatch
    assert!(matches!(parse_idx(&img, &labels(&[1])), Err(Error::Format(_))));
    // trailing bytes
    let mut long = img.clone();
    long.push(0);
    assert!(matches!(parse_idx(&long, &labels(&[1, 2])), Err(Error::Format(_))));
}

#[test]
fn idx_dataset_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let n = 10u32;
    let pixels: Vec<u8> = (0..n * 4).map(|i| (i * 3) as u8).collect();
    let lab: Vec<u8> = (0..n).map(|i| (i % 3) as u8).collect();
    let ip = write(dir.path(), "img.idx", &images(n, 2, 2, &pixels));
    let lp = write(dir.path(), "lab.idx", &labels(&lab));
    let spec = DatasetSpec::IdxImages {
        images: ip.clone(),
        labels: lp.clone(),
        eval_images: None,
        eval_labels: None,
        normalization: Default::default(),
        eval_fraction: 0.2,
    };
    let d = spec.load().unwrap();
    assert_eq!(d.train.len(), 8);
    assert_eq!(d.eval.len(), 2);
    assert_eq!(d.classes, Some(3));
    assert_eq!(d.input.size(), 4);
    assert!(matches!(load_idx(&dir.path().join("missing"), &lp), Err(Error::Io { .. })));
}

fn params() -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("l0.u", Matrix::from_rows(&[[1.0, -0.0], [f64::MIN_POSITIVE / 2.0, 3.5]]).unwrap());
    p.insert("l0.v", Matrix::from_rows(&[[f64::MAX, 1e-300]]).unwrap());
    p.insert("l0.b", Matrix::zeros(1, 3));
    p
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    let c = Checkpoint::new(42, [7; 32], params());
    c.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"LRLB");
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.encode(), bytes);
    assert_eq!(back.params.names().collect::<Vec<_>>(), ["l0.u", "l0.v", "l0.b"]);
    assert_eq!(back.params.get("l0.u").unwrap()[(0, 1)].to_bits(), (-0.0f64).to_bits());

    for cut in [0, 3, 10, bytes.len() - 1] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format(_))), "cut at {cut}");
    }
    assert!(!dir.path().join(".a.ckpt.tmp").exists());
}

#[test]
fn metrics_lines_round_trip() {
    let mut layers = indexmap::IndexMap::new();
    layers.insert(
        "l0".to_string(),
        LayerMetrics { frob: 1.5, eff_rank: Some(2.25), eff_step: None, sv_top: vec![1.0, 0.5] },
    );
    let r = MetricRecord {
        schema: 1,
        step: 10,
        wall_ms: None,
        loss: Some(0.125),
        eval_loss: 0.25,
        eval_acc: None,
        lr: 0.1,
        event: Some("switch".into()),
        pre_switch_eval_loss: Some(0.2),
        layers,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.jsonl");
    let mut f = std::fs::File::create(&path).unwrap();
    write_record(&mut f, &r).unwrap();
    write_record(&mut f, &MetricRecord { step: 20, event: None, pre_switch_eval_loss: None, ..r.clone() }).unwrap();
    drop(f);
    let back = read_metrics(&path).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back[0], r);
    let text = std::fs::read_to_string(&path).unwrap();
    let second = text.lines().nth(1).unwrap();
    assert!(!second.contains("event") && !second.contains("pre_switch"));
    assert!(second.contains("\"wall_ms\":null"));
}

#[test]
fn config_rejects_unknown_fields_and_bad_values() {
    let good = r#"{
        "model": {"layers": [{"type": "dense", "outputs": 3}, {"type": "softmax_cross_entropy"}]},
        "data": {"kind": "synthetic_blobs", "classes": 3, "dim": 4, "n": 30, "spread": 1.0, "seed": 1}
    }"#;
    let c = Config::from_json(good).unwrap();
    assert_eq!(c.digest(), Config::from_json(good).unwrap().digest());
    let typo = good.replace("\"outputs\"", "\"output\"");
    assert!(matches!(Config::from_json(&typo), Err(Error::Config(_))));
    let neg = good.replace("\"model\"", "\"train\": {\"lr\": -1.0}, \"model\"");
    assert!(Config::from_json(&neg).is_err());
    let crossed = good.replace("\"model\"", "\"train\": {\"reg\": {\"kind\": \"weight_decay\", \"lambda\": 0.1}}, \"model\"");
    assert!(Config::from_json(&crossed).is_err());
}
