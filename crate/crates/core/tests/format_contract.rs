//! The on-disk model format as an external exporter would write it: a
//! hand-written manifest plus raw little-endian blobs.

use std::fs;
use std::path::Path;

use neurofuscate::{forward, load, Error, Model32, Model64, Tensor};

fn f32_blob(dir: &Path, name: &str, v: &[f32]) {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    fs::write(dir.join(name), bytes).unwrap();
}

fn f64_blob(dir: &Path, name: &str, v: &[f64]) {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    fs::write(dir.join(name), bytes).unwrap();
}

const MLP: &str = r#"{
  "format": "neurofuscate-model",
  "version": 1,
  "dtype": "f32",
  "endianness": "little",
  "input_shape": [2],
  "metadata": {"source": "hand"},
  "layers": [
    {"id": 10, "kind": "dense", "tensors": {
      "weight": {"file": "a.bin", "shape": [2, 2]},
      "bias": {"file": "b.bin", "shape": [2]}}},
    {"id": 11, "kind": "relu"},
    {"id": 12, "kind": "dense", "tensors": {
      "weight": {"file": "c.bin", "shape": [1, 2]}}}
  ]
}"#;

fn write_mlp(dir: &Path) {
    fs::write(dir.join("manifest.json"), MLP).unwrap();
    f32_blob(dir, "a.bin", &[1.0, -1.0, 0.5, 2.0]);
    f32_blob(dir, "b.bin", &[0.0, -1.0]);
    f32_blob(dir, "c.bin", &[3.0, -2.0]);
}

#[test]
fn hand_written_mlp_loads_and_runs() {
    let dir = tempfile::tempdir().unwrap();
    write_mlp(dir.path());
    let m: Model32 = load(dir.path()).unwrap();
    assert_eq!(m.metadata["source"], "hand");
    // x = (1, 2): h = relu(-1, 3.5) = (0, 3.5); y = -7.
    let y = forward(&m, &Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    assert_eq!(y.data(), &[-7.0]);
}

#[test]
fn f32_blobs_widen_to_f64() {
    let dir = tempfile::tempdir().unwrap();
    write_mlp(dir.path());
    let m: Model64 = load(dir.path()).unwrap();
    let y = forward(&m, &Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    assert_eq!(y.data(), &[-7.0]);
}

#[test]
fn conv_with_norm_and_padding() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = r#"{
      "format": "neurofuscate-model", "version": 1, "dtype": "f64", "endianness": "little",
      "input_shape": [1, 2, 2],
      "layers": [
        {"id": 1, "kind": "conv2d", "stride": 1, "pad": [1, 1], "tensors": {
          "weight": {"file": "w.bin", "shape": [1, 1, 3, 3]}}},
        {"id": 2, "kind": "norm", "tensors": {
          "gamma": {"file": "g.bin", "shape": [1]}, "beta": {"file": "be.bin", "shape": [1]},
          "mean": {"file": "mu.bin", "shape": [1]}, "std": {"file": "sd.bin", "shape": [1]}}},
        {"id": 3, "kind": "flatten"}
      ]
    }"#;
    fs::write(dir.path().join("manifest.json"), manifest).unwrap();
    f64_blob(dir.path(), "w.bin", &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    f64_blob(dir.path(), "g.bin", &[2.0]);
    f64_blob(dir.path(), "be.bin", &[1.0]);
    f64_blob(dir.path(), "mu.bin", &[0.5]);
    f64_blob(dir.path(), "sd.bin", &[0.5]);
    let m: Model64 = load(dir.path()).unwrap();
    // Each output is x[i][j] + x[i][j+1] (zero beyond the edge).
    let y = forward(&m, &Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    let conv = [3.0, 2.0, 7.0, 4.0];
    let want: Vec<f64> = conv.iter().map(|c| 2.0 * (c - 0.5) / 0.5 + 1.0).collect();
    assert_eq!(y.data(), &want[..]);
}

fn edit_manifest(dir: &Path, from: &str, to: &str) {
    let p = dir.join("manifest.json");
    let s = fs::read_to_string(&p).unwrap().replace(from, to);
    fs::write(p, s).unwrap();
}

#[test]
fn rejects_foreign_headers() {
    for (from, to) in [
        (r#""endianness": "little""#, r#""endianness": "big""#),
        (r#""version": 1"#, r#""version": 2"#),
        (r#""dtype": "f32""#, r#""dtype": "f16""#),
        (r#""format": "neurofuscate-model""#, r#""format": "onnx""#),
        (r#""kind": "relu""#, r#""kind": "gelu""#),
    ] {
        let dir = tempfile::tempdir().unwrap();
        write_mlp(dir.path());
        edit_manifest(dir.path(), from, to);
        assert!(matches!(load::<f32>(dir.path()), Err(Error::Format { .. })), "{to}");
    }
}

#[test]
fn shape_disagreeing_with_graph_is_invalid() {
    let dir = tempfile::tempdir().unwrap();
    write_mlp(dir.path());
    edit_manifest(dir.path(), r#""shape": [1, 2]"#, r#""shape": [2, 1]"#);
    assert!(load::<f32>(dir.path()).is_err());
}
