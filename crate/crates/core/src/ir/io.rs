//! On-disk model format: a directory holding `manifest.json` plus one raw
//! little-endian blob per tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Conv2d, Dense, LayerKind, LayerSpec, LayerTag, Model, Norm, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "neurofuscate-model";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    dtype: String,
    endianness: String,
    input_shape: Vec<usize>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    layers: Vec<LayerEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    id: u32,
    kind: LayerTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pad: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<u32>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    file: String,
    shape: Vec<usize>,
}

/// Writes `model` to directory `dir`, creating it if needed. Existing
/// blobs of the same names are overwritten.
pub fn save<S: Scalar>(model: &Model<S>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut layers = Vec::with_capacity(model.layers.len());
    for l in &model.layers {
        let mut e = LayerEntry {
            id: l.id,
            kind: l.kind.tag(),
            stride: None,
            pad: None,
            source: None,
            tensors: BTreeMap::new(),
        };
        let mut put = |name: &str, t: &Tensor<S>| -> Result<()> {
            let file = format!("{}_{name}.bin", l.id);
            write_blob(&dir.join(&file), t.data())?;
            e.tensors.insert(
                name.to_string(),
                TensorEntry {
                    file,
                    shape: t.shape().to_vec(),
                },
            );
            Ok(())
        };
        match &l.kind {
            LayerKind::Conv2d(c) => {
                put("weight", &c.weight)?;
                if let Some(b) = &c.bias {
                    put("bias", b)?;
                }
                e.stride = Some(c.stride);
                e.pad = Some([c.pad.0, c.pad.1]);
            }
            LayerKind::Dense(d) => {
                put("weight", &d.weight)?;
                if let Some(b) = &d.bias {
                    put("bias", b)?;
                }
            }
            LayerKind::Norm(n) => {
                put("gamma", &Tensor::from_vec(n.gamma.clone()))?;
                put("beta", &Tensor::from_vec(n.beta.clone()))?;
                put("mean", &Tensor::from_vec(n.mean.clone()))?;
                put("std", &Tensor::from_vec(n.std.clone()))?;
            }
            LayerKind::ResidualAdd { source } => e.source = Some(*source),
            LayerKind::Relu | LayerKind::Flatten => {}
        }
        layers.push(e);
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        dtype: S::DTYPE.into(),
        endianness: "little".into(),
        input_shape: model.input_shape.clone(),
        metadata: model.metadata.clone(),
        layers,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

/// Reads a model directory. Blobs stored as `f32` or `f64` are converted
/// to `S`; the loaded model is validated before it is returned.
pub fn load<S: Scalar>(dir: impl AsRef<Path>) -> Result<Model<S>> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.format != FORMAT {
        return Err(Error::format(&path, format!("unknown format {:?}", m.format)));
    }
    if m.version != VERSION {
        return Err(Error::format(&path, format!("unsupported version {}", m.version)));
    }
    if m.endianness != "little" {
        return Err(Error::format(&path, format!("unsupported endianness {:?}", m.endianness)));
    }
    let width = match m.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::format(&path, format!("unsupported dtype {other:?}"))),
    };

    let mut layers = Vec::with_capacity(m.layers.len());
    for e in &m.layers {
        let get = |name: &str| -> Result<Tensor<S>> {
            let t = e.tensors.get(name).ok_or_else(|| {
                Error::format(&path, format!("layer {} lacks tensor {name:?}", e.id))
            })?;
            read_blob(&dir.join(&t.file), &t.shape, width)
        };
        let opt = |name: &str| -> Result<Option<Tensor<S>>> {
            if e.tensors.contains_key(name) {
                get(name).map(Some)
            } else {
                Ok(None)
            }
        };
        let rank = |t: &Tensor<S>, r: usize, name: &str| -> Result<()> {
            if t.shape().len() == r {
                Ok(())
            } else {
                Err(Error::format(
                    &path,
                    format!("layer {} tensor {name:?} has rank {}, expected {r}", e.id, t.shape().len()),
                ))
            }
        };
        let kind = match e.kind {
            LayerTag::Conv2d => {
                let w = get("weight")?;
                rank(&w, 4, "weight")?;
                let pad = e.pad.unwrap_or([0, 0]);
                LayerKind::Conv2d(Conv2d::new(w, opt("bias")?, e.stride.unwrap_or(1), (pad[0], pad[1])))
            }
            LayerTag::Dense => {
                let w = get("weight")?;
                rank(&w, 2, "weight")?;
                LayerKind::Dense(Dense::new(w, opt("bias")?))
            }
            LayerTag::Norm => {
                let gamma = get("gamma")?.into_data();
                LayerKind::Norm(Norm {
                    channels: gamma.len(),
                    gamma,
                    beta: get("beta")?.into_data(),
                    mean: get("mean")?.into_data(),
                    std: get("std")?.into_data(),
                })
            }
            LayerTag::Relu => LayerKind::Relu,
            LayerTag::Flatten => LayerKind::Flatten,
            LayerTag::ResidualAdd => LayerKind::ResidualAdd {
                source: e.source.ok_or_else(|| {
                    Error::format(&path, format!("residual layer {} lacks source", e.id))
                })?,
            },
        };
        layers.push(LayerSpec::new(e.id, kind));
    }
    let mut model = Model::new(m.input_shape, layers);
    model.metadata = m.metadata;
    model.ensure_valid()?;
    Ok(model)
}

pub(crate) fn write_blob<S: Scalar>(path: &Path, data: &[S]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * S::WIDTH);
    for &v in data {
        v.write_le(&mut buf);
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_blob<S: Scalar>(path: &Path, shape: &[usize], width: usize) -> Result<Tensor<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = shape.iter().product();
    if bytes.len() != n * width {
        return Err(Error::format(
            path,
            format!("expected {} bytes for shape {shape:?}, found {}", n * width, bytes.len()),
        ));
    }
    let data: Vec<S> = bytes
        .chunks_exact(width)
        .map(|c| match width {
            4 => S::of(f32::read_le(c) as f64),
            _ => S::of(f64::read_le(c)),
        })
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(path, format!("non-finite value at element {i}")));
    }
    Tensor::new(shape.to_vec(), data).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = zoo::residual_cnn::<f32>(4);
        save(&m, dir.path()).unwrap();
        let back: Model<f32> = load(dir.path()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn f64_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = zoo::norm_cnn::<f64>(4);
        save(&m, dir.path()).unwrap();
        assert_eq!(m, load::<f64>(dir.path()).unwrap());
    }

    #[test]
    fn truncated_blob_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let m = zoo::mlp::<f32>(&[3, 4, 2], 0);
        save(&m, dir.path()).unwrap();
        let blob = dir.path().join("1_weight.bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
        let err = load::<f32>(dir.path()).unwrap_err().to_string();
        assert!(err.contains("1_weight.bin"), "{err}");
    }

    #[test]
    fn missing_blob_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        save(&zoo::mlp::<f32>(&[3, 4, 2], 0), dir.path()).unwrap();
        fs::remove_file(dir.path().join("3_bias.bin")).unwrap();
        assert!(matches!(load::<f32>(dir.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn corrupt_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        save(&zoo::mlp::<f32>(&[3, 4, 2], 0), dir.path()).unwrap();
        fs::write(dir.path().join(MANIFEST), "{\"layers\": 3").unwrap();
        assert!(matches!(load::<f32>(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn non_finite_value_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save(&zoo::mlp::<f32>(&[3, 4, 2], 0), dir.path()).unwrap();
        let blob = dir.path().join("1_bias.bin");
        let mut bytes = fs::read(&blob).unwrap();
        bytes[..4].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&blob, bytes).unwrap();
        let err = load::<f32>(dir.path()).unwrap_err().to_string();
        assert!(err.contains("non-finite"), "{err}");
    }
}
