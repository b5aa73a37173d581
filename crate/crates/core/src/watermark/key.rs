use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::io::{read_blob, write_blob};
use crate::ir::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Signs of a random projection of the filter-averaged conv weights.
    Uchida,
    /// Signs of a Norm layer's scale factors.
    SignOfScale,
    /// Signs of greedy top-|w| averages over pooled weight rows.
    Greedy,
    /// Signs of a projection of mean activations on trigger inputs.
    ActivationMean,
    /// Signs of the scales a passport input induces through a conv layer.
    PassportSign,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::Uchida,
        Scheme::SignOfScale,
        Scheme::Greedy,
        Scheme::ActivationMean,
        Scheme::PassportSign,
    ];

    /// Published decision thresholds on raw BER.
    pub fn default_theta(self) -> f64 {
        match self {
            Scheme::Uchida => 0.4386,
            Scheme::SignOfScale => 0.4196,
            Scheme::Greedy => 0.4377,
            Scheme::ActivationMean => 0.4268,
            Scheme::PassportSign => 0.4626,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Uchida => "uchida",
            Scheme::SignOfScale => "sign_of_scale",
            Scheme::Greedy => "greedy",
            Scheme::ActivationMean => "activation_mean",
            Scheme::PassportSign => "passport_sign",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Scheme::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| {
                let names: Vec<_> = Scheme::ALL.iter().map(|k| k.name()).collect();
                Error::InvalidArgument(format!("unknown scheme {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// Everything the owner needs to extract a watermark.
#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkKey {
    pub scheme: Scheme,
    pub target_layer_ids: Vec<u32>,
    /// Message length `b`.
    pub bits: usize,
    pub seed: u64,
    /// `[b, cols]` projection (Uchida: X, ActivationMean: A).
    pub transform: Option<Tensor<f64>>,
    /// Greedy keep ratio.
    pub eta: Option<f64>,
    /// Passport input `[in_ch, h, w]` of the target conv.
    pub passport: Option<Tensor<f64>>,
    /// Trigger inputs of the model's input shape.
    pub triggers: Vec<Tensor<f64>>,
    /// Width of every Conv2D/Dense layer when the key was made.
    pub expected_widths: BTreeMap<u32, usize>,
}

const KEY_FILE: &str = "key.json";
const KEY_FORMAT: &str = "neurofuscate-key";

#[derive(Serialize, Deserialize)]
struct KeyManifest {
    format: String,
    version: u32,
    dtype: String,
    endianness: String,
    scheme: Scheme,
    target_layer_ids: Vec<u32>,
    bits: usize,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eta: Option<f64>,
    expected_widths: BTreeMap<u32, usize>,
    tensors: BTreeMap<String, BlobRef>,
}

#[derive(Serialize, Deserialize)]
struct BlobRef {
    file: String,
    shape: Vec<usize>,
}

impl WatermarkKey {
    pub fn target(&self) -> Result<u32> {
        self.target_layer_ids
            .first()
            .copied()
            .ok_or_else(|| Error::InvalidArgument("key names no target layer".into()))
    }

    /// Writes `key.json` plus one little-endian f64 blob per tensor.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors = BTreeMap::new();
        let mut put = |name: String, t: &Tensor<f64>| -> Result<()> {
            let file = format!("{name}.bin");
            write_blob(&dir.join(&file), t.data())?;
            tensors.insert(
                name,
                BlobRef {
                    file,
                    shape: t.shape().to_vec(),
                },
            );
            Ok(())
        };
        if let Some(t) = &self.transform {
            put("transform".into(), t)?;
        }
        if let Some(t) = &self.passport {
            put("passport".into(), t)?;
        }
        for (i, t) in self.triggers.iter().enumerate() {
            put(format!("trigger_{i:03}"), t)?;
        }
        let m = KeyManifest {
            format: KEY_FORMAT.into(),
            version: 1,
            dtype: "f64".into(),
            endianness: "little".into(),
            scheme: self.scheme,
            target_layer_ids: self.target_layer_ids.clone(),
            bits: self.bits,
            seed: self.seed,
            eta: self.eta,
            expected_widths: self.expected_widths.clone(),
            tensors,
        };
        let path = dir.join(KEY_FILE);
        fs::write(&path, serde_json::to_string_pretty(&m)? + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(KEY_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: KeyManifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if m.format != KEY_FORMAT || m.dtype != "f64" || m.endianness != "little" {
            return Err(Error::format(&path, "not a little-endian f64 watermark key"));
        }
        let get = |name: &str| -> Result<Option<Tensor<f64>>> {
            m.tensors
                .get(name)
                .map(|b| read_blob(&dir.join(&b.file), &b.shape, 8))
                .transpose()
        };
        let mut triggers = Vec::new();
        for name in m.tensors.keys().filter(|k| k.starts_with("trigger_")) {
            triggers.extend(get(name)?);
        }
        Ok(WatermarkKey {
            scheme: m.scheme,
            target_layer_ids: m.target_layer_ids,
            bits: m.bits,
            seed: m.seed,
            transform: get("transform")?,
            eta: m.eta,
            passport: get("passport")?,
            triggers,
            expected_widths: m.expected_widths,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scheme_names_parse() {
        for s in Scheme::ALL {
            assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
        }
        assert_eq!("sign-of-scale".parse::<Scheme>().unwrap(), Scheme::SignOfScale);
        assert!("qr".parse::<Scheme>().is_err());
    }

    #[test]
    fn key_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let key = WatermarkKey {
            scheme: Scheme::ActivationMean,
            target_layer_ids: vec![7],
            bits: 2,
            seed: 5,
            transform: Some(Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.2, 0.3]).unwrap()),
            eta: None,
            passport: None,
            triggers: (0..11).map(|i| Tensor::filled(vec![1, 2, 2], i as f64)).collect(),
            expected_widths: [(1, 4), (7, 3)].into_iter().collect(),
        };
        key.save(dir.path()).unwrap();
        assert_eq!(WatermarkKey::load(dir.path()).unwrap(), key);
    }
}
