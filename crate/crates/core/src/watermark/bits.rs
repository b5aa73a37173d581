use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::rng;

/// A non-empty sequence of bits, written as a `0`/`1` string.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitString {
    bits: Vec<bool>,
}

impl BitString {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::InvalidArgument("bit string must not be empty".into()));
        }
        Ok(BitString { bits })
    }

    /// UTF-8 bytes of `text`, most significant bit of each byte first.
    pub fn from_text(text: &str) -> Result<Self> {
        let bits = text
            .bytes()
            .flat_map(|b| (0..8).rev().map(move |i| (b >> i) & 1 == 1))
            .collect();
        Self::new(bits)
    }

    /// Decodes whole bytes back to text, replacing invalid UTF-8.
    pub fn to_text(&self) -> String {
        let bytes: Vec<u8> = self
            .bits
            .chunks_exact(8)
            .map(|c| c.iter().fold(0u8, |acc, &b| (acc << 1) | b as u8))
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn random(len: usize, seed: u64) -> Result<Self> {
        let mut r = rng::seeded(seed);
        Self::new((0..len).map(|_| r.random_bool(0.5)).collect())
    }

    /// Repeats or truncates to exactly `len` bits.
    pub fn cycled(&self, len: usize) -> Result<Self> {
        Self::new(self.bits.iter().copied().cycle().take(len).collect())
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn complement(&self) -> Self {
        BitString {
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn hamming(&self, other: &BitString) -> Result<usize> {
        if self.len() != other.len() {
            return Err(Error::LengthMismatch(self.len(), other.len()));
        }
        Ok(self.bits.iter().zip(&other.bits).filter(|(a, b)| a != b).count())
    }

    /// Thresholds each statistic at zero: positive reads as 1.
    pub fn from_signs(stat: &[f64]) -> Result<Self> {
        Self::new(stat.iter().map(|&v| v > 0.0).collect())
    }
}

impl fmt::Display for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for BitString {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                c => Err(Error::InvalidArgument(format!("{c:?} is not a bit"))),
            })
            .collect::<Result<_>>()?;
        Self::new(bits)
    }
}

impl Serialize for BitString {
    fn serialize<Z: Serializer>(&self, s: Z) -> std::result::Result<Z::Ok, Z::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for BitString {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
