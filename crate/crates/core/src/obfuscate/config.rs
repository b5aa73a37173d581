use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Zero,
    Clique,
    Split,
}

impl Primitive {
    pub const ALL: [Primitive; 3] = [Primitive::Zero, Primitive::Clique, Primitive::Split];
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Primitive::Zero => "zero",
            Primitive::Clique => "clique",
            Primitive::Split => "split",
        })
    }
}

/// Which weights of a NeuronZero dummy are zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroSide {
    Incoming,
    Outgoing,
    /// Chosen per group by the campaign RNG.
    Random,
}

/// Relative frequency of each primitive in a campaign.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mix {
    pub zero: f64,
    pub clique: f64,
    pub split: f64,
}

impl Mix {
    pub fn only(p: Primitive) -> Self {
        let mut m = Mix {
            zero: 0.0,
            clique: 0.0,
            split: 0.0,
        };
        *m.weight_mut(p) = 1.0;
        m
    }

    pub fn weight(&self, p: Primitive) -> f64 {
        match p {
            Primitive::Zero => self.zero,
            Primitive::Clique => self.clique,
            Primitive::Split => self.split,
        }
    }

    fn weight_mut(&mut self, p: Primitive) -> &mut f64 {
        match p {
            Primitive::Zero => &mut self.zero,
            Primitive::Clique => &mut self.clique,
            Primitive::Split => &mut self.split,
        }
    }

    fn validate(&self) -> Result<()> {
        let w = [self.zero, self.clique, self.split];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(format!("mix weights must be non-negative: {self}")));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("mix weights sum to {sum}, not 1")));
        }
        Ok(())
    }
}

impl Default for Mix {
    fn default() -> Self {
        Mix {
            zero: 0.0,
            clique: 0.5,
            split: 0.5,
        }
    }
}

impl fmt::Display for Mix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.zero, self.clique, self.split)
    }
}

/// Parses `zero:clique:split`, e.g. `0:1:1`. Weights are normalized.
impl FromStr for Mix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidArgument(format!("mix {s:?}: {e}")))?;
        let [z, c, sp] = parts[..] else {
            return Err(Error::InvalidArgument(format!(
                "mix {s:?} must have three fields zero:clique:split"
            )));
        };
        let sum = z + c + sp;
        if sum.is_nan() || sum <= 0.0 || [z, c, sp].iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidArgument(format!("mix {s:?} needs non-negative weights with a positive sum")));
        }
        let m = Mix {
            zero: z / sum,
            clique: c / sum,
            split: sp / sum,
        };
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObfuscationConfig {
    /// Dummy neurons added per hidden layer, as a fraction of its width.
    pub alpha: f64,
    pub mix: Mix,
    pub clique_sizes: Vec<usize>,
    pub split_sizes: Vec<usize>,
    /// Group sizes for NeuronZero.
    pub zero_sizes: Vec<usize>,
    pub zero_side: ZeroSide,
    /// Range of the log-uniform rescaling factor.
    pub scale_range: (f64, f64),
    pub rescale: bool,
    pub permute: bool,
    /// Grow every conv kernel by this many taps per side, zero padded.
    pub kernel_growth: usize,
    pub seed: u64,
}

impl Default for ObfuscationConfig {
    fn default() -> Self {
        ObfuscationConfig {
            alpha: 0.05,
            mix: Mix::default(),
            clique_sizes: vec![2, 3, 4],
            split_sizes: vec![1, 2, 3],
            zero_sizes: vec![1, 2, 3],
            zero_side: ZeroSide::Incoming,
            scale_range: (0.5, 2.0),
            rescale: true,
            permute: true,
            kernel_growth: 0,
            seed: 0,
        }
    }
}

impl ObfuscationConfig {
    pub fn new(alpha: f64, mix: Mix, seed: u64) -> Self {
        ObfuscationConfig {
            alpha,
            mix,
            seed,
            ..Default::default()
        }
    }

    /// Disables rescaling, permutation and kernel growth.
    pub fn without_camouflage(mut self) -> Self {
        self.rescale = false;
        self.permute = false;
        self.kernel_growth = 0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!("alpha {} outside (0, 1]", self.alpha)));
        }
        self.mix.validate()?;
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidArgument(format!("scale range ({lo}, {hi}) invalid")));
        }
        let check = |name: &str, sizes: &[usize], min: usize| {
            if sizes.is_empty() || sizes.iter().any(|&d| d < min) {
                Err(Error::InvalidArgument(format!("{name} sizes must be non-empty and >= {min}")))
            } else {
                Ok(())
            }
        };
        check("clique", &self.clique_sizes, 2)?;
        check("split", &self.split_sizes, 1)?;
        check("zero", &self.zero_sizes, 1)
    }

    /// Number of dummies added to a layer of width `n`: `ceil(alpha * n)`.
    pub fn count_for(&self, n: usize) -> usize {
        // Guard against 0.1 * 30 = 3.0000000000000004 rounding up to 4.
        let x = self.alpha * n as f64;
        (x - 1e-9).ceil().max(0.0) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_parses_and_normalizes() {
        let m: Mix = "0:1:1".parse().unwrap();
        assert_eq!(m, Mix { zero: 0.0, clique: 0.5, split: 0.5 });
        assert!("1:2".parse::<Mix>().is_err());
        assert!("0:0:0".parse::<Mix>().is_err());
        assert!("-1:1:1".parse::<Mix>().is_err());
    }

    #[test]
    fn counts_round_up() {
        let c = ObfuscationConfig::new(0.05, Mix::default(), 0);
        assert_eq!(c.count_for(8), 1);
        assert_eq!(c.count_for(64), 4);
        assert_eq!(ObfuscationConfig::new(0.1, Mix::default(), 0).count_for(30), 3);
    }

    #[test]
    fn rejects_bad_alpha() {
        assert!(ObfuscationConfig::new(0.0, Mix::default(), 0).validate().is_err());
        assert!(ObfuscationConfig::new(1.5, Mix::default(), 0).validate().is_err());
        assert!(ObfuscationConfig::new(1.0, Mix::default(), 0).validate().is_ok());
    }
}
