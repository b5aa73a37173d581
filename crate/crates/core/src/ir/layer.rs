use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::scalar::Scalar;

/// 2-D cross-correlation with weight `[out_ch, in_ch, kh, kw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<S = f32> {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    /// Zero padding on (height, width), applied to both sides.
    pub pad: (usize, usize),
    pub weight: Tensor<S>,
    pub bias: Option<Tensor<S>>,
}

/// Fully-connected layer with weight `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<S = f32> {
    pub out: usize,
    pub inp: usize,
    pub weight: Tensor<S>,
    pub bias: Option<Tensor<S>>,
}

/// Per-channel affine normalization `gamma * (x - mean) / std + beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct Norm<S = f32> {
    pub channels: usize,
    pub gamma: Vec<S>,
    pub beta: Vec<S>,
    pub mean: Vec<S>,
    pub std: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind<S = f32> {
    Conv2d(Conv2d<S>),
    Dense(Dense<S>),
    Norm(Norm<S>),
    Relu,
    Flatten,
    /// Adds the output of an earlier layer to the running activation.
    ResidualAdd { source: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec<S = f32> {
    pub id: u32,
    pub kind: LayerKind<S>,
}

/// Discriminant-only view of a layer, used in manifests and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerTag {
    Conv2d,
    Dense,
    Norm,
    Relu,
    Flatten,
    ResidualAdd,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(weight: Tensor<S>, bias: Option<Tensor<S>>, stride: usize, pad: (usize, usize)) -> Self {
        let s = weight.shape();
        let (out_ch, in_ch, kh, kw) = (s[0], s[1], s[2], s[3]);
        Conv2d {
            out_ch,
            in_ch,
            kh,
            kw,
            stride,
            pad,
            weight,
            bias,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.pad.0;
        let pw = w + 2 * self.pad.1;
        if self.stride == 0 || ph < self.kh || pw < self.kw {
            return None;
        }
        Some(((ph - self.kh) / self.stride + 1, (pw - self.kw) / self.stride + 1))
    }
}

impl<S: Scalar> Dense<S> {
    pub fn new(weight: Tensor<S>, bias: Option<Tensor<S>>) -> Self {
        let s = weight.shape();
        Dense {
            out: s[0],
            inp: s[1],
            weight,
            bias,
        }
    }
}

impl<S: Scalar> Norm<S> {
    pub fn identity(channels: usize) -> Self {
        Norm {
            channels,
            gamma: vec![S::one(); channels],
            beta: vec![S::zero(); channels],
            mean: vec![S::zero(); channels],
            std: vec![S::one(); channels],
        }
    }

    /// Slope and offset of channel `c` as an affine map.
    pub fn affine(&self, c: usize) -> (S, S) {
        let a = self.gamma[c] / self.std[c];
        (a, self.beta[c] - a * self.mean[c])
    }
}

impl<S: Scalar> LayerKind<S> {
    pub fn tag(&self) -> LayerTag {
        match self {
            LayerKind::Conv2d(_) => LayerTag::Conv2d,
            LayerKind::Dense(_) => LayerTag::Dense,
            LayerKind::Norm(_) => LayerTag::Norm,
            LayerKind::Relu => LayerTag::Relu,
            LayerKind::Flatten => LayerTag::Flatten,
            LayerKind::ResidualAdd { .. } => LayerTag::ResidualAdd,
        }
    }

    /// Conv2D and Dense layers own neurons; everything else is plumbing.
    pub fn is_neural(&self) -> bool {
        matches!(self, LayerKind::Conv2d(_) | LayerKind::Dense(_))
    }

    pub fn weight(&self) -> Option<&Tensor<S>> {
        match self {
            LayerKind::Conv2d(c) => Some(&c.weight),
            LayerKind::Dense(d) => Some(&d.weight),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&Tensor<S>> {
        match self {
            LayerKind::Conv2d(c) => c.bias.as_ref(),
            LayerKind::Dense(d) => d.bias.as_ref(),
            _ => None,
        }
    }

    /// Number of output neurons (filters or units).
    pub fn out_width(&self) -> Option<usize> {
        match self {
            LayerKind::Conv2d(c) => Some(c.out_ch),
            LayerKind::Dense(d) => Some(d.out),
            _ => None,
        }
    }
}

impl<S: Scalar> LayerSpec<S> {
    pub fn new(id: u32, kind: LayerKind<S>) -> Self {
        LayerSpec { id, kind }
    }
}

impl std::fmt::Display for LayerTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LayerTag::Conv2d => "conv2d",
            LayerTag::Dense => "dense",
            LayerTag::Norm => "norm",
            LayerTag::Relu => "relu",
            LayerTag::Flatten => "flatten",
            LayerTag::ResidualAdd => "residual_add",
        };
        f.write_str(s)
    }
}
