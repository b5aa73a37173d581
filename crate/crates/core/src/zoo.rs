//! Seeded fixture models.
//!
//! Weights are He-scaled Gaussians; nothing here is trained. Layer ids are
//! assigned 1, 2, 3, ... in layer order.

use rand::Rng;

use crate::ir::{Conv2d, Dense, LayerKind, LayerSpec, Model, Norm, Tensor};
use crate::rng::{self, Rng64};
use crate::scalar::Scalar;

struct Builder<S> {
    rng: Rng64,
    layers: Vec<LayerSpec<S>>,
}

impl<S: Scalar> Builder<S> {
    fn new(seed: u64) -> Self {
        Builder {
            rng: rng::seeded(seed),
            layers: Vec::new(),
        }
    }

    fn push(&mut self, kind: LayerKind<S>) -> u32 {
        let id = self.layers.len() as u32 + 1;
        self.layers.push(LayerSpec::new(id, kind));
        id
    }

    fn conv(&mut self, inp: usize, out: usize, k: usize, stride: usize, bias: bool) -> u32 {
        let std = (2.0 / (inp * k * k) as f64).sqrt();
        let w = rng::gaussian_tensor(&mut self.rng, vec![out, inp, k, k], std);
        let b = bias.then(|| rng::gaussian_tensor(&mut self.rng, vec![out], 0.1));
        self.push(LayerKind::Conv2d(Conv2d::new(w, b, stride, (k / 2, k / 2))))
    }

    fn dense(&mut self, inp: usize, out: usize) -> u32 {
        let std = (2.0 / inp as f64).sqrt();
        let w = rng::gaussian_tensor(&mut self.rng, vec![out, inp], std);
        let b = rng::gaussian_tensor(&mut self.rng, vec![out], 0.1);
        self.push(LayerKind::Dense(Dense::new(w, Some(b))))
    }

    fn norm(&mut self, c: usize) -> u32 {
        let r = &mut self.rng;
        let gamma = rng::gaussian_vec(r, c, 1.0, 0.25);
        let beta = rng::gaussian_vec(r, c, 0.0, 0.1);
        let mean = rng::gaussian_vec(r, c, 0.0, 0.1);
        let std = (0..c)
            .map(|_| S::of(r.random_range(0.5..1.5)))
            .collect();
        self.push(LayerKind::Norm(Norm {
            channels: c,
            gamma,
            beta,
            mean,
            std,
        }))
    }

    fn relu(&mut self) -> u32 {
        self.push(LayerKind::Relu)
    }

    fn flatten(&mut self) -> u32 {
        self.push(LayerKind::Flatten)
    }

    fn finish(self, input: Vec<usize>, name: &str) -> Model<S> {
        let mut m = Model::new(input, self.layers);
        m.metadata.insert("fixture".into(), name.into());
        m
    }
}

/// Dense ReLU network with the given layer widths (input first).
pub fn mlp<S: Scalar>(widths: &[usize], seed: u64) -> Model<S> {
    assert!(widths.len() >= 2, "an MLP needs an input and an output width");
    let mut b = Builder::new(seed);
    for (i, w) in widths.windows(2).enumerate() {
        b.dense(w[0], w[1]);
        if i + 2 < widths.len() {
            b.relu();
        }
    }
    b.finish(vec![widths[0]], "mlp")
}

/// `1x16x16 -> conv3x3(8) -> relu -> conv3x3(8) -> relu -> flatten -> dense(4)`.
pub fn small_cnn<S: Scalar>(seed: u64) -> Model<S> {
    let mut b = Builder::new(seed);
    b.conv(1, 8, 3, 1, false);
    b.relu();
    b.conv(8, 8, 3, 1, false);
    b.relu();
    b.flatten();
    b.dense(8 * 16 * 16, 4);
    b.finish(vec![1, 16, 16], "small_cnn")
}

/// CNN with a Norm after each conv and a strided second conv.
pub fn norm_cnn<S: Scalar>(seed: u64) -> Model<S> {
    let mut b = Builder::new(seed);
    b.conv(3, 8, 3, 1, false);
    b.norm(8);
    b.relu();
    b.conv(8, 8, 3, 2, false);
    b.norm(8);
    b.relu();
    b.flatten();
    b.dense(8 * 4 * 4, 10);
    b.finish(vec![3, 8, 8], "norm_cnn")
}

/// Two-block residual CNN: the stem conv and the second block conv share a
/// channel space through the skip connection.
pub fn residual_cnn<S: Scalar>(seed: u64) -> Model<S> {
    let mut b = Builder::new(seed);
    b.conv(2, 8, 3, 1, true);
    let stem = b.relu();
    b.conv(8, 8, 3, 1, false);
    b.norm(8);
    b.relu();
    b.conv(8, 8, 3, 1, false);
    b.norm(8);
    b.push(LayerKind::ResidualAdd { source: stem });
    b.relu();
    b.flatten();
    b.dense(8 * 8 * 8, 4);
    b.finish(vec![2, 8, 8], "residual_cnn")
}

/// Ids of the layers the watermark schemes target in [`watermark_host`].
pub mod host {
    pub const CONV: u32 = 3;
    pub const NORM: u32 = 4;
    pub const DENSE: u32 = 7;
}

/// Host network for watermarking experiments:
/// `3x8x8 -> conv(16) -> relu -> conv(64) -> norm -> relu -> flatten ->
/// dense(64) -> relu -> dense(10)`.
pub fn watermark_host<S: Scalar>(seed: u64) -> Model<S> {
    let mut b = Builder::new(seed);
    b.conv(3, 16, 3, 1, false);
    b.relu();
    b.conv(16, 64, 3, 1, false);
    b.norm(64);
    b.relu();
    b.flatten();
    b.dense(64 * 8 * 8, 64);
    b.relu();
    b.dense(64, 10);
    b.finish(vec![3, 8, 8], "watermark_host")
}

/// Looks a fixture up by name, for the command line.
pub fn by_name<S: Scalar>(name: &str, seed: u64) -> Option<Model<S>> {
    Some(match name {
        "mlp" => mlp(&[8, 32, 32, 16, 4], seed),
        "small_cnn" => small_cnn(seed),
        "norm_cnn" => norm_cnn(seed),
        "residual_cnn" => residual_cnn(seed),
        "watermark_host" => watermark_host(seed),
        _ => return None,
    })
}

pub const NAMES: &[&str] = &["mlp", "small_cnn", "norm_cnn", "residual_cnn", "watermark_host"];

/// A tensor of the model's input shape filled from a seed.
pub fn sample_input<S: Scalar>(model: &Model<S>, seed: u64) -> Tensor<S> {
    rng::gaussian_tensor(&mut rng::seeded(seed), model.input_shape.clone(), 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_validate() {
        for name in NAMES {
            let m = by_name::<f32>(name, 7).unwrap();
            assert_eq!(m.validate(), vec![], "{name}");
        }
    }

    #[test]
    fn fixtures_are_seeded() {
        assert_eq!(small_cnn::<f32>(1), small_cnn::<f32>(1));
        assert_ne!(small_cnn::<f32>(1), small_cnn::<f32>(2));
    }
}
