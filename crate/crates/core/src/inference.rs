//! Deterministic forward pass and sampled functional-equivalence checks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{Conv2d, Dense, LayerKind, Model, Norm, Tensor};
use crate::rng;
use crate::scalar::Scalar;

/// Output of every layer of one forward pass, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace<S = f32> {
    pub entries: Vec<(u32, Tensor<S>)>,
}

impl<S: Scalar> ActivationTrace<S> {
    pub fn get(&self, layer_id: u32) -> Option<&Tensor<S>> {
        self.entries
            .iter()
            .find(|(id, _)| *id == layer_id)
            .map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last(&self) -> Option<&Tensor<S>> {
        self.entries.last().map(|(_, t)| t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub samples: usize,
    pub max_abs_dev: f64,
    pub tol: f64,
    pub pass: bool,
}

pub const DEFAULT_SAMPLES: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-4;

pub fn forward<S: Scalar>(model: &Model<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let mut outs: Vec<Tensor<S>> = Vec::with_capacity(model.layers.len());
    run(model, 0, x.clone(), &mut outs)
}

pub fn forward_with_trace<S: Scalar>(
    model: &Model<S>,
    x: &Tensor<S>,
) -> Result<(Tensor<S>, ActivationTrace<S>)> {
    let mut outs = Vec::with_capacity(model.layers.len());
    let y = run(model, 0, x.clone(), &mut outs)?;
    let entries = model.layers.iter().map(|l| l.id).zip(outs).collect();
    Ok((y, ActivationTrace { entries }))
}

/// Resumes a pass after layer position `from`, feeding `h` as that layer's
/// output. Residual sources before `from` are read from `trace`.
pub fn forward_suffix<S: Scalar>(
    model: &Model<S>,
    from: usize,
    h: &Tensor<S>,
    trace: &ActivationTrace<S>,
) -> Result<Tensor<S>> {
    let mut outs: Vec<Tensor<S>> = trace.entries[..from].iter().map(|(_, t)| t.clone()).collect();
    outs.push(h.clone());
    run(model, from + 1, h.clone(), &mut outs)
}

fn run<S: Scalar>(
    model: &Model<S>,
    start: usize,
    mut h: Tensor<S>,
    outs: &mut Vec<Tensor<S>>,
) -> Result<Tensor<S>> {
    if start == 0 && h.shape() != model.input_shape.as_slice() {
        return Err(Error::Shape {
            expected: model.input_shape.clone(),
            found: h.shape().to_vec(),
        });
    }
    for l in &model.layers[start..] {
        h = match &l.kind {
            LayerKind::Conv2d(c) => conv2d(c, &h)?,
            LayerKind::Dense(d) => dense(d, &h)?,
            LayerKind::Norm(n) => norm(n, &h)?,
            LayerKind::Relu => h.map(|v| v.max(S::zero())),
            LayerKind::Flatten => {
                let n = h.len();
                h.reshape(vec![n])?
            }
            LayerKind::ResidualAdd { source } => {
                let j = model.index_of(*source).ok_or(Error::UnknownLayer(*source))?;
                let r = &outs[j];
                if r.shape() != h.shape() {
                    return Err(Error::Shape {
                        expected: h.shape().to_vec(),
                        found: r.shape().to_vec(),
                    });
                }
                let data = h.data().iter().zip(r.data()).map(|(&a, &b)| a + b).collect();
                Tensor::new(h.shape().to_vec(), data)?
            }
        };
        outs.push(h.clone());
    }
    Ok(h)
}

pub(crate) fn conv2d<S: Scalar>(c: &Conv2d<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let s = x.shape();
    if s.len() != 3 || s[0] != c.in_ch {
        return Err(Error::Shape {
            expected: vec![c.in_ch, 0, 0],
            found: s.to_vec(),
        });
    }
    let (h, w) = (s[1], s[2]);
    let (oh, ow) = c.out_hw(h, w).ok_or_else(|| Error::Shape {
        expected: vec![c.in_ch, c.kh, c.kw],
        found: s.to_vec(),
    })?;
    let (ph, pw) = (c.pad.0 as isize, c.pad.1 as isize);
    let xd = x.data();
    let wd = c.weight.data();
    let mut out = vec![S::zero(); c.out_ch * oh * ow];
    for o in 0..c.out_ch {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        if let Some(b) = &c.bias {
            plane.iter_mut().for_each(|v| *v = b.data()[o]);
        }
        for ci in 0..c.in_ch {
            let xin = &xd[ci * h * w..(ci + 1) * h * w];
            for ki in 0..c.kh {
                for kj in 0..c.kw {
                    let wv = wd[((o * c.in_ch + ci) * c.kh + ki) * c.kw + kj];
                    for oy in 0..oh {
                        let iy = (oy * c.stride + ki) as isize - ph;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &xin[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        for (ox, acc) in orow.iter_mut().enumerate() {
                            let ix = (ox * c.stride + kj) as isize - pw;
                            if ix >= 0 && ix < w as isize {
                                *acc = *acc + wv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c.out_ch, oh, ow], out)
}

pub(crate) fn dense<S: Scalar>(d: &Dense<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    if x.shape() != [d.inp] {
        return Err(Error::Shape {
            expected: vec![d.inp],
            found: x.shape().to_vec(),
        });
    }
    let xd = x.data();
    let wd = d.weight.data();
    let out = (0..d.out)
        .map(|o| {
            let mut acc = d.bias.as_ref().map_or(S::zero(), |b| b.data()[o]);
            for (&w, &v) in wd[o * d.inp..(o + 1) * d.inp].iter().zip(xd) {
                acc = acc + w * v;
            }
            acc
        })
        .collect();
    Ok(Tensor::from_vec(out))
}

fn norm<S: Scalar>(n: &Norm<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let s = x.shape();
    if s.is_empty() || s[0] != n.channels {
        return Err(Error::Shape {
            expected: vec![n.channels],
            found: s.to_vec(),
        });
    }
    let per = x.len() / n.channels;
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / per;
            n.gamma[c] * (v - n.mean[c]) / n.std[c] + n.beta[c]
        })
        .collect();
    Tensor::new(s.to_vec(), data)
}

/// `n` i.i.d. standard-normal tensors of the given shape.
pub fn gaussian_inputs<S: Scalar>(shape: &[usize], n: usize, seed: u64) -> Vec<Tensor<S>> {
    let mut r = rng::seeded(seed);
    (0..n)
        .map(|_| rng::gaussian_tensor(&mut r, shape.to_vec(), 1.0))
        .collect()
}

/// Largest elementwise output difference of `a` and `b` over the inputs.
pub fn max_deviation<S: Scalar>(a: &Model<S>, b: &Model<S>, inputs: &[Tensor<S>]) -> Result<f64> {
    let mut worst = 0.0f64;
    for x in inputs {
        let ya = forward(a, x)?;
        let yb = forward(b, x)?;
        let d = ya.max_abs_diff(&yb)?.f64();
        if d.is_nan() {
            return Ok(f64::INFINITY);
        }
        worst = worst.max(d);
    }
    Ok(worst)
}

/// Sampled check that `a` and `b` compute the same function: `pass` iff the
/// maximum absolute output deviation on `n` standard-normal inputs is at
/// most `tol`.
pub fn equivalence_check<S: Scalar>(
    a: &Model<S>,
    b: &Model<S>,
    n: usize,
    seed: u64,
    tol: f64,
) -> Result<EquivalenceReport> {
    if a.input_shape != b.input_shape {
        return Err(Error::Shape {
            expected: a.input_shape.clone(),
            found: b.input_shape.clone(),
        });
    }
    let inputs = gaussian_inputs::<S>(&a.input_shape, n, seed);
    let dev = max_deviation(a, b, &inputs)?;
    Ok(EquivalenceReport {
        samples: n,
        max_abs_dev: dev,
        tol,
        pass: dev <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::LayerSpec;

    #[test]
    fn identity_dense_then_relu() {
        let d = Dense::new(Tensor::new(vec![2, 2], vec![1.0f32, 0.0, 0.0, 1.0]).unwrap(), None);
        let m = Model::new(
            vec![2],
            vec![LayerSpec::new(1, LayerKind::Dense(d)), LayerSpec::new(2, LayerKind::Relu)],
        );
        let y = forward(&m, &Tensor::from_vec(vec![3.0, -2.0])).unwrap();
        assert_eq!(y.data(), &[3.0, 0.0]);
    }

    #[test]
    fn one_by_one_conv_doubles() {
        let c = Conv2d::new(Tensor::filled(vec![1, 1, 1, 1], 2.0f32), None, 1, (0, 0));
        let m = Model::new(vec![1, 2, 2], vec![LayerSpec::new(1, LayerKind::Conv2d(c))]);
        let y = forward(&m, &Tensor::filled(vec![1, 2, 2], 1.0)).unwrap();
        assert_eq!(y.data(), &[2.0; 4]);
    }

    #[test]
    fn wrong_input_shape() {
        let m = crate::zoo::mlp::<f32>(&[3, 4, 2], 1);
        assert!(matches!(
            forward(&m, &Tensor::zeros(vec![4])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn relu_is_positively_homogeneous() {
        let z = gaussian_inputs::<f32>(&[64], 1, 3).pop().unwrap();
        for lambda in [0.5f32, 1.0, 2.0, 1024.0] {
            let a = z.map(|v| (lambda * v).max(0.0));
            let b = z.map(|v| lambda * v.max(0.0));
            assert_eq!(a, b);
        }
    }
}
