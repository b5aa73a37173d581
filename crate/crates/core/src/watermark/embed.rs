//! Watermark embedding by gradient descent on a sign-readout loss.
//!
//! Every supported statistic is linear in the target parameters (Greedy is
//! piecewise linear), so gradients are exact and the step size follows from
//! the Lipschitz constant of the loss.

use serde::{Deserialize, Serialize};

use super::extract::{
    filter_mean, greedy_geometry, greedy_rows, matvec, neural_weight, passport_patch, patch_mean, to_f64,
};
use super::{extract, statistic, BitString, Scheme, WatermarkKey};
use crate::error::{Error, Result};
use crate::inference::{forward_with_trace, gaussian_inputs};
use crate::ir::{LayerKind, Model, Tensor, Topology};
use crate::rng;
use crate::scalar::Scalar;

pub const TRIGGERS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    /// Weight of the watermark loss.
    pub lambda_wmk: f64,
    /// Weight of the L2 pull towards the starting parameters.
    pub anchor: f64,
    /// Step size as a fraction of `1 / Lipschitz`.
    pub step_size: f64,
    pub max_steps: usize,
    /// Every statistic must clear zero by this much, on the right side.
    pub margin: f64,
    /// Greedy keep ratio.
    pub eta: f64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            lambda_wmk: 1.0,
            anchor: 0.01,
            step_size: 0.1,
            max_steps: 20_000,
            margin: 0.1,
            eta: 0.5,
        }
    }
}

impl EmbedConfig {
    fn validate(&self) -> Result<()> {
        let pos = [self.lambda_wmk, self.step_size, self.margin];
        if pos.iter().any(|v| *v <= 0.0 || !v.is_finite()) || self.anchor.is_nan() || self.anchor < 0.0 || self.max_steps == 0 {
            return Err(Error::InvalidArgument("embedding hyperparameters must be positive".into()));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::InvalidArgument(format!("eta {} outside (0, 1]", self.eta)));
        }
        Ok(())
    }
}

/// Layer a scheme targets by default: the last conv fed by another conv
/// for weight schemes, the last Norm for sign-of-scale, the last hidden
/// Conv2D/Dense for activations.
pub fn default_target<S: Scalar>(model: &Model<S>, scheme: Scheme) -> Result<u32> {
    let topo = Topology::of(model)?;
    let pick = |f: &dyn Fn(usize) -> bool| {
        (0..model.layers.len())
            .rev()
            .find(|&i| f(i))
            .map(|i| model.layers[i].id)
            .ok_or_else(|| Error::Unsupported(format!("model has no layer suitable for {scheme}")))
    };
    let fed_by_producer = |i: usize| {
        topo.spaces
            .iter()
            .any(|s| !s.producers.is_empty() && s.consumers.iter().any(|c| c.layer == i))
    };
    let conv = |i: usize| matches!(model.layers[i].kind, LayerKind::Conv2d(_));
    match scheme {
        Scheme::Uchida | Scheme::Greedy | Scheme::PassportSign => {
            pick(&|i| conv(i) && fed_by_producer(i)).or_else(|_| pick(&conv))
        }
        Scheme::SignOfScale => pick(&|i| matches!(model.layers[i].kind, LayerKind::Norm(_))),
        Scheme::ActivationMean => pick(&|i| {
            model.layers[i].kind.is_neural()
                && topo
                    .space_of(model.layers[i].id)
                    .is_ok_and(|s| topo.spaces[s].is_hidden())
        }),
    }
}

/// Spatial shape of the input to layer `id`.
fn input_shape_of<S: Scalar>(model: &Model<S>, id: u32) -> Result<Vec<usize>> {
    let i = model.index_of(id).ok_or(Error::UnknownLayer(id))?;
    Ok(if i == 0 {
        model.input_shape.clone()
    } else {
        model.shapes()?[i - 1].clone()
    })
}

/// Builds the secret key for `scheme` on `target` with a `bits`-long
/// message, checking the message fits.
pub fn make_key<S: Scalar>(
    model: &Model<S>,
    scheme: Scheme,
    target: u32,
    bits: usize,
    eta: f64,
    seed: u64,
) -> Result<WatermarkKey> {
    model.ensure_valid()?;
    let mut r = rng::seeded(seed);
    let layer = model.layer(target)?;
    let mut key = WatermarkKey {
        scheme,
        target_layer_ids: vec![target],
        bits,
        seed,
        transform: None,
        eta: None,
        passport: None,
        triggers: vec![],
        expected_widths: model.widths(),
    };
    let exact = |channels: usize| {
        if bits > channels {
            Err(Error::Capacity { bits, capacity: channels })
        } else if bits < channels {
            Err(Error::InvalidArgument(format!(
                "{scheme} reads one bit per channel; message must have exactly {channels} bits"
            )))
        } else {
            Ok(())
        }
    };
    match scheme {
        Scheme::Uchida => {
            let (w, rows) = neural_weight(model, target)?;
            let cols = w.len() / rows;
            if bits > cols {
                return Err(Error::Capacity { bits, capacity: cols });
            }
            key.transform = Some(rng::gaussian_tensor(&mut r, vec![bits, cols], 1.0));
        }
        Scheme::SignOfScale => match &layer.kind {
            LayerKind::Norm(n) => exact(n.channels)?,
            k => return Err(Error::InvalidArgument(format!("layer {target} is a {} layer, not norm", k.tag()))),
        },
        Scheme::Greedy => {
            let (w, _) = neural_weight(model, target)?;
            if bits > w.len() {
                return Err(Error::Capacity { bits, capacity: w.len() });
            }
            key.eta = Some(eta);
        }
        Scheme::ActivationMean => {
            let (_, c) = neural_weight(model, target)?;
            if bits > c {
                return Err(Error::Capacity { bits, capacity: c });
            }
            key.transform = Some(rng::gaussian_tensor(&mut r, vec![bits, c], 1.0));
            key.triggers = gaussian_inputs::<f64>(&model.input_shape, TRIGGERS, rng::child(seed, 1));
        }
        Scheme::PassportSign => {
            let LayerKind::Conv2d(c) = &layer.kind else {
                return Err(Error::InvalidArgument(format!("layer {target} is not a conv layer")));
            };
            exact(c.out_ch)?;
            let s = input_shape_of(model, target)?;
            key.passport = Some(rng::gaussian_tensor(&mut r, s, 1.0));
        }
    }
    Ok(key)
}

/// The embedding problem in f64: parameters, linear statistic, and the
/// gradient `J^T g` of the statistic.
struct Problem {
    theta: Vec<f64>,
    /// Squared spectral norm of the statistic's Jacobian.
    lipschitz: f64,
    kind: ProblemKind,
}

enum ProblemKind {
    Uchida { x: Tensor<f64>, rows: usize },
    Sign,
    Greedy { b: usize, eta: f64 },
    /// `t = A (W g + bias)`; `theta` is W followed by the bias when present.
    Linear { a: Option<Tensor<f64>>, g: Vec<f64>, out: usize, bias: bool },
}

/// Largest eigenvalue of `X X^T` by power iteration.
fn top_sv_sq(x: &Tensor<f64>) -> f64 {
    let (rows, cols) = (x.shape()[0], x.shape()[1]);
    let d = x.data();
    let mut v = vec![1.0 / (rows as f64).sqrt(); rows];
    let mut lam = 0.0;
    for _ in 0..200 {
        let mut xt = vec![0.0; cols];
        for (i, row) in d.chunks_exact(cols).enumerate() {
            xt.iter_mut().zip(row).for_each(|(a, b)| *a += v[i] * b);
        }
        let w: Vec<f64> = d
            .chunks_exact(cols)
            .map(|row| row.iter().zip(&xt).map(|(a, b)| a * b).sum())
            .collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lam = norm;
        v = w.into_iter().map(|x| x / norm).collect();
    }
    lam
}

impl Problem {
    fn stat(&self) -> Vec<f64> {
        let th = &self.theta;
        match &self.kind {
            ProblemKind::Uchida { x, rows } => matvec(x, &filter_mean(th, *rows)).expect("shapes fixed by key"),
            ProblemKind::Sign => th.clone(),
            ProblemKind::Greedy { b, eta } => greedy_rows(th, *b, *eta).expect("capacity checked").0,
            ProblemKind::Linear { a, g, out, bias } => {
                let n = g.len();
                let pre: Vec<f64> = (0..*out)
                    .map(|c| {
                        let dot: f64 = th[c * n..(c + 1) * n].iter().zip(g).map(|(w, x)| w * x).sum();
                        dot + if *bias { th[out * n + c] } else { 0.0 }
                    })
                    .collect();
                match a {
                    Some(a) => matvec(a, &pre).expect("shapes fixed by key"),
                    None => pre,
                }
            }
        }
    }

    /// `J^T g` for the current parameters.
    fn pullback(&self, grad_t: &[f64]) -> Vec<f64> {
        let th = &self.theta;
        let mut out = vec![0.0; th.len()];
        match &self.kind {
            ProblemKind::Uchida { x, rows } => {
                let cols = x.shape()[1];
                let mut v = vec![0.0; cols];
                for (row, &gi) in x.data().chunks_exact(cols).zip(grad_t) {
                    v.iter_mut().zip(row).for_each(|(a, b)| *a += gi * b / *rows as f64);
                }
                for chunk in out.chunks_exact_mut(cols) {
                    chunk.copy_from_slice(&v);
                }
            }
            ProblemKind::Sign => out.copy_from_slice(grad_t),
            ProblemKind::Greedy { b, eta } => {
                let (_, keep) = greedy_geometry(th.len(), *b, *eta);
                let (_, kept) = greedy_rows(th, *b, *eta).expect("capacity checked");
                for (idx, &gi) in kept.iter().zip(grad_t) {
                    idx.iter().for_each(|&j| out[j] += gi / keep as f64);
                }
            }
            ProblemKind::Linear { a, g, out: n_out, bias } => {
                let u: Vec<f64> = match a {
                    Some(a) => {
                        let c = a.shape()[1];
                        let mut u = vec![0.0; c];
                        for (row, &gi) in a.data().chunks_exact(c).zip(grad_t) {
                            u.iter_mut().zip(row).for_each(|(x, y)| *x += gi * y);
                        }
                        u
                    }
                    None => grad_t.to_vec(),
                };
                let n = g.len();
                for c in 0..*n_out {
                    out[c * n..(c + 1) * n].iter_mut().zip(g).for_each(|(o, x)| *o = u[c] * x);
                    if *bias {
                        out[n_out * n + c] = u[c];
                    }
                }
            }
        }
        out
    }
}

fn build_problem<S: Scalar>(model: &Model<S>, key: &WatermarkKey) -> Result<Problem> {
    let id = key.target()?;
    let b = key.bits;
    Ok(match key.scheme {
        Scheme::Uchida => {
            let (w, rows) = neural_weight(model, id)?;
            let x = key.transform.clone().expect("made by make_key");
            Problem {
                theta: w,
                lipschitz: top_sv_sq(&x) / rows as f64,
                kind: ProblemKind::Uchida { x, rows },
            }
        }
        Scheme::SignOfScale => {
            let LayerKind::Norm(n) = &model.layer(id)?.kind else { unreachable!() };
            Problem {
                theta: to_f64(&n.gamma),
                lipschitz: 1.0,
                kind: ProblemKind::Sign,
            }
        }
        Scheme::Greedy => {
            let (w, _) = neural_weight(model, id)?;
            let eta = key.eta.unwrap_or(0.5);
            let (_, keep) = greedy_geometry(w.len(), b, eta);
            Problem {
                theta: w,
                lipschitz: 1.0 / keep as f64,
                kind: ProblemKind::Greedy { b, eta },
            }
        }
        Scheme::ActivationMean => {
            let i = model.index_of(id).ok_or(Error::UnknownLayer(id))?;
            let a = key.transform.clone().expect("made by make_key");
            let layer = &model.layers[i].kind;
            let mut inputs = Vec::with_capacity(key.triggers.len());
            let mut in_shape = model.input_shape.clone();
            for t in &key.triggers {
                let x = t.cast::<S>();
                let feed = if i == 0 {
                    x
                } else {
                    let (_, trace) = forward_with_trace(model, &x)?;
                    trace.entries[i - 1].1.clone()
                };
                in_shape = feed.shape().to_vec();
                inputs.push(to_f64(feed.data()));
            }
            let g = match layer {
                LayerKind::Conv2d(c) => patch_mean(c, &inputs, in_shape[1], in_shape[2])
                    .ok_or_else(|| Error::InvalidArgument("input smaller than kernel".into()))?,
                _ => {
                    let n = inputs.len() as f64;
                    let mut g = vec![0.0; inputs[0].len()];
                    inputs.iter().for_each(|x| g.iter_mut().zip(x).for_each(|(a, b)| *a += b / n));
                    g
                }
            };
            let (mut theta, out) = neural_weight(model, id)?;
            let bias = layer.bias().is_some();
            if let Some(bv) = layer.bias() {
                theta.extend(to_f64(bv.data()));
            }
            let gg: f64 = g.iter().map(|v| v * v).sum::<f64>() + if bias { 1.0 } else { 0.0 };
            Problem {
                theta,
                lipschitz: top_sv_sq(&a) * gg,
                kind: ProblemKind::Linear { a: Some(a), g, out, bias },
            }
        }
        Scheme::PassportSign => {
            let (g, out) = passport_patch(model, key)?;
            let (w, _) = neural_weight(model, id)?;
            let gg: f64 = g.iter().map(|v| v * v).sum();
            Problem {
                theta: w,
                lipschitz: gg,
                kind: ProblemKind::Linear { a: None, g, out, bias: false },
            }
        }
    })
}

fn write_back<S: Scalar>(model: &mut Model<S>, key: &WatermarkKey, theta: &[f64]) -> Result<()> {
    let id = key.target()?;
    let i = model.index_of(id).ok_or(Error::UnknownLayer(id))?;
    let cast = |v: &[f64]| -> Vec<S> { v.iter().map(|&x| S::of(x)).collect() };
    match &mut model.layers[i].kind {
        LayerKind::Norm(n) => n.gamma = cast(theta),
        LayerKind::Conv2d(c) => {
            let n = c.weight.len();
            c.weight = Tensor::new(c.weight.shape().to_vec(), cast(&theta[..n]))?;
            if key.scheme == Scheme::ActivationMean {
                if let Some(b) = &mut c.bias {
                    *b = Tensor::from_vec(cast(&theta[n..]));
                }
            }
        }
        LayerKind::Dense(d) => {
            let n = d.weight.len();
            d.weight = Tensor::new(d.weight.shape().to_vec(), cast(&theta[..n]))?;
            if key.scheme == Scheme::ActivationMean {
                if let Some(b) = &mut d.bias {
                    *b = Tensor::from_vec(cast(&theta[n..]));
                }
            }
        }
        _ => unreachable!("targets are norm, conv or dense"),
    }
    Ok(())
}

fn wrong_bits(stat: &[f64], msg: &BitString, margin: f64) -> usize {
    stat.iter()
        .zip(msg.bits())
        .filter(|(&t, &s)| if s { t < margin } else { t > -margin })
        .count()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Embeds `message` into `model` under `key` (see [`make_key`]).
pub fn embed_with_key<S: Scalar>(
    model: &Model<S>,
    key: &WatermarkKey,
    message: &BitString,
    cfg: &EmbedConfig,
) -> Result<Model<S>> {
    cfg.validate()?;
    if message.len() != key.bits {
        return Err(Error::LengthMismatch(message.len(), key.bits));
    }
    let mut p = build_problem(model, key)?;
    let theta0 = p.theta.clone();
    let lr = cfg.step_size / (0.25 * cfg.lambda_wmk * p.lipschitz + cfg.anchor);
    let mut out = model.clone();
    let mut wrong = message.len();
    for _ in 0..cfg.max_steps {
        let t = p.stat();
        wrong = wrong_bits(&t, message, cfg.margin);
        if wrong == 0 {
            write_back(&mut out, key, &p.theta)?;
            // Re-check in the model's own precision.
            let real = statistic(&out, key)?;
            if wrong_bits(&real, message, 0.5 * cfg.margin) == 0 && &extract(&out, key)? == message {
                return Ok(out);
            }
        }
        let g: Vec<f64> = t
            .iter()
            .zip(message.bits())
            .map(|(&ti, &s)| cfg.lambda_wmk * (sigmoid(ti) - if s { 1.0 } else { 0.0 }))
            .collect();
        let grad = p.pullback(&g);
        for ((th, gr), th0) in p.theta.iter_mut().zip(grad).zip(&theta0) {
            *th -= lr * (gr + cfg.anchor * (*th - th0));
        }
    }
    Err(Error::NonConvergence {
        steps: cfg.max_steps,
        wrong,
    })
}

/// Creates a key for `scheme` on `target` (or its default layer) and
/// embeds `message`.
pub fn embed<S: Scalar>(
    model: &Model<S>,
    scheme: Scheme,
    target: Option<u32>,
    message: &BitString,
    cfg: &EmbedConfig,
    seed: u64,
) -> Result<(Model<S>, WatermarkKey)> {
    let target = match target {
        Some(t) => t,
        None => default_target(model, scheme)?,
    };
    let key = make_key(model, scheme, target, message.len(), cfg.eta, seed)?;
    let m = embed_with_key(model, &key, message, cfg)?;
    Ok((m, key))
}
