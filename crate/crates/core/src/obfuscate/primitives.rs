//! Dummy-neuron generators.
//!
//! All three primitives append their new channels to the end of the
//! target space; the campaign permutes afterwards.

use rand::Rng;

use super::{DummyGroup, Primitive, ZeroSide};
use crate::error::{Error, Result};
use crate::ir::{Channel, Model, NeuronRef, Slot, Topology};
use crate::rng::{self, Rng64};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
struct Gauss {
    mean: f64,
    std: f64,
}

impl Gauss {
    fn of<S: Scalar>(v: &[S]) -> Self {
        if v.is_empty() {
            return Gauss { mean: 0.0, std: 1.0 };
        }
        let n = v.len() as f64;
        let mean = v.iter().map(|x| x.f64()).sum::<f64>() / n;
        let var = v.iter().map(|x| (x.f64() - mean).powi(2)).sum::<f64>() / n;
        Gauss {
            mean,
            std: var.sqrt().max(1e-6),
        }
    }

    fn sample<S: Scalar>(&self, r: &mut Rng64, n: usize) -> Vec<S> {
        rng::gaussian_vec(r, n, self.mean, self.std)
    }
}

/// Per-layer weight distributions of a space's producers and consumers.
struct SpaceFit {
    rows: Vec<Gauss>,
    bias: Vec<Option<Gauss>>,
    cols: Vec<Gauss>,
}

impl SpaceFit {
    fn of<S: Scalar>(m: &Model<S>, topo: &Topology, space: usize) -> Self {
        let sp = &topo.spaces[space];
        let fit_layer = |i: usize| Gauss::of(m.layers[i].kind.weight().unwrap().data());
        SpaceFit {
            rows: sp.producers.iter().map(|p| fit_layer(p.layer)).collect(),
            bias: sp
                .producers
                .iter()
                .map(|p| m.layers[p.layer].kind.bias().map(|b| Gauss::of(b.data())))
                .collect(),
            cols: sp.consumers.iter().map(|c| fit_layer(c.layer)).collect(),
        }
    }
}

/// Shapes of a new channel, taken from channel 0 of the space.
struct Template<S> {
    row_lens: Vec<usize>,
    col_lens: Vec<usize>,
    has_bias: Vec<bool>,
    has_norm: Vec<bool>,
    _s: std::marker::PhantomData<S>,
}

impl<S: Scalar> Template<S> {
    fn of(m: &Model<S>, topo: &Topology, space: usize) -> Self {
        let c = m.channel(topo, space, 0);
        Template {
            row_lens: c.rows.iter().map(Vec::len).collect(),
            col_lens: c.cols.iter().map(Vec::len).collect(),
            has_bias: c.bias.iter().map(Option::is_some).collect(),
            has_norm: c.norm.iter().map(Option::is_some).collect(),
            _s: std::marker::PhantomData,
        }
    }

    fn zero_rows(&self) -> Vec<Vec<S>> {
        self.row_lens.iter().map(|&n| vec![S::zero(); n]).collect()
    }

    fn zero_cols(&self) -> Vec<Vec<S>> {
        self.col_lens.iter().map(|&n| vec![S::zero(); n]).collect()
    }

    fn zero_bias(&self) -> Vec<Option<S>> {
        self.has_bias.iter().map(|&b| b.then(S::zero)).collect()
    }

    fn neutral_norm(&self) -> Vec<Option<[S; 4]>> {
        self.has_norm
            .iter()
            .map(|&b| b.then(|| [S::one(), S::zero(), S::zero(), S::one()]))
            .collect()
    }

    fn sample_rows(&self, fit: &SpaceFit, r: &mut Rng64) -> Vec<Vec<S>> {
        self.row_lens
            .iter()
            .zip(&fit.rows)
            .map(|(&n, g)| g.sample(r, n))
            .collect()
    }

    fn sample_bias(&self, fit: &SpaceFit, r: &mut Rng64) -> Vec<Option<S>> {
        fit.bias
            .iter()
            .map(|g| g.map(|g| g.sample(r, 1)[0]))
            .collect()
    }

    fn sample_cols(&self, fit: &SpaceFit, r: &mut Rng64) -> Vec<Vec<S>> {
        self.col_lens
            .iter()
            .zip(&fit.cols)
            .map(|(&n, g)| g.sample(r, n))
            .collect()
    }
}

/// Norm coefficients of a randomly chosen existing channel.
fn borrowed_norm<S: Scalar>(m: &Model<S>, topo: &Topology, space: usize, r: &mut Rng64) -> Vec<Option<[S; 4]>> {
    let w = m.space_width(topo, space);
    m.channel(topo, space, r.random_range(0..w)).norm
}

/// Resolves `layer_id` to an injectable space.
pub(crate) fn editable_space<S: Scalar>(m: &Model<S>, layer_id: u32) -> Result<(Topology, usize)> {
    m.ensure_valid()?;
    let layer = m.layer(layer_id)?;
    if !layer.kind.is_neural() {
        return Err(Error::InvalidArgument(format!(
            "layer {layer_id} is a {} layer, not conv2d/dense",
            layer.kind.tag()
        )));
    }
    let topo = Topology::of(m)?;
    let s = topo.space_of(layer_id)?;
    topo.ensure_editable(s, layer_id)?;
    Ok((topo, s))
}

pub(crate) fn anchor_id<S>(m: &Model<S>, topo: &Topology, space: usize) -> u32 {
    m.layers[topo.spaces[space].anchor()].id
}

fn append<S: Scalar>(m: &mut Model<S>, topo: &Topology, space: usize, new: Vec<Channel<S>>) -> Vec<usize> {
    let w = m.space_width(topo, space);
    let n = new.len();
    let mut slots: Vec<Slot<S>> = (0..w).map(Slot::Keep).collect();
    slots.extend(new.into_iter().map(Slot::New));
    m.remap_space(topo, space, &slots);
    (w..w + n).collect()
}

/// Last vector = minus the running sum of the others, accumulated in
/// order, so the members add to exactly zero in that order.
fn cancel_last<S: Scalar>(vs: &[Vec<S>]) -> Vec<S> {
    let mut acc = vec![S::zero(); vs[0].len()];
    for v in vs {
        acc.iter_mut().zip(v).for_each(|(a, &x)| *a = *a + x);
    }
    acc.into_iter().map(|a| -a).collect()
}

pub(crate) fn zero_into<S: Scalar>(
    m: &mut Model<S>,
    topo: &Topology,
    space: usize,
    count: usize,
    side: ZeroSide,
    r: &mut Rng64,
) -> DummyGroup {
    let side = match side {
        ZeroSide::Random if r.random_bool(0.5) => ZeroSide::Incoming,
        ZeroSide::Random => ZeroSide::Outgoing,
        s => s,
    };
    let fit = SpaceFit::of(m, topo, space);
    let t = Template::of(m, topo, space);
    let mut new = Vec::with_capacity(count);
    for _ in 0..count {
        new.push(match side {
            ZeroSide::Incoming => Channel {
                rows: t.zero_rows(),
                bias: t.zero_bias(),
                norm: t.neutral_norm(),
                cols: t.sample_cols(&fit, r),
            },
            _ => Channel {
                rows: t.sample_rows(&fit, r),
                bias: t.sample_bias(&fit, r),
                norm: borrowed_norm(m, topo, space, r),
                cols: t.zero_cols(),
            },
        });
    }
    let members = append(m, topo, space, new);
    DummyGroup {
        layer_id: anchor_id(m, topo, space),
        kind: Primitive::Zero,
        d: count,
        scales: vec![1.0; count],
        member_indices: members,
        replaced_neuron: None,
        zero_side: Some(side),
    }
}

pub(crate) fn clique_channels<S: Scalar>(
    m: &Model<S>,
    topo: &Topology,
    space: usize,
    d: usize,
    r: &mut Rng64,
) -> Vec<Channel<S>> {
    let fit = SpaceFit::of(m, topo, space);
    let t = Template::of(m, topo, space);
    let rows = t.sample_rows(&fit, r);
    let bias = t.sample_bias(&fit, r);
    let norm = borrowed_norm(m, topo, space, r);
    let mut outs: Vec<Vec<Vec<S>>> = (0..d - 1).map(|_| t.sample_cols(&fit, r)).collect();
    let last = (0..t.col_lens.len())
        .map(|k| cancel_last(&outs.iter().map(|o| o[k].clone()).collect::<Vec<_>>()))
        .collect();
    outs.push(last);
    outs.into_iter()
        .map(|cols| Channel {
            rows: rows.clone(),
            bias: bias.clone(),
            norm: norm.clone(),
            cols,
        })
        .collect()
}

pub(crate) fn clique_into<S: Scalar>(
    m: &mut Model<S>,
    topo: &Topology,
    space: usize,
    d: usize,
    r: &mut Rng64,
) -> DummyGroup {
    let new = clique_channels(m, topo, space, d, r);
    let members = append(m, topo, space, new);
    DummyGroup {
        layer_id: anchor_id(m, topo, space),
        kind: Primitive::Clique,
        d,
        scales: vec![1.0; d],
        member_indices: members,
        replaced_neuron: None,
        zero_side: None,
    }
}

pub(crate) fn split_into<S: Scalar>(
    m: &mut Model<S>,
    topo: &Topology,
    space: usize,
    j: usize,
    d: usize,
    r: &mut Rng64,
) -> DummyGroup {
    let fit = SpaceFit::of(m, topo, space);
    let t = Template::of(m, topo, space);
    let orig = m.channel(topo, space, j);
    let dummy_cols: Vec<Vec<Vec<S>>> = (0..d).map(|_| t.sample_cols(&fit, r)).collect();
    let mut replacement = orig.clone();
    for (k, w) in orig.cols.iter().enumerate() {
        let parts: Vec<Vec<S>> = dummy_cols.iter().map(|c| c[k].clone()).collect();
        let deficit = cancel_last(&parts);
        replacement.cols[k] = w.iter().zip(&deficit).map(|(&a, &b)| a + b).collect();
    }
    let new = dummy_cols
        .into_iter()
        .map(|cols| Channel {
            cols,
            ..orig.clone()
        })
        .collect();
    m.set_channel(topo, space, j, &replacement);
    let mut members = append(m, topo, space, new);
    members.push(j);
    let layer_id = anchor_id(m, topo, space);
    DummyGroup {
        layer_id,
        kind: Primitive::Split,
        d,
        scales: vec![1.0; d + 1],
        member_indices: members,
        replaced_neuron: Some(NeuronRef { layer_id, index: j }),
        zero_side: None,
    }
}

/// Adds `count` NeuronZero dummies to the space produced by `layer_id`.
/// The zeroed side is all zero; the other side is drawn from Gaussians
/// fitted to the surrounding layers' weights.
pub fn neuron_zero_inject<S: Scalar>(
    model: &Model<S>,
    layer_id: u32,
    count: usize,
    side: ZeroSide,
    seed: u64,
) -> Result<(Model<S>, DummyGroup)> {
    let (topo, s) = editable_space(model, layer_id)?;
    let mut m = model.clone();
    let g = zero_into(&mut m, &topo, s, count, side, &mut rng::seeded(seed));
    Ok((m, g))
}

/// Weights of a NeuronClique group for the space of `layer_id`: one shared
/// incoming row set, `d - 1` sampled outgoing slices, and a last slice that
/// cancels them exactly.
pub fn clique_generate<S: Scalar>(model: &Model<S>, layer_id: u32, d: usize, seed: u64) -> Result<Vec<Channel<S>>> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!("clique needs d >= 2, got {d}")));
    }
    let (topo, s) = editable_space(model, layer_id)?;
    Ok(clique_channels(model, &topo, s, d, &mut rng::seeded(seed)))
}

pub fn neuron_clique_inject<S: Scalar>(
    model: &Model<S>,
    layer_id: u32,
    d: usize,
    seed: u64,
) -> Result<(Model<S>, DummyGroup)> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!("clique needs d >= 2, got {d}")));
    }
    let (topo, s) = editable_space(model, layer_id)?;
    let mut m = model.clone();
    let g = clique_into(&mut m, &topo, s, d, &mut rng::seeded(seed));
    Ok((m, g))
}

/// Replaces `neuron` by `d + 1` substitutes sharing its incoming weights,
/// bias and norm entries, whose outgoing weights add up to the original.
pub fn neuron_split<S: Scalar>(
    model: &Model<S>,
    neuron: NeuronRef,
    d: usize,
    seed: u64,
) -> Result<(Model<S>, DummyGroup)> {
    if d < 1 {
        return Err(Error::InvalidArgument("split needs d >= 1".into()));
    }
    let (topo, s) = editable_space(model, neuron.layer_id)?;
    let w = model.space_width(&topo, s);
    if neuron.index >= w {
        return Err(Error::InvalidArgument(format!(
            "neuron {} out of range for layer {} of width {w}",
            neuron.index, neuron.layer_id
        )));
    }
    let mut m = model.clone();
    let g = split_into(&mut m, &topo, s, neuron.index, d, &mut rng::seeded(seed));
    Ok((m, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::equivalence_check;
    use crate::zoo;

    fn equivalent(a: &Model<f32>, b: &Model<f32>) -> bool {
        equivalence_check(a, b, 100, 11, 1e-4).unwrap().pass
    }

    #[test]
    fn zero_count_is_identity() {
        let m = zoo::mlp::<f32>(&[4, 8, 3], 1);
        let (m2, g) = neuron_zero_inject(&m, 1, 0, ZeroSide::Incoming, 0).unwrap();
        assert_eq!(m, m2);
        assert!(g.member_indices.is_empty());
    }

    #[test]
    fn zero_dummies_preserve_output() {
        let m = zoo::mlp::<f32>(&[4, 8, 3], 1);
        for side in [ZeroSide::Incoming, ZeroSide::Outgoing] {
            let (m2, g) = neuron_zero_inject(&m, 1, 2, side, 5).unwrap();
            assert_eq!(m2.widths()[&1], 10);
            assert_eq!(g.member_indices, vec![8, 9]);
            assert!(equivalent(&m, &m2));
        }
    }

    #[test]
    fn output_layer_is_rejected() {
        let m = zoo::mlp::<f32>(&[4, 8, 3], 1);
        assert!(matches!(
            neuron_zero_inject(&m, 3, 1, ZeroSide::Incoming, 0),
            Err(Error::IoBoundary(3))
        ));
    }

    #[test]
    fn clique_pair_is_antisymmetric() {
        let m = zoo::mlp::<f32>(&[2, 16, 2], 3);
        let c = clique_generate(&m, 1, 2, 9).unwrap();
        let neg: Vec<f32> = c[0].cols[0].iter().map(|v| -v).collect();
        assert_eq!(c[1].cols[0], neg);
        assert_eq!(c[0].rows, c[1].rows);
    }

    #[test]
    fn clique_of_one_is_rejected() {
        let m = zoo::mlp::<f32>(&[2, 16, 2], 3);
        assert!(clique_generate(&m, 1, 1, 0).is_err());
    }

    #[test]
    fn split_preserves_output_and_width_grows_by_d() {
        let m = zoo::small_cnn::<f32>(2);
        let (m2, g) = neuron_split(&m, NeuronRef { layer_id: 1, index: 3 }, 2, 4).unwrap();
        assert_eq!(m2.widths()[&1], 10);
        assert_eq!(g.member_indices, vec![8, 9, 3]);
        assert!(equivalent(&m, &m2));
    }
}
