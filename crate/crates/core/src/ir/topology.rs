//! Neuron-level view of a model.
//!
//! A *channel space* is one neuron dimension of the network: the output
//! channels of a Conv2D/Dense layer, carried unchanged through Norm, ReLU
//! and Flatten, and merged across `ResidualAdd`. Every neuron-level
//! rewrite (injection, removal, permutation, rescaling, merging) edits a
//! space as a whole: the rows of all its producers, the entries of their
//! attached Norm layers, and the matching input slices of all consumers.

use std::collections::BTreeMap;

use super::{LayerKind, Model, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Producer {
    /// Position of the Conv2D/Dense layer in `model.layers`.
    pub layer: usize,
    /// Position of the Norm layer directly following it, if any.
    pub norm: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Consumer {
    pub layer: usize,
    /// Input columns per channel: 1 for convs and plain dense layers,
    /// `h * w` for a dense layer reading a flattened feature map.
    pub block: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelSpace {
    pub producers: Vec<Producer>,
    pub consumers: Vec<Consumer>,
    /// Width when the topology was computed.
    pub width: usize,
    /// The model input flows into this space.
    pub touches_input: bool,
    /// The model output is read from this space.
    pub is_output: bool,
    /// Norm layers on this space not attached to a producer.
    pub loose_norms: Vec<usize>,
}

impl ChannelSpace {
    /// Spaces whose width can change without touching the model's I/O.
    pub fn is_hidden(&self) -> bool {
        !self.touches_input && !self.is_output && !self.producers.is_empty()
    }

    pub fn is_residual(&self) -> bool {
        self.producers.len() > 1
    }

    /// First producer position; spaces are ordered by it.
    pub fn anchor(&self) -> usize {
        self.producers.first().map_or(0, |p| p.layer)
    }
}

#[derive(Debug, Clone)]
pub struct Topology {
    pub spaces: Vec<ChannelSpace>,
    /// Producer layer id -> index into `spaces`.
    by_producer: BTreeMap<u32, usize>,
}

/// All per-channel parameters of one neuron across its space.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel<S> {
    /// One incoming row per producer.
    pub rows: Vec<Vec<S>>,
    /// Bias per producer (`None` when the producer has no bias).
    pub bias: Vec<Option<S>>,
    /// `[gamma, beta, mean, std]` of each producer's attached Norm.
    pub norm: Vec<Option<[S; 4]>>,
    /// One outgoing slice per consumer.
    pub cols: Vec<Vec<S>>,
}

/// Source of a channel in a rebuilt space.
#[derive(Debug, Clone)]
pub enum Slot<S> {
    Keep(usize),
    New(Channel<S>),
}

struct Dsu(Vec<usize>);

impl Dsu {
    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut x = x;
        while self.0[x] != r {
            let n = self.0[x];
            self.0[x] = r;
            x = n;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (a, b) = (self.find(a), self.find(b));
        if a != b {
            self.0[b.max(a)] = a.min(b);
        }
    }
}

impl Topology {
    pub fn of<S: Scalar>(model: &Model<S>) -> Result<Self> {
        let shapes = model.shapes()?;
        // Node 0 is the model input; node k+1 is the output space of the
        // k-th neural layer.
        let mut dsu = Dsu(vec![0]);
        let mut node_of_layer = vec![0usize; model.layers.len()];
        let mut producer_node: Vec<(usize, usize)> = Vec::new();
        let mut consumer_node: Vec<(usize, usize, usize)> = Vec::new();
        let mut norms: Vec<(usize, usize, Option<usize>)> = Vec::new();
        let mut block_of_layer = vec![1usize; model.layers.len()];
        let mut cur = 0usize;
        let mut block = 1usize;
        let mut cur_shape = model.input_shape.clone();

        for (i, l) in model.layers.iter().enumerate() {
            match &l.kind {
                LayerKind::Conv2d(_) | LayerKind::Dense(_) => {
                    if matches!(l.kind, LayerKind::Conv2d(_)) && block != 1 {
                        return Err(Error::Unsupported(format!(
                            "conv layer {} reads a flattened tensor",
                            l.id
                        )));
                    }
                    consumer_node.push((i, cur, block));
                    let node = dsu.0.len();
                    dsu.0.push(node);
                    producer_node.push((i, node));
                    cur = node;
                    block = 1;
                }
                LayerKind::Norm(_) => {
                    let attached = i > 0
                        && model.layers[i - 1].kind.is_neural()
                        && block == 1;
                    norms.push((i, cur, attached.then(|| i - 1)));
                    if block != 1 {
                        return Err(Error::Unsupported(format!(
                            "norm layer {} applied to a flattened tensor",
                            l.id
                        )));
                    }
                }
                LayerKind::Relu => {}
                LayerKind::Flatten => {
                    if cur_shape.len() == 3 {
                        block *= cur_shape[1] * cur_shape[2];
                    }
                }
                LayerKind::ResidualAdd { source } => {
                    let j = model
                        .index_of(*source)
                        .ok_or(Error::UnknownLayer(*source))?;
                    if block_of_layer[j] != block {
                        return Err(Error::Unsupported(format!(
                            "residual {} joins tensors with different layouts",
                            l.id
                        )));
                    }
                    dsu.union(cur, node_of_layer[j]);
                }
            }
            node_of_layer[i] = cur;
            block_of_layer[i] = block;
            cur_shape = shapes[i].clone();
        }

        let mut root_to_space: BTreeMap<usize, usize> = BTreeMap::new();
        let mut spaces: Vec<ChannelSpace> = Vec::new();
        let mut space_of = |dsu: &mut Dsu, node: usize, spaces: &mut Vec<ChannelSpace>| {
            let r = dsu.find(node);
            *root_to_space.entry(r).or_insert_with(|| {
                spaces.push(ChannelSpace {
                    producers: vec![],
                    consumers: vec![],
                    width: 0,
                    touches_input: false,
                    is_output: false,
                    loose_norms: vec![],
                });
                spaces.len() - 1
            })
        };

        let s_in = space_of(&mut dsu, 0, &mut spaces);
        spaces[s_in].touches_input = true;
        spaces[s_in].width = model.input_shape[0];
        let mut by_producer = BTreeMap::new();
        for &(i, node) in &producer_node {
            let s = space_of(&mut dsu, node, &mut spaces);
            let norm = norms
                .iter()
                .find(|(_, _, att)| *att == Some(i))
                .map(|(n, _, _)| *n);
            spaces[s].producers.push(Producer { layer: i, norm });
            spaces[s].width = model.layers[i].kind.out_width().unwrap_or(0);
            by_producer.insert(model.layers[i].id, s);
        }
        for &(i, node, block) in &consumer_node {
            let s = space_of(&mut dsu, node, &mut spaces);
            spaces[s].consumers.push(Consumer { layer: i, block });
        }
        for &(n, node, att) in &norms {
            if att.is_none() {
                let s = space_of(&mut dsu, node, &mut spaces);
                spaces[s].loose_norms.push(n);
            }
        }
        let s_out = space_of(&mut dsu, cur, &mut spaces);
        spaces[s_out].is_output = true;

        spaces.iter_mut().for_each(|s| {
            s.producers.sort_by_key(|p| p.layer);
            s.consumers.sort_by_key(|c| c.layer);
        });
        let mut order: Vec<usize> = (0..spaces.len()).collect();
        order.sort_by_key(|&s| (!spaces[s].touches_input, spaces[s].anchor()));
        let remap: BTreeMap<usize, usize> =
            order.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        let spaces = order.iter().map(|&s| spaces[s].clone()).collect();
        let by_producer = by_producer
            .into_iter()
            .map(|(id, s)| (id, remap[&s]))
            .collect();
        Ok(Topology {
            spaces,
            by_producer,
        })
    }

    /// Space that `layer_id` (a Conv2D/Dense layer) produces into.
    pub fn space_of(&self, layer_id: u32) -> Result<usize> {
        self.by_producer
            .get(&layer_id)
            .copied()
            .ok_or(Error::UnknownLayer(layer_id))
    }

    /// Hidden spaces, front to back.
    pub fn hidden(&self) -> Vec<usize> {
        (0..self.spaces.len())
            .filter(|&s| self.spaces[s].is_hidden())
            .collect()
    }

    /// Fails unless the space may be resized or rewritten.
    pub fn ensure_editable(&self, space: usize, layer_id: u32) -> Result<()> {
        let s = &self.spaces[space];
        if !s.is_hidden() {
            return Err(Error::IoBoundary(layer_id));
        }
        if !s.loose_norms.is_empty() {
            return Err(Error::Unsupported(format!(
                "space of layer {layer_id} has a norm layer not attached to a conv/dense"
            )));
        }
        Ok(())
    }
}

/// `[out, units, k]` view of a neural layer's weight as seen by a consumer
/// with the given flatten block.
fn consumer_geometry<S: Scalar>(kind: &LayerKind<S>, block: usize) -> (usize, usize, usize) {
    match kind {
        LayerKind::Conv2d(c) => (c.out_ch, c.in_ch, c.kh * c.kw),
        LayerKind::Dense(d) => (d.out, d.inp / block, block),
        _ => unreachable!("consumers are neural layers"),
    }
}

fn row_len<S: Scalar>(kind: &LayerKind<S>) -> usize {
    let w = kind.weight().expect("producers are neural layers");
    w.len() / kind.out_width().unwrap()
}

impl<S: Scalar> Model<S> {
    /// Current width of a space; `ChannelSpace::width` is the width at
    /// analysis time and goes stale once the space is resized.
    pub fn space_width(&self, topo: &Topology, space: usize) -> usize {
        let sp = &topo.spaces[space];
        match sp.producers.first() {
            Some(p) => self.layers[p.layer].kind.out_width().unwrap_or(0),
            None => sp.width,
        }
    }

    pub fn incoming(&self, topo: &Topology, space: usize, j: usize) -> Vec<S> {
        let mut v = Vec::new();
        for p in &topo.spaces[space].producers {
            let kind = &self.layers[p.layer].kind;
            let n = row_len(kind);
            v.extend_from_slice(&kind.weight().unwrap().data()[j * n..(j + 1) * n]);
        }
        v
    }

    /// Incoming weights and bias with any attached Norm folded in, i.e.
    /// the coefficients of the affine pre-activation of neuron `j`.
    pub fn incoming_effective(&self, topo: &Topology, space: usize, j: usize) -> Vec<S> {
        let mut v = Vec::new();
        for p in &topo.spaces[space].producers {
            let kind = &self.layers[p.layer].kind;
            let n = row_len(kind);
            let (a, e) = match p.norm {
                Some(ni) => match &self.layers[ni].kind {
                    LayerKind::Norm(norm) => norm.affine(j),
                    _ => unreachable!(),
                },
                None => (S::one(), S::zero()),
            };
            let row = &kind.weight().unwrap().data()[j * n..(j + 1) * n];
            v.extend(row.iter().map(|&w| a * w));
            let b = kind.bias().map_or(S::zero(), |b| b.data()[j]);
            v.push(a * b + e);
        }
        v
    }

    pub fn outgoing(&self, topo: &Topology, space: usize, j: usize) -> Vec<S> {
        let mut v = Vec::new();
        for c in &topo.spaces[space].consumers {
            v.extend(read_cols(&self.layers[c.layer].kind, c.block, j));
        }
        v
    }

    pub fn channel(&self, topo: &Topology, space: usize, j: usize) -> Channel<S> {
        let sp = &topo.spaces[space];
        let mut ch = Channel {
            rows: vec![],
            bias: vec![],
            norm: vec![],
            cols: vec![],
        };
        for p in &sp.producers {
            let kind = &self.layers[p.layer].kind;
            let n = row_len(kind);
            ch.rows
                .push(kind.weight().unwrap().data()[j * n..(j + 1) * n].to_vec());
            ch.bias.push(kind.bias().map(|b| b.data()[j]));
            ch.norm.push(p.norm.map(|ni| match &self.layers[ni].kind {
                LayerKind::Norm(nm) => [nm.gamma[j], nm.beta[j], nm.mean[j], nm.std[j]],
                _ => unreachable!(),
            }));
        }
        for c in &sp.consumers {
            ch.cols.push(read_cols(&self.layers[c.layer].kind, c.block, j));
        }
        ch
    }

    /// Overwrites channel `j` of a space in place.
    pub fn set_channel(&mut self, topo: &Topology, space: usize, j: usize, ch: &Channel<S>) {
        let sp = &topo.spaces[space];
        for (k, p) in sp.producers.iter().enumerate() {
            let kind = &mut self.layers[p.layer].kind;
            let n = row_len(kind);
            let (w, b) = weight_bias_mut(kind);
            w.data_mut()[j * n..(j + 1) * n].copy_from_slice(&ch.rows[k]);
            if let (Some(b), Some(v)) = (b, ch.bias[k]) {
                b.data_mut()[j] = v;
            }
            if let (Some(ni), Some([g, be, mu, sd])) = (p.norm, ch.norm[k]) {
                if let LayerKind::Norm(nm) = &mut self.layers[ni].kind {
                    nm.gamma[j] = g;
                    nm.beta[j] = be;
                    nm.mean[j] = mu;
                    nm.std[j] = sd;
                }
            }
        }
        for (k, c) in sp.consumers.iter().enumerate() {
            write_cols(&mut self.layers[c.layer].kind, c.block, j, &ch.cols[k]);
        }
    }

    /// Multiplies neuron `j`'s pre-activation by `lambda > 0` and divides its
    /// outgoing weights by the same factor. Output-preserving through ReLU.
    pub fn scale_channel(&mut self, topo: &Topology, space: usize, j: usize, lambda: S) {
        let mut ch = self.channel(topo, space, j);
        scale_channel_data(&mut ch, lambda);
        self.set_channel(topo, space, j, &ch);
    }

    /// Rebuilds a space from `slots`, which lists the new channels in order.
    pub fn remap_space(&mut self, topo: &Topology, space: usize, slots: &[Slot<S>]) {
        let sp = &topo.spaces[space];
        let old: Vec<Channel<S>> = (0..self.space_width(topo, space))
            .map(|j| self.channel(topo, space, j))
            .collect();
        let pick = |slot: &Slot<S>| -> Channel<S> {
            match slot {
                Slot::Keep(i) => old[*i].clone(),
                Slot::New(c) => c.clone(),
            }
        };
        let chans: Vec<Channel<S>> = slots.iter().map(pick).collect();
        let width = chans.len();

        for (k, p) in sp.producers.iter().enumerate() {
            let kind = &mut self.layers[p.layer].kind;
            let rows: Vec<S> = chans.iter().flat_map(|c| c.rows[k].iter().copied()).collect();
            let has_bias = kind.bias().is_some();
            let bias: Vec<S> = chans
                .iter()
                .map(|c| c.bias[k].unwrap_or_else(S::zero))
                .collect();
            match kind {
                LayerKind::Conv2d(cv) => {
                    cv.out_ch = width;
                    cv.weight = Tensor::new(vec![width, cv.in_ch, cv.kh, cv.kw], rows).unwrap();
                    if has_bias {
                        cv.bias = Some(Tensor::from_vec(bias));
                    }
                }
                LayerKind::Dense(d) => {
                    d.out = width;
                    d.weight = Tensor::new(vec![width, d.inp], rows).unwrap();
                    if has_bias {
                        d.bias = Some(Tensor::from_vec(bias));
                    }
                }
                _ => unreachable!(),
            }
            if let Some(ni) = p.norm {
                if let LayerKind::Norm(nm) = &mut self.layers[ni].kind {
                    let neutral = [S::one(), S::zero(), S::zero(), S::one()];
                    let e: Vec<[S; 4]> =
                        chans.iter().map(|c| c.norm[k].unwrap_or(neutral)).collect();
                    nm.channels = width;
                    nm.gamma = e.iter().map(|x| x[0]).collect();
                    nm.beta = e.iter().map(|x| x[1]).collect();
                    nm.mean = e.iter().map(|x| x[2]).collect();
                    nm.std = e.iter().map(|x| x[3]).collect();
                }
            }
        }
        for (k, c) in sp.consumers.iter().enumerate() {
            let kind = &mut self.layers[c.layer].kind;
            let (out, _, kk) = consumer_geometry(kind, c.block);
            let mut data = vec![S::zero(); out * width * kk];
            for (j, ch) in chans.iter().enumerate() {
                let col = &ch.cols[k];
                for o in 0..out {
                    let dst = (o * width + j) * kk;
                    data[dst..dst + kk].copy_from_slice(&col[o * kk..(o + 1) * kk]);
                }
            }
            match kind {
                LayerKind::Conv2d(cv) => {
                    cv.in_ch = width;
                    cv.weight = Tensor::new(vec![out, width, cv.kh, cv.kw], data).unwrap();
                }
                LayerKind::Dense(d) => {
                    d.inp = width * kk;
                    d.weight = Tensor::new(vec![out, width * kk], data).unwrap();
                }
                _ => unreachable!(),
            }
        }
    }
}

pub(crate) fn scale_channel_data<S: Scalar>(ch: &mut Channel<S>, lambda: S) {
    for r in &mut ch.rows {
        r.iter_mut().for_each(|w| *w = *w * lambda);
    }
    for b in ch.bias.iter_mut().flatten() {
        *b = *b * lambda;
    }
    for [_, beta, mean, _] in ch.norm.iter_mut().flatten() {
        *beta = *beta * lambda;
        *mean = *mean * lambda;
    }
    for c in &mut ch.cols {
        c.iter_mut().for_each(|w| *w = *w / lambda);
    }
}

fn weight_bias_mut<S: Scalar>(kind: &mut LayerKind<S>) -> (&mut Tensor<S>, Option<&mut Tensor<S>>) {
    match kind {
        LayerKind::Conv2d(c) => (&mut c.weight, c.bias.as_mut()),
        LayerKind::Dense(d) => (&mut d.weight, d.bias.as_mut()),
        _ => unreachable!(),
    }
}

fn read_cols<S: Scalar>(kind: &LayerKind<S>, block: usize, j: usize) -> Vec<S> {
    let (out, units, k) = consumer_geometry(kind, block);
    let data = kind.weight().unwrap().data();
    let mut v = Vec::with_capacity(out * k);
    for o in 0..out {
        let src = (o * units + j) * k;
        v.extend_from_slice(&data[src..src + k]);
    }
    v
}

fn write_cols<S: Scalar>(kind: &mut LayerKind<S>, block: usize, j: usize, col: &[S]) {
    let (out, units, k) = consumer_geometry(kind, block);
    let (w, _) = weight_bias_mut(kind);
    let data = w.data_mut();
    for o in 0..out {
        let dst = (o * units + j) * k;
        data[dst..dst + k].copy_from_slice(&col[o * k..(o + 1) * k]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo;

    #[test]
    fn mlp_has_one_space_per_hidden_layer() {
        let m = zoo::mlp::<f32>(&[4, 8, 6, 3], 1);
        let t = Topology::of(&m).unwrap();
        assert_eq!(t.spaces.len(), 4);
        assert_eq!(t.hidden().len(), 2);
        assert!(t.spaces[0].touches_input);
        assert!(t.spaces[3].is_output);
    }

    #[test]
    fn flatten_consumer_sees_spatial_block() {
        let m = zoo::small_cnn::<f32>(3);
        let t = Topology::of(&m).unwrap();
        let last_conv = t.hidden().pop().unwrap();
        let c = &t.spaces[last_conv].consumers[0];
        assert_eq!(c.block, 16 * 16);
    }

    #[test]
    fn residual_add_merges_spaces() {
        let m = zoo::residual_cnn::<f32>(5);
        let t = Topology::of(&m).unwrap();
        assert!(t.hidden().iter().any(|&s| t.spaces[s].is_residual()));
    }

    #[test]
    fn remap_identity_is_noop() {
        let m = zoo::small_cnn::<f32>(9);
        let t = Topology::of(&m).unwrap();
        for s in t.hidden() {
            let mut m2 = m.clone();
            let slots: Vec<Slot<f32>> = (0..t.spaces[s].width).map(Slot::Keep).collect();
            m2.remap_space(&t, s, &slots);
            assert_eq!(m, m2);
        }
    }

    #[test]
    fn channel_round_trips_through_set() {
        let m = zoo::norm_cnn::<f32>(2);
        let t = Topology::of(&m).unwrap();
        let s = t.hidden()[0];
        let ch = m.channel(&t, s, 1);
        let mut m2 = m.clone();
        m2.set_channel(&t, s, 1, &ch);
        assert_eq!(m, m2);
    }
}
