//! Output-preserving transforms that hide dummy neurons: per-neuron
//! rescaling, channel permutation, and kernel expansion.

use serde::{Deserialize, Serialize};

use super::primitives::editable_space;
use crate::error::{Error, Result};
use crate::ir::{LayerKind, Model, NeuronRef, Slot, Tensor, Topology};
use crate::rng;
use crate::scalar::Scalar;

pub fn is_permutation(perm: &[usize], n: usize) -> bool {
    if perm.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    perm.iter().all(|&i| i < n && !std::mem::replace(&mut seen[i], true))
}

pub fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Multiplies the pre-activation of `neuron` by `lambda` and divides its
/// outgoing weights by `lambda`.
pub fn rescale_neuron<S: Scalar>(model: &Model<S>, neuron: NeuronRef, lambda: f64) -> Result<Model<S>> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("scale {lambda} must be positive and finite")));
    }
    let (topo, s) = editable_space(model, neuron.layer_id).map_err(|e| match e {
        Error::Unsupported(_) => Error::NotHomogeneous(neuron.layer_id),
        e => e,
    })?;
    if neuron.index >= model.space_width(&topo, s) {
        return Err(Error::InvalidArgument(format!("neuron index {} out of range", neuron.index)));
    }
    let mut m = model.clone();
    m.scale_channel(&topo, s, neuron.index, S::of(lambda));
    Ok(m)
}

/// Reorders the neurons of `layer_id`'s space: new neuron `i` is old
/// neuron `perm[i]`.
pub fn permute_layer<S: Scalar>(model: &Model<S>, layer_id: u32, perm: &[usize]) -> Result<Model<S>> {
    let (topo, s) = editable_space(model, layer_id)?;
    let w = model.space_width(&topo, s);
    if !is_permutation(perm, w) {
        return Err(Error::InvalidPermutation { width: w });
    }
    let mut m = model.clone();
    let slots: Vec<Slot<S>> = perm.iter().map(|&i| Slot::Keep(i)).collect();
    m.remap_space(&topo, s, &slots);
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpandMode {
    /// New kernel taps are zero.
    ZeroPad,
    /// New taps are random, cancelling across input channels that carry
    /// identical activations.
    PairedNonzero,
}

/// Grows the kernel of conv `layer_id` to `new_kh x new_kw`, centred, and
/// raises its padding so the output geometry is unchanged.
pub fn kernel_expand<S: Scalar>(
    model: &Model<S>,
    layer_id: u32,
    new_kh: usize,
    new_kw: usize,
    mode: ExpandMode,
    seed: u64,
) -> Result<Model<S>> {
    model.ensure_valid()?;
    let i = model.index_of(layer_id).ok_or(Error::UnknownLayer(layer_id))?;
    let LayerKind::Conv2d(conv) = &model.layers[i].kind else {
        return Err(Error::InvalidArgument(format!("layer {layer_id} is not a conv layer")));
    };
    if new_kh < conv.kh || new_kw < conv.kw || !(new_kh - conv.kh).is_multiple_of(2) || !(new_kw - conv.kw).is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "cannot expand {}x{} kernel to {new_kh}x{new_kw}: growth must be even and non-negative",
            conv.kh, conv.kw
        )));
    }
    let (eh, ew) = ((new_kh - conv.kh) / 2, (new_kw - conv.kw) / 2);
    let (out, inp) = (conv.out_ch, conv.in_ch);
    let old = conv.weight.data();
    let mut data = vec![S::zero(); out * inp * new_kh * new_kw];
    let at = |o: usize, c: usize, y: usize, x: usize| ((o * inp + c) * new_kh + y) * new_kw + x;
    for o in 0..out {
        for c in 0..inp {
            for y in 0..conv.kh {
                for x in 0..conv.kw {
                    data[at(o, c, y + eh, x + ew)] = old[((o * inp + c) * conv.kh + y) * conv.kw + x];
                }
            }
        }
    }

    if mode == ExpandMode::PairedNonzero {
        let groups = partner_groups(model, layer_id)?;
        let std = {
            let n = old.len() as f64;
            (old.iter().map(|v| v.f64().powi(2)).sum::<f64>() / n).sqrt()
        };
        let mut r = rng::seeded(seed);
        let ring = |y: usize, x: usize| y < eh || y >= eh + conv.kh || x < ew || x >= ew + conv.kw;
        for o in 0..out {
            for y in 0..new_kh {
                for x in 0..new_kw {
                    if !ring(y, x) {
                        continue;
                    }
                    for g in &groups {
                        let mut acc = S::zero();
                        for &c in &g[..g.len() - 1] {
                            let v: S = rng::gaussian(&mut r, 0.0, std);
                            data[at(o, c, y, x)] = v;
                            acc = acc + v;
                        }
                        data[at(o, *g.last().unwrap(), y, x)] = -acc;
                    }
                }
            }
        }
    }

    let mut m = model.clone();
    if let LayerKind::Conv2d(c) = &mut m.layers[i].kind {
        c.weight = Tensor::new(vec![out, inp, new_kh, new_kw], data)?;
        c.kh = new_kh;
        c.kw = new_kw;
        c.pad = (c.pad.0 + eh, c.pad.1 + ew);
    }
    Ok(m)
}

/// Groups of input channels of conv `layer_id` whose producers compute
/// bit-identical activations. Fails if any channel is alone.
fn partner_groups<S: Scalar>(model: &Model<S>, layer_id: u32) -> Result<Vec<Vec<usize>>> {
    let topo = Topology::of(model)?;
    let i = model.index_of(layer_id).ok_or(Error::UnknownLayer(layer_id))?;
    let space = topo
        .spaces
        .iter()
        .position(|s| s.consumers.iter().any(|c| c.layer == i))
        .expect("every conv consumes a space");
    if topo.spaces[space].producers.is_empty() {
        return Err(Error::NoPartner { layer: layer_id, channel: 0 });
    }
    let w = model.space_width(&topo, space);
    let keys: Vec<_> = (0..w)
        .map(|j| {
            let c = model.channel(&topo, space, j);
            (c.rows, c.bias, c.norm)
        })
        .collect();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for j in 0..w {
        match groups.iter_mut().find(|g| keys[g[0]] == keys[j]) {
            Some(g) => g.push(j),
            None => groups.push(vec![j]),
        }
    }
    if let Some(g) = groups.iter().find(|g| g.len() < 2) {
        return Err(Error::NoPartner { layer: layer_id, channel: g[0] });
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::equivalence_check;
    use crate::zoo;

    #[test]
    fn inverse_round_trips() {
        let p = vec![2, 0, 3, 1];
        assert!(is_permutation(&p, 4));
        let inv = inverse(&p);
        let composed: Vec<usize> = (0..4).map(|i| p[inv[i]]).collect();
        assert_eq!(composed, vec![0, 1, 2, 3]);
        assert!(!is_permutation(&[0, 0, 1], 3));
    }

    #[test]
    fn bad_scale_and_bad_perm() {
        let m = zoo::mlp::<f32>(&[3, 5, 2], 0);
        let n = NeuronRef { layer_id: 1, index: 0 };
        assert!(rescale_neuron(&m, n, 0.0).is_err());
        assert!(rescale_neuron(&m, n, -2.0).is_err());
        assert!(matches!(
            permute_layer(&m, 1, &[0, 1, 2]),
            Err(Error::InvalidPermutation { width: 5 })
        ));
    }

    #[test]
    fn zero_pad_expansion_preserves_output() {
        let m = zoo::small_cnn::<f32>(1);
        let m2 = kernel_expand(&m, 3, 5, 5, ExpandMode::ZeroPad, 0).unwrap();
        assert!(equivalence_check(&m, &m2, 50, 2, 1e-5).unwrap().pass);
    }

    #[test]
    fn paired_mode_needs_partners() {
        let m = zoo::small_cnn::<f32>(1);
        assert!(matches!(
            kernel_expand(&m, 3, 5, 5, ExpandMode::PairedNonzero, 0),
            Err(Error::NoPartner { layer: 3, .. })
        ));
    }
}
