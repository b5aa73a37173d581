//! Dummy-neuron elimination by merging neurons with proportional incoming
//! weights, and full recovery against a reference model.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ir::{Channel, LayerKind, Model, NeuronRef, Slot, Tensor, Topology};
use crate::ir::topology::scale_channel_data;
use crate::scalar::Scalar;

/// Decimal places kept when hashing normalized incoming weights.
pub const HASH_DECIMALS: i32 = 6;
/// Cosine a candidate must reach to join a bucket.
pub const COSINE_MIN: f64 = 1.0 - 1e-6;
/// Absolute floor below which a weight vector counts as zero.
pub const ZERO_ABS: f64 = 1e-7;
/// Cancellation residue allowed relative to the merged terms' magnitude.
pub const ZERO_REL: f64 = 1e-6;
/// Per-weight tolerance for declaring a recovery exact.
pub const RECOVER_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerElimination {
    pub layer_id: u32,
    pub width_before: usize,
    pub width_after: usize,
    /// Buckets of two or more neurons merged into one (pre-elimination
    /// indices).
    pub merged: Vec<Vec<usize>>,
    pub removed_zero_incoming: Vec<usize>,
    pub removed_zero_outgoing: Vec<usize>,
}

impl LayerElimination {
    pub fn removed(&self) -> usize {
        self.width_before - self.width_after
    }
}

fn eff64<S: Scalar>(m: &Model<S>, topo: &Topology, s: usize, j: usize) -> Vec<f64> {
    m.incoming_effective(topo, s, j).iter().map(|v| v.f64()).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn abs_max(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

struct Bucket {
    unit: Vec<f64>,
    members: Vec<(usize, f64)>,
}

/// Front to back over every editable hidden layer: normalizes each
/// neuron's effective incoming weights, buckets equal directions, merges
/// each bucket into one neuron whose outgoing weights are the
/// norm-weighted sum of its members', then drops neurons with zero
/// incoming or merged outgoing weights. No-op on clean models apart from
/// the normalization, which is output-preserving.
pub fn eliminate_dummy<S: Scalar>(model: &Model<S>) -> Result<(Model<S>, Vec<LayerElimination>)> {
    model.ensure_valid()?;
    let topo = Topology::of(model)?;
    let mut m = model.clone();
    let mut log = Vec::new();
    for s in topo.hidden() {
        let id = m.layers[topo.spaces[s].anchor()].id;
        if topo.ensure_editable(s, id).is_err() {
            continue;
        }
        let width = m.space_width(&topo, s);
        let mut entry = LayerElimination {
            layer_id: id,
            width_before: width,
            width_after: width,
            merged: vec![],
            removed_zero_incoming: vec![],
            removed_zero_outgoing: vec![],
        };
        let mut buckets: Vec<Bucket> = Vec::new();
        let mut table: HashMap<Vec<i64>, usize> = HashMap::new();
        let q = 10f64.powi(HASH_DECIMALS);
        for j in 0..width {
            let e = eff64(&m, &topo, s, j);
            if abs_max(&e) < ZERO_ABS {
                entry.removed_zero_incoming.push(j);
                continue;
            }
            let n = norm(&e);
            let unit: Vec<f64> = e.iter().map(|v| v / n).collect();
            let key: Vec<i64> = unit.iter().map(|v| (v * q).round() as i64).collect();
            let hit = table.get(&key).copied().or_else(|| {
                // Rounding can straddle a quantization boundary.
                buckets.iter().position(|b| dot(&b.unit, &unit) >= COSINE_MIN)
            });
            match hit {
                Some(b) => buckets[b].members.push((j, n)),
                None => {
                    table.insert(key, buckets.len());
                    buckets.push(Bucket {
                        unit,
                        members: vec![(j, n)],
                    });
                }
            }
        }
        let mut slots: Vec<Slot<S>> = Vec::with_capacity(buckets.len());
        for b in &buckets {
            let (rep, rep_norm) = b.members[0];
            let mut ch: Channel<S> = m.channel(&topo, s, rep);
            scale_channel_data(&mut ch, S::of(1.0 / rep_norm));
            let mut scale = 0.0f64;
            let mut merged: Vec<Vec<f64>> = ch.cols.iter().map(|c| vec![0.0; c.len()]).collect();
            for &(k, nk) in &b.members {
                let cols = m.channel(&topo, s, k).cols;
                for (acc, c) in merged.iter_mut().zip(&cols) {
                    acc.iter_mut().zip(c).for_each(|(a, v)| *a += nk * v.f64());
                    scale = scale.max(nk * c.iter().fold(0.0f64, |a, v| a.max(v.f64().abs())));
                }
            }
            if b.members.len() > 1 {
                entry.merged.push(b.members.iter().map(|x| x.0).collect());
            }
            let peak = merged.iter().map(|c| abs_max(c)).fold(0.0, f64::max);
            if peak < ZERO_ABS || (b.members.len() > 1 && peak <= ZERO_REL * scale) {
                entry.removed_zero_outgoing.extend(b.members.iter().map(|x| x.0));
                continue;
            }
            ch.cols = merged.iter().map(|c| c.iter().map(|&v| S::of(v)).collect()).collect();
            slots.push(Slot::New(ch));
        }
        entry.width_after = slots.len();
        if slots.is_empty() {
            // Never empty a layer; keep the original and log nothing.
            continue;
        }
        m.remap_space(&topo, s, &slots);
        log.push(entry);
    }
    m.ensure_valid()?;
    Ok((m, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub recovered: bool,
    /// Largest absolute parameter difference from the reference, when the
    /// architectures match.
    pub max_abs_diff: Option<f64>,
    /// Conv layers whose zero rings were cropped.
    pub cropped: Vec<u32>,
    /// Reference neurons with two equally good candidates.
    pub ambiguous: Vec<NeuronRef>,
    pub elimination: Vec<LayerElimination>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// Crops all-zero border rings from convs whose kernels outgrew the
/// reference's, restoring the original padding.
fn crop_kernels<S: Scalar>(m: &mut Model<S>, reference: &Model<S>) -> (Vec<u32>, Vec<String>) {
    let (mut cropped, mut notes) = (Vec::new(), Vec::new());
    for l in &mut m.layers {
        let (LayerKind::Conv2d(c), Ok(r)) = (&mut l.kind, reference.layer(l.id)) else {
            continue;
        };
        let LayerKind::Conv2d(rc) = &r.kind else { continue };
        if c.kh == rc.kh && c.kw == rc.kw {
            continue;
        }
        if c.kh < rc.kh || c.kw < rc.kw || (c.kh - rc.kh) % 2 != 0 || (c.kw - rc.kw) % 2 != 0 {
            notes.push(format!("layer {}: kernel {}x{} cannot crop to {}x{}", l.id, c.kh, c.kw, rc.kh, rc.kw));
            continue;
        }
        let (eh, ew) = ((c.kh - rc.kh) / 2, (c.kw - rc.kw) / 2);
        let w = c.weight.data();
        let at = |o: usize, i: usize, y: usize, x: usize| ((o * c.in_ch + i) * c.kh + y) * c.kw + x;
        let inner = |y: usize, x: usize| y >= eh && y < eh + rc.kh && x >= ew && x < ew + rc.kw;
        let mut data = Vec::with_capacity(c.out_ch * c.in_ch * rc.kh * rc.kw);
        let mut ring_zero = true;
        for o in 0..c.out_ch {
            for i in 0..c.in_ch {
                for y in 0..c.kh {
                    for x in 0..c.kw {
                        let v = w[at(o, i, y, x)];
                        if inner(y, x) {
                            data.push(v);
                        } else if v != S::zero() {
                            ring_zero = false;
                        }
                    }
                }
            }
        }
        if !ring_zero || c.pad.0 < eh || c.pad.1 < ew {
            notes.push(format!("layer {}: expanded kernel ring is not zero", l.id));
            continue;
        }
        c.weight = Tensor::new(vec![c.out_ch, c.in_ch, rc.kh, rc.kw], data).expect("sizes match");
        c.kh = rc.kh;
        c.kw = rc.kw;
        c.pad = (c.pad.0 - eh, c.pad.1 - ew);
        cropped.push(l.id);
    }
    (cropped, notes)
}

fn same_architecture<S: Scalar>(a: &Model<S>, b: &Model<S>) -> bool {
    a.input_shape == b.input_shape
        && a.layers.len() == b.layers.len()
        && a.layers.iter().zip(&b.layers).all(|(x, y)| {
            x.id == y.id
                && x.kind.tag() == y.kind.tag()
                && match (&x.kind, &y.kind) {
                    (LayerKind::Conv2d(p), LayerKind::Conv2d(q)) => {
                        p.weight.shape() == q.weight.shape() && p.stride == q.stride && p.pad == q.pad
                    }
                    (LayerKind::Dense(p), LayerKind::Dense(q)) => p.weight.shape() == q.weight.shape(),
                    (LayerKind::Norm(p), LayerKind::Norm(q)) => p.channels == q.channels,
                    (LayerKind::ResidualAdd { source: p }, LayerKind::ResidualAdd { source: q }) => p == q,
                    _ => true,
                }
        })
}

fn params<S: Scalar>(m: &Model<S>) -> Vec<f64> {
    let mut v = Vec::new();
    for l in &m.layers {
        match &l.kind {
            LayerKind::Conv2d(_) | LayerKind::Dense(_) => {
                v.extend(l.kind.weight().unwrap().data().iter().map(|x| x.f64()));
                if let Some(b) = l.kind.bias() {
                    v.extend(b.data().iter().map(|x| x.f64()));
                }
            }
            LayerKind::Norm(n) => {
                for p in [&n.gamma, &n.beta, &n.mean, &n.std] {
                    v.extend(p.iter().map(|x| x.f64()));
                }
            }
            _ => {}
        }
    }
    v
}

/// Largest absolute parameter difference, or `None` when the two models
/// do not share an architecture.
pub fn parameter_distance<S: Scalar>(a: &Model<S>, b: &Model<S>) -> Option<f64> {
    if !same_architecture(a, b) {
        return None;
    }
    Some(
        params(a)
            .iter()
            .zip(params(b))
            .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs())),
    )
}

/// Undoes an obfuscation with the original model at hand: crops zero-pad
/// kernel rings, eliminates dummies, then matches every surviving neuron
/// to a reference neuron by cosine of effective incoming weights (greedy,
/// front to back) and restores order and scale.
pub fn recover_with_reference<S: Scalar>(obfuscated: &Model<S>, original: &Model<S>) -> Result<(Model<S>, RecoveryReport)> {
    original.ensure_valid()?;
    let mut m = obfuscated.clone();
    let (cropped, mut notes) = crop_kernels(&mut m, original);
    let (mut m, elimination) = eliminate_dummy(&m)?;
    let mut rep = RecoveryReport {
        recovered: false,
        max_abs_diff: None,
        cropped,
        ambiguous: vec![],
        elimination,
        detail: None,
    };
    if !same_architecture(&m, original) {
        notes.push("architecture differs from the reference after elimination".into());
        rep.detail = Some(notes.join("; "));
        return Ok((m, rep));
    }
    let topo = Topology::of(&m)?;
    let otopo = Topology::of(original)?;
    let input_space = |layer: usize| topo.spaces.iter().position(|sp| sp.consumers.iter().any(|c| c.layer == layer));
    // Spaces whose order and scale match the reference.
    let mut settled: Vec<bool> = topo.spaces.iter().map(|sp| sp.producers.is_empty()).collect();
    for s in topo.hidden() {
        let id = m.layers[topo.spaces[s].anchor()].id;
        if topo.ensure_editable(s, id).is_err() {
            continue;
        }
        let os = otopo.space_of(id)?;
        let n = m.space_width(&topo, s);
        // Only producers fed by settled spaces give comparable weights;
        // a residual branch may read from a space not yet restored.
        let use_producer: Vec<bool> = topo.spaces[s]
            .producers
            .iter()
            .map(|p| input_space(p.layer).is_some_and(|i| settled[i]))
            .collect();
        let keep_all = !use_producer.iter().any(|&u| u);
        let select = |model: &Model<S>, t: &Topology, sp: usize, j: usize| -> Vec<f64> {
            let e = eff64(model, t, sp, j);
            let ch = model.channel(t, sp, j);
            let mut out = Vec::with_capacity(e.len());
            let mut at = 0;
            for (k, row) in ch.rows.iter().enumerate() {
                let len = row.len() + 1;
                if keep_all || use_producer[k] {
                    out.extend_from_slice(&e[at..at + len]);
                }
                at += len;
            }
            out
        };
        let orig: Vec<Vec<f64>> = (0..n).map(|i| select(original, &otopo, os, i)).collect();
        let cur: Vec<Vec<f64>> = (0..n).map(|j| select(&m, &topo, s, j)).collect();
        let (on, cn): (Vec<f64>, Vec<f64>) = (orig.iter().map(|v| norm(v)).collect(), cur.iter().map(|v| norm(v)).collect());
        let cos = |i: usize, j: usize| {
            if on[i] == 0.0 || cn[j] == 0.0 {
                -1.0
            } else {
                dot(&orig[i], &cur[j]) / (on[i] * cn[j])
            }
        };
        let mut pairs: Vec<(f64, usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| (cos(i, j), i, j)).collect();
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut of_orig = vec![usize::MAX; n];
        let mut taken = vec![false; n];
        for &(_, i, j) in &pairs {
            if of_orig[i] == usize::MAX && !taken[j] {
                of_orig[i] = j;
                taken[j] = true;
            }
        }
        for i in 0..n {
            let mut c: Vec<f64> = (0..n).map(|j| cos(i, j)).collect();
            c.sort_by(|a, b| b.total_cmp(a));
            if n > 1 && (c[0] - c[1]).abs() < 1e-12 {
                rep.ambiguous.push(NeuronRef { layer_id: id, index: i });
            }
        }
        let slots: Vec<Slot<S>> = of_orig.iter().map(|&j| Slot::Keep(j)).collect();
        m.remap_space(&topo, s, &slots);
        for i in 0..n {
            let j = of_orig[i];
            if cn[j] > 0.0 && on[i] > 0.0 {
                m.scale_channel(&topo, s, i, S::of(on[i] / cn[j]));
            }
        }
        settled[s] = true;
    }
    rep.max_abs_diff = parameter_distance(&m, original);
    rep.recovered = rep.max_abs_diff.is_some_and(|d| d <= RECOVER_TOL);
    if !notes.is_empty() {
        rep.detail = Some(notes.join("; "));
    }
    Ok((m, rep))
}
