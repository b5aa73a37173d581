use rand::seq::SliceRandom;
use rand::Rng;

use super::camouflage::{kernel_expand, ExpandMode};
use super::primitives::{anchor_id, clique_into, split_into, zero_into};
use super::{DummyGroup, KernelPadding, LayerGrowth, LayerPermutation, ObfuscationConfig, ObfuscationPlan, Primitive};
use crate::error::{Error, Result};
use crate::ir::{LayerKind, Model, Slot, Topology};
use crate::rng::{self, Rng64};
use crate::scalar::Scalar;

fn pick_primitive(cfg: &ObfuscationConfig, r: &mut Rng64) -> Primitive {
    let u: f64 = r.random();
    let mut acc = 0.0;
    let mut last = Primitive::Split;
    for p in Primitive::ALL {
        let w = cfg.mix.weight(p);
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = p;
        if u < acc {
            return p;
        }
    }
    last
}

fn pick_size(sizes: &[usize], r: &mut Rng64) -> usize {
    sizes[r.random_range(0..sizes.len())]
}

/// Injects dummy neurons into every hidden layer, last layer first, then
/// applies the configured camouflage.
///
/// Each hidden layer of width `n` gains exactly `ceil(alpha * n)` neurons.
/// Layers joined by a residual connection share one channel space and are
/// therefore expanded identically.
pub fn inject_campaign<S: Scalar>(model: &Model<S>, cfg: &ObfuscationConfig) -> Result<(Model<S>, ObfuscationPlan)> {
    cfg.validate()?;
    model.ensure_valid()?;
    let topo = Topology::of(model)?;
    let hidden = topo.hidden();
    for &s in &hidden {
        let id = anchor_id(model, &topo, s);
        topo.ensure_editable(s, id)?;
    }

    let mut r = rng::seeded(cfg.seed);
    let mut m = model.clone();
    let mut plan = ObfuscationPlan {
        seed: cfg.seed,
        alpha: cfg.alpha,
        config: cfg.clone(),
        groups: vec![],
        growth: vec![],
        permutations: vec![],
        paddings: vec![],
    };

    for &s in hidden.iter().rev() {
        let layer_id = anchor_id(&m, &topo, s);
        let n = m.space_width(&topo, s);
        let mut remaining = cfg.count_for(n);
        let mut splittable: Vec<usize> = (0..n).collect();
        let mut groups: Vec<DummyGroup> = Vec::new();
        while remaining > 0 {
            let mut p = pick_primitive(cfg, &mut r);
            if p == Primitive::Clique && remaining < 2 {
                p = Primitive::Split;
            }
            let g = match p {
                Primitive::Zero => {
                    let d = pick_size(&cfg.zero_sizes, &mut r).min(remaining);
                    zero_into(&mut m, &topo, s, d, cfg.zero_side, &mut r)
                }
                Primitive::Clique => {
                    let mut d = pick_size(&cfg.clique_sizes, &mut r).clamp(2, remaining);
                    // Never strand a single slot that only a Split could fill.
                    if remaining - d == 1 {
                        if d > 2 {
                            d -= 1;
                        } else if d < remaining {
                            d += 1;
                        }
                    }
                    clique_into(&mut m, &topo, s, d, &mut r)
                }
                Primitive::Split => {
                    let d = pick_size(&cfg.split_sizes, &mut r).min(remaining);
                    let j = splittable.swap_remove(r.random_range(0..splittable.len()));
                    split_into(&mut m, &topo, s, j, d, &mut r)
                }
            };
            remaining -= g.added().len();
            groups.push(g);
        }

        if cfg.rescale {
            let (lo, hi) = cfg.scale_range;
            for g in &mut groups {
                for (k, &j) in g.member_indices.iter().enumerate() {
                    let lambda = rng::log_uniform(&mut r, lo, hi);
                    m.scale_channel(&topo, s, j, S::of(lambda));
                    g.scales[k] = lambda;
                }
            }
        }

        let width = m.space_width(&topo, s);
        if cfg.permute && !groups.is_empty() {
            let mut perm: Vec<usize> = (0..width).collect();
            perm.shuffle(&mut r);
            let slots: Vec<Slot<S>> = perm.iter().map(|&i| Slot::Keep(i)).collect();
            m.remap_space(&topo, s, &slots);
            groups.iter_mut().for_each(|g| g.remap(&perm));
            plan.permutations.push(LayerPermutation { layer_id, perm });
        }
        plan.growth.push(LayerGrowth {
            layer_id,
            before: n,
            after: width,
        });
        plan.groups.extend(groups);
    }

    if cfg.kernel_growth > 0 {
        let convs: Vec<u32> = m
            .layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv2d(_)))
            .map(|l| l.id)
            .collect();
        for id in convs {
            let (kh, kw) = match &m.layer(id)?.kind {
                LayerKind::Conv2d(c) => (c.kh, c.kw),
                _ => unreachable!(),
            };
            let g = 2 * cfg.kernel_growth;
            m = kernel_expand(&m, id, kh + g, kw + g, ExpandMode::ZeroPad, 0)?;
            if let LayerKind::Conv2d(c) = &m.layer(id)?.kind {
                plan.paddings.push(KernelPadding {
                    layer_id: id,
                    kh: c.kh,
                    kw: c.kw,
                    pad: c.pad,
                });
            }
        }
    }
    Ok((m, plan))
}

/// Re-runs a recorded campaign on `model`. Fails if the replay does not
/// reproduce the recorded plan, i.e. `model` is not the plan's source.
pub fn replay<S: Scalar>(model: &Model<S>, plan: &ObfuscationPlan) -> Result<Model<S>> {
    let (m, p) = inject_campaign(model, &plan.config)?;
    if &p != plan {
        return Err(Error::InvalidArgument("plan does not match this model".into()));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::equivalence_check;
    use crate::obfuscate::Mix;
    use crate::zoo;

    #[test]
    fn widths_grow_by_ceil_alpha_n() {
        let m = zoo::mlp::<f32>(&[6, 20, 10, 3], 4);
        let cfg = ObfuscationConfig::new(0.25, Mix::default(), 8);
        let (m2, plan) = inject_campaign(&m, &cfg).unwrap();
        assert_eq!(m2.widths()[&1], 25);
        assert_eq!(m2.widths()[&3], 13);
        assert_eq!(m2.widths()[&5], 3);
        assert_eq!(plan.growth[0].layer_id, 3);
        assert!(equivalence_check(&m, &m2, 100, 1, 1e-4).unwrap().pass);
    }

    #[test]
    fn replay_is_bit_exact() {
        let m = zoo::small_cnn::<f32>(4);
        let cfg = ObfuscationConfig::new(0.5, Mix::default(), 21);
        let (m2, plan) = inject_campaign(&m, &cfg).unwrap();
        let back = ObfuscationPlan::from_json(&plan.to_json().unwrap()).unwrap();
        assert_eq!(replay(&m, &back).unwrap(), m2);
    }

    #[test]
    fn pure_clique_with_one_slot_falls_back_to_split() {
        let m = zoo::mlp::<f32>(&[4, 8, 3], 0);
        let cfg = ObfuscationConfig::new(0.1, Mix::only(Primitive::Clique), 0);
        let (_, plan) = inject_campaign(&m, &cfg).unwrap();
        assert_eq!(plan.groups.len(), 1);
        assert_eq!(plan.groups[0].kind, Primitive::Split);
    }
}
