//! Anomaly detection of dummy neurons from their weight features.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{Model, NeuronRef, Topology};
use crate::obfuscate::{ObfuscationPlan, Primitive};
use crate::rng;
use crate::scalar::Scalar;

pub const MIN_WIDTH: usize = 4;
pub const RESTARTS: usize = 50;
const LLOYD_STEPS: usize = 100;

/// Flattened incoming weights of a neuron followed by its outgoing weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronFeature {
    pub neuron: NeuronRef,
    pub vector: Vec<f64>,
}

/// Features of every neuron in the space produced by `layer_id`.
pub fn neuron_features<S: Scalar>(model: &Model<S>, layer_id: u32) -> Result<Vec<NeuronFeature>> {
    let topo = Topology::of(model)?;
    let s = topo.space_of(layer_id)?;
    Ok((0..model.space_width(&topo, s))
        .map(|j| {
            let mut v: Vec<f64> = model.incoming(&topo, s, j).iter().map(|x| x.f64()).collect();
            v.extend(model.outgoing(&topo, s, j).iter().map(|x| x.f64()));
            NeuronFeature {
                neuron: NeuronRef { layer_id, index: j },
                vector: v,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cluster,
    Svd,
}

/// Magnitudes of the features. Signs of random weights are symmetric
/// noise; the magnitude profile is what separates dummies.
fn magnitudes(feats: &[NeuronFeature]) -> Result<Vec<Vec<f64>>> {
    if feats.len() < MIN_WIDTH {
        return Err(Error::InvalidArgument(format!(
            "detection needs at least {MIN_WIDTH} neurons, layer has {}",
            feats.len()
        )));
    }
    Ok(feats.iter().map(|f| f.vector.iter().map(|v| v.abs()).collect()).collect())
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn degenerate(x: &[Vec<f64>]) -> bool {
    x.iter().all(|r| r == &x[0])
}

/// One k-means++ seeded Lloyd run with k = 2. Returns labels and inertia.
fn two_means(x: &[Vec<f64>], r: &mut rng::Rng64) -> (Vec<usize>, f64) {
    let n = x.len();
    let first = r.random_range(0..n);
    let d: Vec<f64> = x.iter().map(|p| dist2(p, &x[first])).collect();
    let total: f64 = d.iter().sum();
    let mut pick = r.random::<f64>() * total;
    let mut second = n - 1;
    for (i, di) in d.iter().enumerate() {
        if pick < *di {
            second = i;
            break;
        }
        pick -= di;
    }
    let mut c = [x[first].clone(), x[second].clone()];
    let mut labels = vec![0; n];
    for _ in 0..LLOYD_STEPS {
        let next: Vec<usize> = x
            .iter()
            .map(|p| usize::from(dist2(p, &c[1]) < dist2(p, &c[0])))
            .collect();
        let changed = next != labels;
        labels = next;
        for (k, ck) in c.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = x.iter().zip(&labels).filter(|(_, &l)| l == k).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            ck.iter_mut().enumerate().for_each(|(j, v)| {
                *v = members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64;
            });
        }
        if !changed {
            break;
        }
    }
    let inertia = x.iter().zip(&labels).map(|(p, &l)| dist2(p, &c[l])).sum();
    (labels, inertia)
}

/// 2-means over feature magnitudes; the smaller cluster is flagged, ties
/// go to the cluster with the smaller mean norm.
pub fn detect_cluster<S: Scalar>(model: &Model<S>, layer_id: u32, seed: u64) -> Result<Vec<NeuronRef>> {
    let feats = neuron_features(model, layer_id)?;
    let x = magnitudes(&feats)?;
    if degenerate(&x) {
        return Ok(vec![]);
    }
    let mut r = rng::seeded(seed);
    let (labels, _) = (0..RESTARTS)
        .map(|_| two_means(&x, &mut r))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least one restart");
    let size = |k: usize| labels.iter().filter(|&&l| l == k).count();
    let norm = |k: usize| {
        let idx: Vec<usize> = (0..x.len()).filter(|&i| labels[i] == k).collect();
        idx.iter().map(|&i| x[i].iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>() / idx.len().max(1) as f64
    };
    let flag = match size(0).cmp(&size(1)) {
        std::cmp::Ordering::Less => 0,
        std::cmp::Ordering::Greater => 1,
        std::cmp::Ordering::Equal => usize::from(norm(1) < norm(0)),
    };
    Ok(feats
        .iter()
        .zip(&labels)
        .filter(|(_, &l)| l == flag)
        .map(|(f, _)| f.neuron)
        .collect())
}

/// Spectral outlier scores: squared projection of each centered feature
/// onto the top right-singular vector.
pub fn svd_scores(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let dim = x[0].len();
    let mean: Vec<f64> = (0..dim).map(|j| x.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
    let c: Vec<Vec<f64>> = x
        .iter()
        .map(|p| p.iter().zip(&mean).map(|(a, m)| a - m).collect())
        .collect();
    // Gram matrix C C^T: its top eigenvector u gives projections sigma * u.
    let gram: DMatrix<f64> = DMatrix::from_fn(n, n, |i, j| c[i].iter().zip(&c[j]).map(|(a, b)| a * b).sum());
    let eig = SymmetricEigen::new(gram);
    let (top, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a: &(usize, &f64), b: &(usize, &f64)| a.1.total_cmp(b.1))
        .expect("n >= 1");
    let lam = eig.eigenvalues[top].max(0.0);
    eig.eigenvectors.column(top).iter().map(|u| lam * u * u).collect()
}

/// Flags neurons whose spectral score exceeds mean + 2 std.
pub fn detect_svd<S: Scalar>(model: &Model<S>, layer_id: u32) -> Result<Vec<NeuronRef>> {
    let feats = neuron_features(model, layer_id)?;
    let x = magnitudes(&feats)?;
    if degenerate(&x) {
        return Ok(vec![]);
    }
    let s = svd_scores(&x);
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let std = (s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    Ok(feats
        .iter()
        .zip(&s)
        .filter(|(_, &v)| v > mean + 2.0 * std)
        .map(|(f, _)| f.neuron)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDetection {
    pub layer_id: u32,
    pub width: usize,
    pub flagged: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveRate {
    pub dummies: usize,
    pub detected: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub method: Method,
    pub layers: Vec<LayerDetection>,
    /// Fraction of each primitive's dummies that were flagged; present
    /// when the attack plan is known.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub rates: BTreeMap<Primitive, PrimitiveRate>,
    /// Flagged neurons that are not dummies, over all non-dummies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub false_positive_rate: Option<f64>,
}

impl DetectionReport {
    pub fn rate(&self, p: Primitive) -> Option<f64> {
        self.rates.get(&p).map(|r| r.rate)
    }
}

/// Runs `method` on every editable hidden layer of width at least
/// [`MIN_WIDTH`], scoring against `plan` when given.
pub fn detect<S: Scalar>(
    model: &Model<S>,
    method: Method,
    plan: Option<&ObfuscationPlan>,
    seed: u64,
) -> Result<DetectionReport> {
    let topo = Topology::of(model)?;
    let mut layers = Vec::new();
    for s in topo.hidden() {
        let sp = &topo.spaces[s];
        let id = model.layers[sp.anchor()].id;
        let width = model.space_width(&topo, s);
        if topo.ensure_editable(s, id).is_err() || width < MIN_WIDTH {
            continue;
        }
        let flagged = match method {
            Method::Cluster => detect_cluster(model, id, rng::child(seed, id as u64))?,
            Method::Svd => detect_svd(model, id)?,
        };
        layers.push(LayerDetection {
            layer_id: id,
            width,
            flagged: flagged.into_iter().map(|n| n.index).collect(),
        });
    }
    let mut rep = DetectionReport {
        method,
        layers,
        rates: BTreeMap::new(),
        false_positive_rate: None,
    };
    if let Some(plan) = plan {
        let (mut fp, mut clean) = (0usize, 0usize);
        for l in &rep.layers {
            let dummies: BTreeMap<usize, Primitive> = plan.dummies(l.layer_id).into_iter().collect();
            for (&i, &p) in &dummies {
                let e = rep.rates.entry(p).or_insert(PrimitiveRate {
                    dummies: 0,
                    detected: 0,
                    rate: 0.0,
                });
                e.dummies += 1;
                e.detected += usize::from(l.flagged.contains(&i));
            }
            clean += l.width - dummies.len();
            fp += l.flagged.iter().filter(|i| !dummies.contains_key(i)).count();
        }
        for r in rep.rates.values_mut() {
            r.rate = r.detected as f64 / r.dummies as f64;
        }
        rep.false_positive_rate = (clean > 0).then(|| fp as f64 / clean as f64);
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::obfuscate::{neuron_zero_inject, ZeroSide};
    use crate::zoo;

    #[test]
    fn features_concatenate_incoming_and_outgoing() {
        let m = zoo::mlp::<f32>(&[3, 5, 2], 0);
        let f = neuron_features(&m, 1).unwrap();
        assert_eq!(f.len(), 5);
        assert_eq!(f[0].vector.len(), 3 + 2);
    }

    #[test]
    fn zero_dummies_are_flagged_by_both_detectors() {
        let m = zoo::mlp::<f32>(&[32, 64, 64, 10], 1);
        let (att, _) = neuron_zero_inject(&m, 3, 3, ZeroSide::Incoming, 5).unwrap();
        let dummies: Vec<NeuronRef> = (64..67).map(|index| NeuronRef { layer_id: 3, index }).collect();
        let c = detect_cluster(&att, 3, 0).unwrap();
        assert!(dummies.iter().all(|d| c.contains(d)), "{c:?}");
        let s = detect_svd(&att, 3).unwrap();
        assert!(dummies.iter().all(|d| s.contains(d)), "{s:?}");
    }

    #[test]
    fn identical_features_flag_nothing() {
        let x = vec![vec![1.0, 2.0]; 5];
        assert!(degenerate(&x));
    }

    #[test]
    fn narrow_layers_are_rejected() {
        let m = zoo::mlp::<f32>(&[3, 3, 2], 0);
        assert!(detect_svd(&m, 1).is_err());
    }

    #[test]
    fn svd_scores_single_outlier() {
        let mut x: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0 + 0.01 * i as f64, 1.0]).collect();
        x.push(vec![10.0, 1.0]);
        let s = svd_scores(&x);
        let top = s.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(top, 10);
    }
}
