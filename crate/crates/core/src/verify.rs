//! Verification harness: BER, scaled BER, decisions and Max-First
//! error handling for size-mismatched models.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{gaussian_inputs, max_deviation, DEFAULT_SAMPLES};
use crate::ir::{Model, Slot, Topology};
use crate::scalar::Scalar;
use crate::watermark::{extract, BitString, Scheme, WatermarkKey};

/// `θ'` in `S(x; θ) = min(1, θ'/θ · x)`; maps `x == θ` to the 0.5 boundary.
pub const THETA_PRIME: f64 = 0.5;

/// Seed of the inputs used for `utility_delta`.
pub const UTILITY_SEED: u64 = 0x7e57;

/// Fraction of differing bits.
pub fn ber(a: &BitString, b: &BitString) -> Result<f64> {
    Ok(a.hamming(b)? as f64 / a.len() as f64)
}

pub fn scaled_ber(raw: f64, theta: f64) -> Result<f64> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::Threshold(theta));
    }
    Ok((THETA_PRIME / theta * raw).min(1.0))
}

/// Shrinks every hidden space whose anchor layer has an entry in
/// `targets` (layer id -> width) by repeatedly deleting the neuron with
/// the smallest `mean|incoming| + mean|outgoing|`, ties to the lowest
/// index. Spaces are handled front to back so later scores see the
/// already-shrunk incoming weights. Returns the model and the number of
/// neurons removed.
pub fn max_first_resize<S: Scalar>(model: &Model<S>, targets: &BTreeMap<u32, usize>) -> Result<(Model<S>, usize)> {
    model.ensure_valid()?;
    let topo = Topology::of(model)?;
    let mut m = model.clone();
    let mut removed = 0;
    for (s, sp) in topo.spaces.iter().enumerate() {
        let Some(target) = sp
            .producers
            .iter()
            .find_map(|p| targets.get(&m.layers[p.layer].id).copied())
        else {
            continue;
        };
        let width = m.space_width(&topo, s);
        if target == width {
            continue;
        }
        if target > width {
            return Err(Error::InvalidArgument(format!(
                "layer {} has {width} neurons, cannot grow to {target}",
                m.layers[sp.anchor()].id
            )));
        }
        topo.ensure_editable(s, m.layers[sp.anchor()].id)?;
        let abs_mean = |v: Vec<S>| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().map(|x| x.f64().abs()).sum::<f64>() / v.len() as f64
            }
        };
        let mut order: Vec<(f64, usize)> = (0..width)
            .map(|j| (abs_mean(m.incoming(&topo, s, j)) + abs_mean(m.outgoing(&topo, s, j)), j))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut drop = vec![false; width];
        order.iter().take(width - target).for_each(|&(_, j)| drop[j] = true);
        let slots: Vec<Slot<S>> = (0..width).filter(|&j| !drop[j]).map(Slot::Keep).collect();
        m.remap_space(&topo, s, &slots);
        removed += width - target;
    }
    m.ensure_valid()?;
    Ok((m, removed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Retained,
    Removed,
    Inexecutable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorHandling {
    None,
    MaxFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictReport {
    pub scheme: Scheme,
    pub raw_ber: Option<f64>,
    pub theta: f64,
    pub scaled_ber: Option<f64>,
    pub decision: Decision,
    pub error_handling: ErrorHandling,
    pub neurons_removed_by_handling: usize,
    /// Max absolute output deviation from the reference model on seeded
    /// Gaussian inputs.
    pub utility_delta: Option<f64>,
    pub extracted: Option<BitString>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// Extracts under `key` and compares with `message`. A dimension mismatch
/// triggers Max-First towards the key's recorded widths. Every failure is
/// reported as a state, never returned or panicked.
pub fn verify<S: Scalar>(
    model: &Model<S>,
    key: &WatermarkKey,
    message: &BitString,
    theta: f64,
    reference: Option<&Model<S>>,
) -> VerdictReport {
    let mut rep = VerdictReport {
        scheme: key.scheme,
        raw_ber: None,
        theta,
        scaled_ber: None,
        decision: Decision::Inexecutable,
        error_handling: ErrorHandling::None,
        neurons_removed_by_handling: 0,
        utility_delta: None,
        extracted: None,
        detail: None,
    };
    if let Some(r) = reference {
        let inputs = gaussian_inputs(&model.input_shape, DEFAULT_SAMPLES, UTILITY_SEED);
        match max_deviation(model, r, &inputs) {
            Ok(d) => rep.utility_delta = Some(d),
            Err(e) => rep.detail = Some(format!("utility: {e}")),
        }
    }
    if let Err(e) = scaled_ber(0.0, theta) {
        rep.detail = Some(e.to_string());
        return rep;
    }
    let bits = match extract(model, key) {
        Ok(b) => b,
        Err(e) if e.is_dimension_mismatch() => {
            rep.error_handling = ErrorHandling::MaxFirst;
            let resized = match max_first_resize(model, &key.expected_widths) {
                Ok(r) => r,
                Err(e2) => {
                    rep.detail = Some(format!("{e}; max-first failed: {e2}"));
                    return rep;
                }
            };
            rep.neurons_removed_by_handling = resized.1;
            match extract(&resized.0, key) {
                Ok(b) => b,
                Err(e2) => {
                    rep.detail = Some(format!("{e}; after max-first: {e2}"));
                    return rep;
                }
            }
        }
        Err(e) => {
            rep.detail = Some(e.to_string());
            return rep;
        }
    };
    match ber(&bits, message) {
        Ok(raw) => {
            let scaled = scaled_ber(raw, theta).expect("theta checked");
            rep.raw_ber = Some(raw);
            rep.scaled_ber = Some(scaled);
            rep.decision = if scaled > 0.5 { Decision::Removed } else { Decision::Retained };
        }
        Err(e) => rep.detail = Some(e.to_string()),
    }
    rep.extracted = Some(bits);
    rep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{Dense, LayerKind, LayerSpec, Tensor};

    fn bs(s: &str) -> BitString {
        s.parse().unwrap()
    }

    #[test]
    fn ber_examples() {
        assert_eq!(ber(&bs("10110"), &bs("10110")).unwrap(), 0.0);
        assert_eq!(ber(&bs("10110"), &bs("10010")).unwrap(), 0.2);
        let s = bs("10110");
        assert_eq!(ber(&s, &s.complement()).unwrap(), 1.0);
        assert!(ber(&bs("1"), &bs("10")).is_err());
    }

    #[test]
    fn scaled_ber_examples() {
        assert_eq!(scaled_ber(0.4386, 0.4386).unwrap(), 0.5);
        assert!((scaled_ber(0.30, 0.4386).unwrap() - 0.342_0).abs() < 1e-3);
        assert_eq!(scaled_ber(0.9, 0.345).unwrap(), 1.0);
        assert!(scaled_ber(0.1, 0.0).is_err());
        assert!(scaled_ber(0.1, 1.0).is_err());
    }

    /// 2 -> 3 -> 1 MLP whose hidden scores are 0.5, 0.01 and 0.3.
    fn scored() -> Model<f64> {
        let w1 = Tensor::new(vec![3, 2], vec![0.5, 0.5, 0.01, 0.01, 0.3, 0.3]).unwrap();
        let w2 = Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap();
        Model::new(
            vec![2],
            vec![
                LayerSpec::new(1, LayerKind::Dense(Dense::new(w1, None))),
                LayerSpec::new(2, LayerKind::Relu),
                LayerSpec::new(3, LayerKind::Dense(Dense::new(w2, None))),
            ],
        )
    }

    #[test]
    fn max_first_drops_the_smallest_score() {
        let m = scored();
        let (r, n) = max_first_resize(&m, &[(1, 2)].into_iter().collect()).unwrap();
        assert_eq!(n, 1);
        let LayerKind::Dense(d) = &r.layers[0].kind else { panic!() };
        assert_eq!(d.weight.data(), &[0.5, 0.5, 0.3, 0.3]);
    }

    #[test]
    fn max_first_identity_and_growth() {
        let m = scored();
        let (r, n) = max_first_resize(&m, &[(1, 3)].into_iter().collect()).unwrap();
        assert_eq!((r, n), (m.clone(), 0));
        assert!(max_first_resize(&m, &[(1, 4)].into_iter().collect()).is_err());
    }

    #[test]
    fn max_first_ties_go_to_the_lowest_index() {
        let w1 = Tensor::new(vec![3, 1], vec![1.0, 1.0, 1.0]).unwrap();
        let w2 = Tensor::new(vec![1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        let m: Model<f64> = Model::new(
            vec![1],
            vec![
                LayerSpec::new(1, LayerKind::Dense(Dense::new(w1, Some(Tensor::from_vec(vec![1.0, 2.0, 3.0]))))),
                LayerSpec::new(2, LayerKind::Relu),
                LayerSpec::new(3, LayerKind::Dense(Dense::new(w2, None))),
            ],
        );
        let (r, _) = max_first_resize(&m, &[(1, 2)].into_iter().collect()).unwrap();
        let LayerKind::Dense(d) = &r.layers[0].kind else { panic!() };
        assert_eq!(d.bias.as_ref().unwrap().data(), &[2.0, 3.0]);
    }
}
