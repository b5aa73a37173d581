use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{LayerKind, LayerSpec, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A sequential feed-forward network. Residual connections are explicit
/// `ResidualAdd` layers pointing back at an earlier layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<S = f32> {
    pub layers: Vec<LayerSpec<S>>,
    pub input_shape: Vec<usize>,
    pub metadata: BTreeMap<String, String>,
}

/// Output channel / unit `index` of the Conv2D or Dense layer `layer_id`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeuronRef {
    pub layer_id: u32,
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    Empty,
    DuplicateId,
    InputShape,
    WeightShape,
    BiasShape,
    Stride,
    DimMismatch,
    NormLength,
    NormPositivity,
    NonFinite,
    ResidualSource,
    ResidualShape,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// Offending layer, or `None` for model-level rules.
    pub layer: Option<u32>,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        let s = s.as_ref().and_then(|v| v.as_str()).unwrap_or("?");
        f.write_str(s)
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(id) => write!(f, "layer {id}: {}: {}", self.rule, self.detail),
            None => write!(f, "model: {}: {}", self.rule, self.detail),
        }
    }
}

impl<S: Scalar> Model<S> {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec<S>>) -> Self {
        Model {
            layers,
            input_shape,
            metadata: BTreeMap::new(),
        }
    }

    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn layer(&self, id: u32) -> Result<&LayerSpec<S>> {
        self.layers
            .iter()
            .find(|l| l.id == id)
            .ok_or(Error::UnknownLayer(id))
    }

    /// Ids of the Conv2D / Dense layers in order.
    pub fn neural_ids(&self) -> Vec<u32> {
        self.layers
            .iter()
            .filter(|l| l.kind.is_neural())
            .map(|l| l.id)
            .collect()
    }

    /// Output width of every neural layer, keyed by id.
    pub fn widths(&self) -> BTreeMap<u32, usize> {
        self.layers
            .iter()
            .filter_map(|l| l.kind.out_width().map(|w| (l.id, w)))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match &l.kind {
                LayerKind::Conv2d(c) => c.weight.len() + c.bias.as_ref().map_or(0, Tensor::len),
                LayerKind::Dense(d) => d.weight.len() + d.bias.as_ref().map_or(0, Tensor::len),
                LayerKind::Norm(n) => 4 * n.channels,
                _ => 0,
            })
            .sum()
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate(self)
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(v))
        }
    }

    /// Output shape of every layer. Fails with the violation list if the
    /// model is not well-formed.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let (shapes, violations) = infer(self);
        if violations.is_empty() {
            Ok(shapes)
        } else {
            Err(Error::Invalid(violations))
        }
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().unwrap_or_else(|| self.input_shape.clone()))
    }
}

fn violation(layer: Option<u32>, rule: Rule, detail: impl Into<String>) -> Violation {
    Violation {
        layer,
        rule,
        detail: detail.into(),
    }
}

fn validate<S: Scalar>(m: &Model<S>) -> Vec<Violation> {
    let mut out = Vec::new();
    if m.layers.is_empty() {
        out.push(violation(None, Rule::Empty, "model has no layers"));
    }
    let mut seen = HashSet::new();
    for l in &m.layers {
        if !seen.insert(l.id) {
            out.push(violation(Some(l.id), Rule::DuplicateId, "id used twice"));
        }
    }
    for l in &m.layers {
        check_params(l, &mut out);
    }
    out.extend(infer(m).1);
    out
}

fn check_params<S: Scalar>(l: &LayerSpec<S>, out: &mut Vec<Violation>) {
    let id = Some(l.id);
    let finite = |t: &Tensor<S>| t.is_finite();
    match &l.kind {
        LayerKind::Conv2d(c) => {
            let want = [c.out_ch, c.in_ch, c.kh, c.kw];
            if c.weight.shape() != want {
                out.push(violation(
                    id,
                    Rule::WeightShape,
                    format!("weight {:?} != declared {want:?}", c.weight.shape()),
                ));
            }
            if let Some(b) = &c.bias {
                if b.shape() != [c.out_ch] {
                    out.push(violation(id, Rule::BiasShape, format!("bias {:?}", b.shape())));
                }
            }
            if c.stride == 0 {
                out.push(violation(id, Rule::Stride, "stride must be positive"));
            }
            if !finite(&c.weight) || c.bias.as_ref().is_some_and(|b| !finite(b)) {
                out.push(violation(id, Rule::NonFinite, "non-finite parameter"));
            }
        }
        LayerKind::Dense(d) => {
            if d.weight.shape() != [d.out, d.inp] {
                out.push(violation(
                    id,
                    Rule::WeightShape,
                    format!("weight {:?} != declared [{}, {}]", d.weight.shape(), d.out, d.inp),
                ));
            }
            if let Some(b) = &d.bias {
                if b.shape() != [d.out] {
                    out.push(violation(id, Rule::BiasShape, format!("bias {:?}", b.shape())));
                }
            }
            if !finite(&d.weight) || d.bias.as_ref().is_some_and(|b| !finite(b)) {
                out.push(violation(id, Rule::NonFinite, "non-finite parameter"));
            }
        }
        LayerKind::Norm(n) => {
            let lens = [n.gamma.len(), n.beta.len(), n.mean.len(), n.std.len()];
            if lens.iter().any(|&k| k != n.channels) {
                out.push(violation(
                    id,
                    Rule::NormLength,
                    format!("vector lengths {lens:?} != channels {}", n.channels),
                ));
            }
            if n.std.iter().any(|s| s.is_nan() || *s <= S::zero()) {
                out.push(violation(id, Rule::NormPositivity, "std must be strictly positive"));
            }
            let all = n.gamma.iter().chain(&n.beta).chain(&n.mean).chain(&n.std);
            if all.into_iter().any(|v| !v.is_finite()) {
                out.push(violation(id, Rule::NonFinite, "non-finite parameter"));
            }
        }
        _ => {}
    }
}

/// Forward shape propagation. Returns per-layer output shapes; after a
/// violation the declared output shape is adopted so checking continues.
fn infer<S: Scalar>(m: &Model<S>) -> (Vec<Vec<usize>>, Vec<Violation>) {
    let mut vio = Vec::new();
    let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(m.layers.len());
    if !(m.input_shape.len() == 1 || m.input_shape.len() == 3) || m.input_shape.contains(&0) {
        vio.push(violation(
            None,
            Rule::InputShape,
            format!("input shape {:?} must be [n] or [c, h, w]", m.input_shape),
        ));
    }
    let mut cur = m.input_shape.clone();
    for (i, l) in m.layers.iter().enumerate() {
        let id = Some(l.id);
        let next = match &l.kind {
            LayerKind::Conv2d(c) => {
                if cur.len() != 3 || cur[0] != c.in_ch {
                    vio.push(violation(
                        id,
                        Rule::DimMismatch,
                        format!("conv expects [{}, h, w], fed {cur:?}", c.in_ch),
                    ));
                    let hw = if cur.len() == 3 { (cur[1], cur[2]) } else { (c.kh, c.kw) };
                    let (h, w) = c.out_hw(hw.0, hw.1).unwrap_or((1, 1));
                    vec![c.out_ch, h, w]
                } else {
                    match c.out_hw(cur[1], cur[2]) {
                        Some((h, w)) => vec![c.out_ch, h, w],
                        None => {
                            vio.push(violation(
                                id,
                                Rule::DimMismatch,
                                format!("kernel larger than padded input {cur:?}"),
                            ));
                            vec![c.out_ch, 1, 1]
                        }
                    }
                }
            }
            LayerKind::Dense(d) => {
                if cur.len() != 1 || cur[0] != d.inp {
                    vio.push(violation(
                        id,
                        Rule::DimMismatch,
                        format!("dense expects [{}], fed {cur:?}", d.inp),
                    ));
                }
                vec![d.out]
            }
            LayerKind::Norm(n) => {
                if cur.first() != Some(&n.channels) {
                    vio.push(violation(
                        id,
                        Rule::DimMismatch,
                        format!("norm over {} channels fed {cur:?}", n.channels),
                    ));
                }
                cur.clone()
            }
            LayerKind::Relu => cur.clone(),
            LayerKind::Flatten => vec![cur.iter().product()],
            LayerKind::ResidualAdd { source } => {
                match m.layers[..i].iter().position(|p| p.id == *source) {
                    None => vio.push(violation(
                        id,
                        Rule::ResidualSource,
                        format!("source {source} does not precede this layer"),
                    )),
                    Some(j) => {
                        if shapes[j] != cur {
                            vio.push(violation(
                                id,
                                Rule::ResidualShape,
                                format!("source shape {:?} != running shape {cur:?}", shapes[j]),
                            ));
                        }
                    }
                }
                cur.clone()
            }
        };
        shapes.push(next.clone());
        cur = next;
    }
    (shapes, vio)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{Dense, LayerKind, LayerSpec, Norm};

    fn dense(id: u32, out: usize, inp: usize) -> LayerSpec<f32> {
        LayerSpec::new(
            id,
            LayerKind::Dense(Dense::new(Tensor::filled(vec![out, inp], 0.1), None)),
        )
    }

    fn mlp() -> Model<f32> {
        Model::new(
            vec![4],
            vec![
                dense(0, 8, 4),
                LayerSpec::new(1, LayerKind::Relu),
                dense(2, 8, 8),
                LayerSpec::new(3, LayerKind::Relu),
                dense(4, 2, 8),
            ],
        )
    }

    #[test]
    fn well_formed_mlp_has_no_violations() {
        assert!(mlp().validate().is_empty());
    }

    #[test]
    fn dense_fed_wrong_width() {
        let m = Model::new(vec![4], vec![dense(0, 3, 4), dense(1, 2, 4)]);
        let v = m.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, Rule::DimMismatch);
        assert_eq!(v[0].layer, Some(1));
    }

    #[test]
    fn zero_sigma_is_a_positivity_violation() {
        let mut n = Norm::<f32>::identity(8);
        n.std[3] = 0.0;
        let mut m = mlp();
        m.layers.insert(1, LayerSpec::new(9, LayerKind::Norm(n)));
        let v = m.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, Rule::NormPositivity);
        assert_eq!(v[0].layer, Some(9));
    }

    #[test]
    fn residual_must_point_backwards() {
        let mut m = mlp();
        m.layers.insert(3, LayerSpec::new(7, LayerKind::ResidualAdd { source: 4 }));
        assert!(m.validate().iter().any(|v| v.rule == Rule::ResidualSource));
        let mut ok = mlp();
        ok.layers.insert(3, LayerSpec::new(7, LayerKind::ResidualAdd { source: 1 }));
        assert!(ok.validate().is_empty());
    }

    #[test]
    fn duplicate_ids_are_reported() {
        let m = Model::new(vec![4], vec![dense(0, 4, 4), dense(0, 2, 4)]);
        assert!(m.validate().iter().any(|v| v.rule == Rule::DuplicateId));
    }

    #[test]
    fn non_finite_weight_is_reported() {
        let mut m = mlp();
        if let LayerKind::Dense(d) = &mut m.layers[0].kind {
            d.weight.data_mut()[0] = f32::NAN;
        }
        assert!(m.validate().iter().any(|v| v.rule == Rule::NonFinite));
    }
}
