use super::{LayerKind, Model, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Merges every Norm layer into the Conv2D/Dense layer directly before it:
/// `W' = (gamma / std) * W`, `b' = (gamma / std) * b + beta - gamma * mean / std`.
///
/// Residual references to a folded Norm are redirected to its producer.
pub fn fold_norm<S: Scalar>(model: &Model<S>) -> Result<Model<S>> {
    let mut out = model.clone();
    let mut i = 0;
    while i < out.layers.len() {
        let LayerKind::Norm(norm) = &out.layers[i].kind else {
            i += 1;
            continue;
        };
        let norm = norm.clone();
        let norm_id = out.layers[i].id;
        if i == 0 || !out.layers[i - 1].kind.is_neural() {
            return Err(Error::Structural {
                layer: norm_id,
                reason: "norm layer does not directly follow a conv/dense layer".into(),
            });
        }
        let prev_id = out.layers[i - 1].id;
        let (w, b) = match &mut out.layers[i - 1].kind {
            LayerKind::Conv2d(c) => (&mut c.weight, &mut c.bias),
            LayerKind::Dense(d) => (&mut d.weight, &mut d.bias),
            _ => unreachable!(),
        };
        let channels = w.shape()[0];
        if channels != norm.channels {
            return Err(Error::Structural {
                layer: norm_id,
                reason: format!("norm has {} channels, producer has {channels}", norm.channels),
            });
        }
        let row = w.len() / channels;
        let data = w.data_mut();
        let mut bias = b
            .take()
            .map(Tensor::into_data)
            .unwrap_or_else(|| vec![S::zero(); channels]);
        for c in 0..channels {
            let (a, e) = norm.affine(c);
            data[c * row..(c + 1) * row].iter_mut().for_each(|v| *v = a * *v);
            bias[c] = a * bias[c] + e;
        }
        *b = Some(Tensor::from_vec(bias));
        out.layers.remove(i);
        for l in &mut out.layers {
            if let LayerKind::ResidualAdd { source } = &mut l.kind {
                if *source == norm_id {
                    *source = prev_id;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{Conv2d, LayerSpec, Norm};

    fn conv_norm(w: f64, gamma: f64, std: f64, mean: f64, beta: f64) -> Model<f64> {
        let conv = Conv2d::new(Tensor::filled(vec![1, 1, 1, 1], w), None, 1, (0, 0));
        let norm = Norm {
            channels: 1,
            gamma: vec![gamma],
            beta: vec![beta],
            mean: vec![mean],
            std: vec![std],
        };
        Model::new(
            vec![1, 2, 2],
            vec![
                LayerSpec::new(1, LayerKind::Conv2d(conv)),
                LayerSpec::new(2, LayerKind::Norm(norm)),
            ],
        )
    }

    fn folded_conv(m: &Model<f64>) -> (f64, f64) {
        match &m.layers[0].kind {
            LayerKind::Conv2d(c) => (c.weight.data()[0], c.bias.as_ref().unwrap().data()[0]),
            _ => panic!("expected conv"),
        }
    }

    #[test]
    fn identity_norm_leaves_weights() {
        let f = fold_norm(&conv_norm(0.7, 1.0, 1.0, 0.0, 0.0)).unwrap();
        assert_eq!(f.layers.len(), 1);
        assert_eq!(folded_conv(&f), (0.7, 0.0));
    }

    #[test]
    fn hand_example() {
        let f = fold_norm(&conv_norm(2.0, 3.0, 2.0, 0.0, 0.0)).unwrap();
        assert_eq!(folded_conv(&f).0, 3.0);
    }

    #[test]
    fn bias_uses_beta_minus_scaled_mean() {
        // 2 * (x*1 - 4) / 2 + 0.5 = x - 3.5
        let f = fold_norm(&conv_norm(1.0, 2.0, 2.0, 4.0, 0.5)).unwrap();
        assert_eq!(folded_conv(&f), (1.0, -3.5));
    }

    #[test]
    fn loose_norm_is_structural_error() {
        let m = Model::<f64>::new(
            vec![1, 2, 2],
            vec![
                LayerSpec::new(1, LayerKind::Relu),
                LayerSpec::new(2, LayerKind::Norm(Norm::identity(1))),
            ],
        );
        assert!(matches!(fold_norm(&m), Err(Error::Structural { layer: 2, .. })));
    }
}
