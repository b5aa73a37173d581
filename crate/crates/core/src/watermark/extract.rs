//! Extraction of each scheme's pre-threshold statistic and bits.

use super::{BitString, Scheme, WatermarkKey};
use crate::error::{Error, Result};
use crate::inference::forward_with_trace;
use crate::ir::{Conv2d, LayerKind, Model, Tensor};
use crate::scalar::Scalar;

fn mismatch(what: &str, expected: usize, found: usize) -> Error {
    Error::DimensionMismatch {
        what: what.into(),
        expected,
        found,
    }
}

pub(crate) fn to_f64<S: Scalar>(v: &[S]) -> Vec<f64> {
    v.iter().map(|x| x.f64()).collect()
}

/// Weight of a Conv2D/Dense layer as f64 with its output width.
pub(crate) fn neural_weight<S: Scalar>(model: &Model<S>, id: u32) -> Result<(Vec<f64>, usize)> {
    let l = model.layer(id)?;
    match (l.kind.weight(), l.kind.out_width()) {
        (Some(w), Some(o)) => Ok((to_f64(w.data()), o)),
        _ => Err(Error::InvalidArgument(format!(
            "layer {id} is a {} layer, expected conv2d/dense",
            l.kind.tag()
        ))),
    }
}

/// Mean of the `rows` equal-length rows of `w`.
pub(crate) fn filter_mean(w: &[f64], rows: usize) -> Vec<f64> {
    let n = w.len() / rows;
    let mut m = vec![0.0; n];
    for r in w.chunks_exact(n) {
        m.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
    m.iter_mut().for_each(|a| *a /= rows as f64);
    m
}

pub(crate) fn matvec(x: &Tensor<f64>, v: &[f64]) -> Result<Vec<f64>> {
    let cols = x.shape()[1];
    if v.len() != cols {
        return Err(mismatch("projection matrix columns", cols, v.len()));
    }
    Ok(x.data()
        .chunks_exact(cols)
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect())
}

/// Greedy row statistic: `flat` is cut into `b` consecutive windows of
/// `ceil(L / b)` values (the tail zero-padded); each row keeps its
/// `ceil(eta * window)` largest-magnitude values and averages them.
/// Also returns the kept indices into `flat` (padding excluded).
pub(crate) fn greedy_rows(flat: &[f64], b: usize, eta: f64) -> Result<(Vec<f64>, Vec<Vec<usize>>)> {
    let l = flat.len();
    if l < b {
        return Err(Error::Capacity { bits: b, capacity: l });
    }
    let (win, keep) = greedy_geometry(l, b, eta);
    let mut stats = Vec::with_capacity(b);
    let mut kept = Vec::with_capacity(b);
    for i in 0..b {
        let mut idx: Vec<usize> = (i * win..(i + 1) * win).collect();
        let val = |j: usize| if j < l { flat[j] } else { 0.0 };
        idx.sort_by(|&a, &c| val(c).abs().total_cmp(&val(a).abs()).then(a.cmp(&c)));
        idx.truncate(keep);
        stats.push(idx.iter().map(|&j| val(j)).sum::<f64>() / keep as f64);
        kept.push(idx.into_iter().filter(|&j| j < l).collect());
    }
    Ok((stats, kept))
}

/// Window length and kept count per row for a flattened length `l`.
pub(crate) fn greedy_geometry(l: usize, b: usize, eta: f64) -> (usize, usize) {
    let win = l.div_ceil(b);
    let keep = ((eta * win as f64) - 1e-9).ceil().clamp(1.0, win as f64) as usize;
    (win, keep)
}

/// Average receptive-field patch of `conv` over all output positions of
/// the given inputs, flattened like one filter. The mean of
/// `conv(x, W_n)` over positions equals `<W_n, patch_mean>`.
pub(crate) fn patch_mean<S: Scalar>(conv: &Conv2d<S>, inputs: &[Vec<f64>], h: usize, w: usize) -> Option<Vec<f64>> {
    let (oh, ow) = conv.out_hw(h, w)?;
    let (kh, kw) = (conv.kh, conv.kw);
    let mut g = vec![0.0; conv.in_ch * kh * kw];
    for x in inputs {
        for c in 0..conv.in_ch {
            for ki in 0..kh {
                for kj in 0..kw {
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * conv.stride + ki) as isize - conv.pad.0 as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * conv.stride + kj) as isize - conv.pad.1 as isize;
                            if ix >= 0 && ix < w as isize {
                                acc += x[(c * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    g[(c * kh + ki) * kw + kj] += acc;
                }
            }
        }
    }
    let n = (oh * ow * inputs.len()) as f64;
    g.iter_mut().for_each(|v| *v /= n);
    Some(g)
}

fn uchida_stat<S: Scalar>(model: &Model<S>, key: &WatermarkKey) -> Result<Vec<f64>> {
    let (w, rows) = neural_weight(model, key.target()?)?;
    let x = key.transform.as_ref().ok_or_else(|| Error::InvalidArgument("key lacks projection X".into()))?;
    let what = filter_mean(&w, rows);
    if what.len() != x.shape()[1] {
        return Err(mismatch("flattened filter mean vs projection X", x.shape()[1], what.len()));
    }
    matvec(x, &what)
}

fn sign_stat<S: Scalar>(model: &Model<S>, key: &WatermarkKey) -> Result<Vec<f64>> {
    let id = key.target()?;
    let LayerKind::Norm(n) = &model.layer(id)?.kind else {
        return Err(Error::InvalidArgument(format!("layer {id} is not a norm layer")));
    };
    if n.channels != key.bits {
        return Err(mismatch("norm scale vector vs message", key.bits, n.channels));
    }
    Ok(to_f64(&n.gamma))
}

fn greedy_stat<S: Scalar>(model: &Model<S>, key: &WatermarkKey) -> Result<Vec<f64>> {
    let (w, _) = neural_weight(model, key.target()?)?;
    Ok(greedy_rows(&w, key.bits, key.eta.unwrap_or(0.5))?.0)
}

fn activation_stat<S: Scalar>(model: &Model<S>, key: &WatermarkKey) -> Result<Vec<f64>> {
    let id = key.target()?;
    let a = key.transform.as_ref().ok_or_else(|| Error::InvalidArgument("key lacks projection A".into()))?;
    if key.triggers.is_empty() {
        return Err(Error::InvalidArgument("key has no trigger inputs".into()));
    }
    let mut mean: Vec<f64> = Vec::new();
    for t in &key.triggers {
        let (_, trace) = forward_with_trace(model, &t.cast::<S>())?;
        let act = trace.get(id).ok_or(Error::UnknownLayer(id))?;
        let c = act.shape()[0];
        let per = act.len() / c;
        if mean.is_empty() {
            mean = vec![0.0; c];
        }
        for (ch, chunk) in act.data().chunks_exact(per).enumerate() {
            mean[ch] += chunk.iter().map(|v| v.f64()).sum::<f64>() / per as f64;
        }
    }
    let n = key.triggers.len() as f64;
    mean.iter_mut().for_each(|v| *v /= n);
    if mean.len() != a.shape()[1] {
        return Err(mismatch("activation width vs projection A", a.shape()[1], mean.len()));
    }
    matvec(a, &mean)
}

/// Patch mean of the passport through conv `id`, checked against the
/// layer's current geometry.
pub(crate) fn passport_patch<S: Scalar>(model: &Model<S>, key: &WatermarkKey) -> Result<(Vec<f64>, usize)> {
    let id = key.target()?;
    let LayerKind::Conv2d(conv) = &model.layer(id)?.kind else {
        return Err(Error::InvalidArgument(format!("layer {id} is not a conv layer")));
    };
    let p = key.passport.as_ref().ok_or_else(|| Error::InvalidArgument("key lacks passport".into()))?;
    let s = p.shape();
    if s[0] != conv.in_ch {
        return Err(mismatch("passport channels vs conv input channels", s[0], conv.in_ch));
    }
    let g = patch_mean(conv, &[p.data().to_vec()], s[1], s[2])
        .ok_or_else(|| Error::InvalidArgument("passport smaller than kernel".into()))?;
    Ok((g, conv.out_ch))
}

fn passport_stat<S: Scalar>(model: &Model<S>, key: &WatermarkKey) -> Result<Vec<f64>> {
    let (g, out) = passport_patch(model, key)?;
    if out != key.bits {
        return Err(mismatch("conv filters vs message", key.bits, out));
    }
    let (w, _) = neural_weight(model, key.target()?)?;
    Ok(w.chunks_exact(g.len())
        .map(|f| f.iter().zip(&g).map(|(a, b)| a * b).sum())
        .collect())
}

/// The scheme's real-valued statistic before thresholding at zero.
pub fn statistic<S: Scalar>(model: &Model<S>, key: &WatermarkKey) -> Result<Vec<f64>> {
    match key.scheme {
        Scheme::Uchida => uchida_stat(model, key),
        Scheme::SignOfScale => sign_stat(model, key),
        Scheme::Greedy => greedy_stat(model, key),
        Scheme::ActivationMean => activation_stat(model, key),
        Scheme::PassportSign => passport_stat(model, key),
    }
}

pub fn extract<S: Scalar>(model: &Model<S>, key: &WatermarkKey) -> Result<BitString> {
    BitString::from_signs(&statistic(model, key)?)
}

fn with_scheme(key: &WatermarkKey, scheme: Scheme) -> Result<()> {
    if key.scheme == scheme {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("key is for {}, not {scheme}", key.scheme)))
    }
}

/// Signs of `X * w_hat`, where `w_hat` averages the target layer's filters.
pub fn extract_uchida<S: Scalar>(model: &Model<S>, key: &WatermarkKey) -> Result<BitString> {
    with_scheme(key, Scheme::Uchida)?;
    extract(model, key)
}

/// Signs of the target Norm layer's gamma.
pub fn extract_sign_of_scale<S: Scalar>(model: &Model<S>, key: &WatermarkKey) -> Result<BitString> {
    with_scheme(key, Scheme::SignOfScale)?;
    extract(model, key)
}

/// Signs of greedy row averages; always `b` bits long.
pub fn extract_greedy<S: Scalar>(model: &Model<S>, key: &WatermarkKey) -> Result<BitString> {
    with_scheme(key, Scheme::Greedy)?;
    extract(model, key)
}

/// Signs of `A * mean_activation` over the key's trigger inputs.
pub fn extract_activation<S: Scalar>(model: &Model<S>, key: &WatermarkKey) -> Result<BitString> {
    with_scheme(key, Scheme::ActivationMean)?;
    extract(model, key)
}

/// Signs of the per-filter mean response to the passport.
pub fn extract_passport<S: Scalar>(model: &Model<S>, key: &WatermarkKey) -> Result<BitString> {
    with_scheme(key, Scheme::PassportSign)?;
    extract(model, key)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_hand_example() {
        let (s, kept) = greedy_rows(&[-3.0, 1.0, 2.0], 1, 2.0 / 3.0).unwrap();
        assert_eq!(s, vec![-0.5]);
        assert_eq!(kept, vec![vec![0, 2]]);
    }

    #[test]
    fn greedy_eta_one_is_row_mean() {
        let v = [1.0, -4.0, 2.0, 0.5, 0.5, 3.0];
        let (s, _) = greedy_rows(&v, 2, 1.0).unwrap();
        assert_eq!(s, vec![-1.0 / 3.0, 4.0 / 3.0]);
    }

    #[test]
    fn greedy_pads_the_tail_with_zeros() {
        let (s, kept) = greedy_rows(&[1.0, 1.0, 1.0, 1.0, 6.0], 2, 1.0).unwrap();
        assert_eq!(s, vec![1.0, 7.0 / 3.0]);
        assert_eq!(kept[1], vec![4, 3]);
    }

    #[test]
    fn greedy_needs_b_values() {
        assert!(matches!(greedy_rows(&[1.0], 2, 0.5), Err(Error::Capacity { .. })));
    }

    #[test]
    fn filter_mean_averages_rows() {
        assert_eq!(filter_mean(&[1.0, 2.0, 3.0, 6.0], 2), vec![2.0, 4.0]);
    }
}
