//! Class-balanced per-pixel cross-entropy over the two position heads.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::spacemask::ProxyLabel;

/// Per-pixel weights `(background, object)` of one label map: background
/// pixels get `O/X` and object pixels `B/X`, with `X`, `O`, `B` the total,
/// object and background pixel counts.
pub fn balance_weights(label: &Grid<u32>) -> (f64, f64) {
    let x = label.as_slice().len() as f64;
    let o = label.iter().filter(|&&k| k != ProxyLabel::BACKGROUND).count() as f64;
    let b = x - o;
    (o / x, b / x)
}

/// Weighted cross-entropy of one direction and its gradient with respect to
/// the logits.
///
/// `logits` is channel-major (`[C, H*W]`). The reduction is
/// `Σ w·ce / Σ w`; when every weight is zero (all-background or
/// all-object maps) it falls back to the plain mean.
pub fn direction_loss(logits: &[f64], channels: usize, label: &Grid<u32>) -> Result<(f64, Vec<f64>)> {
    let plane = label.as_slice().len();
    if logits.len() != channels * plane {
        return Err(Error::ShapeMismatch {
            expected: format!("{channels} x {plane} logits"),
            actual: format!("{} logits", logits.len()),
        });
    }
    if let Some(&bad) = label.iter().find(|&&k| k as usize >= channels) {
        return Err(Error::LabelOutOfRange { class: bad, channels });
    }
    let (w_bg, w_obj) = balance_weights(label);
    let weight_of = |k: u32| if k == ProxyLabel::BACKGROUND { w_bg } else { w_obj };
    let total_w: f64 = label.iter().map(|&k| weight_of(k)).sum();
    let uniform = total_w <= 0.0;
    let norm = if uniform { plane as f64 } else { total_w };

    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    let mut probs = vec![0.0; channels];
    for (p, &k) in label.iter().enumerate() {
        let max = (0..channels).map(|c| logits[c * plane + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (c, prob) in probs.iter_mut().enumerate() {
            *prob = (logits[c * plane + p] - max).exp();
            z += *prob;
        }
        let w = if uniform { 1.0 } else { weight_of(k) } / norm;
        let k = k as usize;
        loss += w * (z.ln() - (logits[k * plane + p] - max));
        for (c, prob) in probs.iter().enumerate() {
            let target = if c == k { 1.0 } else { 0.0 };
            grad[c * plane + p] = w * (prob / z - target);
        }
    }
    Ok((loss, grad))
}

/// Loss of a batch and the gradients of both logit tensors.
pub struct LossOutput {
    pub loss: f64,
    pub grad_h: Tensor,
    pub grad_v: Tensor,
}

/// Average of the two direction losses, averaged again over the batch.
pub fn weighted_ce_loss(logits_h: &Tensor, logits_v: &Tensor, labels: &[&ProxyLabel]) -> Result<LossOutput> {
    let n = logits_h.batch();
    if labels.len() != n || logits_v.batch() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} labels for both heads"),
            actual: format!("{} labels, {} vertical logits", labels.len(), logits_v.batch()),
        });
    }
    let mut grad_h = Tensor::zeros(logits_h.shape());
    let mut grad_v = Tensor::zeros(logits_v.shape());
    let mut loss = 0.0;
    let scale = 0.5 / n as f64;
    for (i, label) in labels.iter().enumerate() {
        for (logits, grad, map) in [
            (logits_h, &mut grad_h, &label.horizontal),
            (logits_v, &mut grad_v, &label.vertical),
        ] {
            let [_, c, h, w] = logits.shape();
            map.ensure_dims((h, w), "proxy label")?;
            let sample: Vec<f64> = logits.sample(i).iter().map(|&v| v as f64).collect();
            let (l, g) = direction_loss(&sample, c, map)?;
            loss += scale * l;
            let len = grad.sample_len();
            for (dst, src) in grad.data_mut()[i * len..(i + 1) * len].iter_mut().zip(&g) {
                *dst = (scale * src) as f32;
            }
        }
    }
    Ok(LossOutput { loss, grad_h, grad_v })
}
