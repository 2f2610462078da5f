//! Contour ground truth and the dual training loss: Dice on the contour head,
//! cross-entropy on the segmentation head, combined by an unweighted sum.
//!
//! The contour band is the inner band of the foreground under 4-connected
//! (city-block) distance, with the image border counting as background. Both
//! prediction maps are H×W×2 probability maps (channel 0: background /
//! non-contour, channel 1: foreground / contour).

use crate::error::{Error, Result};
use crate::geometry::BinaryMask;
use crate::tensor::Tensor4;
use std::collections::VecDeque;

pub const DICE_TAU: f64 = 1e-6;
const CLAMP: f64 = 1e-12;

/// City-block distance from each foreground pixel to the nearest background
/// pixel, with the border counted as background. Background pixels are 0.
pub fn city_block_distance_to_background(mask: &BinaryMask) -> Vec<u32> {
    let (h, w) = (mask.height, mask.width);
    let mut dist = vec![u32::MAX; h * w];
    let mut queue = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                dist[r * w + c] = 0;
                queue.push_back((r, c));
            } else if r == 0 || r == h - 1 || c == 0 || c == w - 1 {
                // virtual background ring outside the image
                dist[r * w + c] = 1;
                queue.push_back((r, c));
            }
        }
    }
    while let Some((r, c)) = queue.pop_front() {
        let d = dist[r * w + c];
        let mut visit = |rr: usize, cc: usize| {
            if dist[rr * w + cc] > d + 1 {
                dist[rr * w + cc] = d + 1;
                queue.push_back((rr, cc));
            }
        };
        if r > 0 {
            visit(r - 1, c);
        }
        if r + 1 < h {
            visit(r + 1, c);
        }
        if c > 0 {
            visit(r, c - 1);
        }
        if c + 1 < w {
            visit(r, c + 1);
        }
    }
    dist
}

/// One-hot contour ground truth: the contour channel is 1 exactly at
/// foreground pixels whose city-block distance to background is <= `width`.
pub fn extract_contour_gt(mask: &BinaryMask, width: u32) -> Result<Tensor4> {
    if width < 1 {
        return Err(Error::InvalidArgument("contour width must be >= 1".into()));
    }
    let (h, w) = (mask.height, mask.width);
    let dist = city_block_distance_to_background(mask);
    let mut out = Tensor4::zeros([1, h, w, 2]);
    for r in 0..h {
        for c in 0..w {
            let on = mask.get(r, c) && dist[r * w + c] <= width;
            let off = out.idx(0, r, c, 0);
            out.data[off] = if on { 0.0 } else { 1.0 };
            out.data[off + 1] = if on { 1.0 } else { 0.0 };
        }
    }
    Ok(out)
}

/// One-hot segmentation ground truth (channel 0 background, 1 foreground).
pub fn mask_to_onehot(mask: &BinaryMask) -> Tensor4 {
    let (h, w) = (mask.height, mask.width);
    let mut out = Tensor4::zeros([1, h, w, 2]);
    for r in 0..h {
        for c in 0..w {
            let off = out.idx(0, r, c, 0);
            if mask.get(r, c) {
                out.data[off + 1] = 1.0;
            } else {
                out.data[off] = 1.0;
            }
        }
    }
    out
}

/// Dice loss over the contour probability channel (channel 1) only.
/// Returns the loss and its analytic gradient w.r.t. the prediction map.
/// The gradient on the non-contour channel is exactly zero.
pub fn dice_contour_loss(pred: &Tensor4, gt: &Tensor4, tau: f64) -> Result<(f64, Tensor4)> {
    if !pred.same_shape(gt) || pred.dims[3] != 2 {
        return Err(Error::ShapeMismatch(format!(
            "dice_contour_loss: {:?} vs {:?}",
            pred.dims, gt.dims
        )));
    }
    let mut inter = 0.0; // Σ c·c'
    let mut p_sq = 0.0; // Σ c²
    let mut g_sq = 0.0; // Σ c'²
    for (pp, pg) in pred.data.chunks(2).zip(gt.data.chunks(2)) {
        inter += pp[1] * pg[1];
        p_sq += pp[1] * pp[1];
        g_sq += pg[1] * pg[1];
    }
    let num = 2.0 * inter;
    let den = p_sq + g_sq + tau;
    let loss = 1.0 - num / den;
    // d/dc (1 - N/D): quotient rule with N = 2Σcc', D = Σc² + Σc'² + τ
    let mut grad = Tensor4::zeros(pred.dims);
    for ((pp, pg), pz) in pred
        .data
        .chunks(2)
        .zip(gt.data.chunks(2))
        .zip(grad.data.chunks_mut(2))
    {
        pz[1] = (num * 2.0 * pp[1] - 2.0 * pg[1] * den) / (den * den);
    }
    Ok((loss, grad))
}

/// Cross-entropy over both channels, normalized by the count of all map
/// elements N = H·W·2. Returns the loss and its gradient w.r.t. the
/// probability map (compose with the softmax Jacobian to reach logits).
pub fn cross_entropy_seg_loss(pred: &Tensor4, gt: &Tensor4) -> Result<(f64, Tensor4)> {
    if !pred.same_shape(gt) || pred.dims[3] != 2 {
        return Err(Error::ShapeMismatch(format!(
            "cross_entropy_seg_loss: {:?} vs {:?}",
            pred.dims, gt.dims
        )));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor4::zeros(pred.dims);
    for i in 0..pred.len() {
        let p = pred.data[i].max(CLAMP);
        let g = gt.data[i];
        if g != 0.0 {
            loss -= g * p.ln();
            grad.data[i] = -g / (p * n);
        }
    }
    Ok((loss / n, grad))
}

/// Unweighted sum of the two losses.
pub fn total_loss(l_s: f64, l_c: f64) -> Result<f64> {
    if !l_s.is_finite() || !l_c.is_finite() {
        return Err(Error::NonFinite("total_loss input".into()));
    }
    Ok(l_s + l_c)
}
