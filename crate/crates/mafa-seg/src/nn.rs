//! Minimal differentiable layer set: conv2d with stride/dilation and "same"
//! padding, depthwise separable conv, batchnorm, relu, channel-pair softmax,
//! corner-aligned bilinear resize, dropout, global average pooling. Every
//! forward has a matching analytic backward; the whole set is validated
//! against central finite differences (see the `gradcheck` module).

use crate::error::{Error, Result};
use crate::tensor::Tensor4;
use rand::Rng;

/// "same" output extent and begin padding: out = ceil(size/stride).
pub fn same_padding(size: usize, stride: usize, k_eff: usize) -> (usize, usize) {
    let out = size.div_ceil(stride);
    let pad_total = ((out - 1) * stride + k_eff).saturating_sub(size);
    (out, pad_total / 2)
}

fn check_conv_inputs(x: &Tensor4, kernel: &Tensor4, stride: usize, dilation: usize) -> Result<()> {
    if stride < 1 || dilation < 1 {
        return Err(Error::InvalidArgument(
            "conv2d: stride and dilation must be >= 1".into(),
        ));
    }
    if kernel.dims[2] != x.dims[3] {
        return Err(Error::ShapeMismatch(format!(
            "conv2d: kernel input channels {} != activation channels {}",
            kernel.dims[2], x.dims[3]
        )));
    }
    if !x.all_finite() || !kernel.all_finite() {
        return Err(Error::NonFinite("conv2d input".into()));
    }
    Ok(())
}

/// 2-d convolution, "same" spatial semantics, NHWC activations and
/// (kh, kw, in, out) kernels.
pub fn conv2d(x: &Tensor4, kernel: &Tensor4, stride: usize, dilation: usize) -> Result<Tensor4> {
    check_conv_inputs(x, kernel, stride, dilation)?;
    let [n, h, w, cin] = x.dims;
    let [kh, kw, _, cout] = kernel.dims;
    let (oh, pad_r) = same_padding(h, stride, (kh - 1) * dilation + 1);
    let (ow, pad_c) = same_padding(w, stride, (kw - 1) * dilation + 1);
    let mut out = Tensor4::zeros([n, oh, ow, cout]);
    for b in 0..n {
        for oi in 0..oh {
            for oj in 0..ow {
                let dst_off = out.idx(b, oi, oj, 0);
                let acc = &mut out.data[dst_off..dst_off + cout];
                for ki in 0..kh {
                    let si = (oi * stride + ki * dilation) as isize - pad_r as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for kj in 0..kw {
                        let sj = (oj * stride + kj * dilation) as isize - pad_c as isize;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        let x_off = x.idx(b, si as usize, sj as usize, 0);
                        let w_off = (ki * kw + kj) * cin * cout;
                        for ci in 0..cin {
                            let xv = x.data[x_off + ci];
                            let wrow = &kernel.data[w_off + ci * cout..w_off + (ci + 1) * cout];
                            for (a, &wv) in acc.iter_mut().zip(wrow) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Analytic gradients of [`conv2d`] w.r.t. input and kernel.
pub fn conv2d_backward(
    x: &Tensor4,
    kernel: &Tensor4,
    stride: usize,
    dilation: usize,
    gy: &Tensor4,
) -> (Tensor4, Tensor4) {
    let [n, h, w, cin] = x.dims;
    let [kh, kw, _, cout] = kernel.dims;
    let (oh, pad_r) = same_padding(h, stride, (kh - 1) * dilation + 1);
    let (ow, pad_c) = same_padding(w, stride, (kw - 1) * dilation + 1);
    debug_assert_eq!(gy.dims, [n, oh, ow, cout]);
    let mut gx = Tensor4::zeros(x.dims);
    let mut gw = Tensor4::zeros(kernel.dims);
    for b in 0..n {
        for oi in 0..oh {
            for oj in 0..ow {
                let gy_off = gy.idx(b, oi, oj, 0);
                let grow = &gy.data[gy_off..gy_off + cout];
                for ki in 0..kh {
                    let si = (oi * stride + ki * dilation) as isize - pad_r as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for kj in 0..kw {
                        let sj = (oj * stride + kj * dilation) as isize - pad_c as isize;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        let x_off = x.idx(b, si as usize, sj as usize, 0);
                        let w_off = (ki * kw + kj) * cin * cout;
                        for ci in 0..cin {
                            let xv = x.data[x_off + ci];
                            let wrow = &kernel.data[w_off + ci * cout..w_off + (ci + 1) * cout];
                            let gwrow = &mut gw.data[w_off + ci * cout..w_off + (ci + 1) * cout];
                            let mut acc = 0.0;
                            for ((&g, &wv), gw_el) in grow.iter().zip(wrow).zip(gwrow.iter_mut()) {
                                acc += g * wv;
                                *gw_el += xv * g;
                            }
                            gx.data[x_off + ci] += acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Per-channel spatial convolution; kernel shape (kh, kw, C, 1).
pub fn depthwise_conv(x: &Tensor4, kernel: &Tensor4, stride: usize) -> Result<Tensor4> {
    check_conv_inputs(x, kernel, stride, 1)?;
    if kernel.dims[3] != 1 {
        return Err(Error::ShapeMismatch(
            "depthwise kernel must have multiplier 1".into(),
        ));
    }
    let [n, h, w, c] = x.dims;
    let [kh, kw, _, _] = kernel.dims;
    let (oh, pad_r) = same_padding(h, stride, kh);
    let (ow, pad_c) = same_padding(w, stride, kw);
    let mut out = Tensor4::zeros([n, oh, ow, c]);
    for b in 0..n {
        for oi in 0..oh {
            for oj in 0..ow {
                let dst_off = out.idx(b, oi, oj, 0);
                for ki in 0..kh {
                    let si = (oi * stride + ki) as isize - pad_r as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for kj in 0..kw {
                        let sj = (oj * stride + kj) as isize - pad_c as isize;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        let x_off = x.idx(b, si as usize, sj as usize, 0);
                        let w_off = (ki * kw + kj) * c;
                        for k in 0..c {
                            out.data[dst_off + k] += x.data[x_off + k] * kernel.data[w_off + k];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn depthwise_conv_backward(
    x: &Tensor4,
    kernel: &Tensor4,
    stride: usize,
    gy: &Tensor4,
) -> (Tensor4, Tensor4) {
    let [n, h, w, c] = x.dims;
    let [kh, kw, _, _] = kernel.dims;
    let (oh, pad_r) = same_padding(h, stride, kh);
    let (ow, pad_c) = same_padding(w, stride, kw);
    debug_assert_eq!(gy.dims, [n, oh, ow, c]);
    let mut gx = Tensor4::zeros(x.dims);
    let mut gw = Tensor4::zeros(kernel.dims);
    for b in 0..n {
        for oi in 0..oh {
            for oj in 0..ow {
                let gy_off = gy.idx(b, oi, oj, 0);
                for ki in 0..kh {
                    let si = (oi * stride + ki) as isize - pad_r as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for kj in 0..kw {
                        let sj = (oj * stride + kj) as isize - pad_c as isize;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        let x_off = x.idx(b, si as usize, sj as usize, 0);
                        let w_off = (ki * kw + kj) * c;
                        for k in 0..c {
                            let g = gy.data[gy_off + k];
                            gx.data[x_off + k] += g * kernel.data[w_off + k];
                            gw.data[w_off + k] += g * x.data[x_off + k];
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Per-channel bias add; bias shape (1, 1, 1, C).
pub fn bias_add(x: &Tensor4, bias: &Tensor4) -> Result<Tensor4> {
    let c = x.dims[3];
    if bias.dims != [1, 1, 1, c] {
        return Err(Error::ShapeMismatch("bias_add: bias shape".into()));
    }
    let mut y = x.clone();
    for px in y.data.chunks_mut(c) {
        for (v, b) in px.iter_mut().zip(&bias.data) {
            *v += b;
        }
    }
    Ok(y)
}

/// Gradient of [`bias_add`] w.r.t. the bias (input gradient is `gy` itself).
pub fn bias_add_backward(gy: &Tensor4) -> Tensor4 {
    let c = gy.dims[3];
    let mut gb = Tensor4::zeros([1, 1, 1, c]);
    for px in gy.data.chunks(c) {
        for (g, &v) in gb.data.iter_mut().zip(px) {
            *g += v;
        }
    }
    gb
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Saved intermediates from a training-mode batchnorm forward.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub x_hat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

///// Training-mode batchnorm: normalize by batch statistics (population
/// variance) and return the cache needed for the backward pass and the
/// running-stat update.
pub fn batchnorm_train(
    x: &Tensor4,
    scale: &Tensor4,
    shift: &Tensor4,
    epsilon: f64,
) -> Result<(Tensor4, BnCache)> {
    let c = x.dims[3];
    if scale.dims != [1, 1, 1, c] || shift.dims != [1, 1, 1, c] {
        return Err(Error::ShapeMismatch("batchnorm: scale/shift channels".into()));
    }
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument("batchnorm: epsilon must be > 0".into()));
    }
    let m = (x.len() / c) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for px in x.data.chunks(c) {
        for (acc, &v) in mean.iter_mut().zip(px) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= m;
    }
    for px in x.data.chunks(c) {
        for k in 0..c {
            let d = px[k] - mean[k];
            var[k] += d * d;
        }
    }
    for v in &mut var {
        *v /= m;
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + epsilon).sqrt()).collect();
    let mut y = Tensor4::zeros(x.dims);
    let mut x_hat = vec![0.0; x.len()];
    for (p, (px, py)) in x.data.chunks(c).zip(y.data.chunks_mut(c)).enumerate() {
        for k in 0..c {
            let xh = (px[k] - mean[k]) * inv_std[k];
            x_hat[p * c + k] = xh;
            py[k] = scale.data[k] * xh + shift.data[k];
        }
    }
    Ok((
        y,
        BnCache {
            x_hat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    ))
}

/// Inference-mode batchnorm using running statistics.
pub fn batchnorm_infer(
    x: &Tensor4,
    scale: &Tensor4,
    shift: &Tensor4,
    running_mean: &Tensor4,
    running_var: &Tensor4,
    epsilon: f64,
) -> Result<Tensor4> {
    let c = x.dims[3];
    if scale.dims != [1, 1, 1, c] || running_mean.dims != [1, 1, 1, c] {
        return Err(Error::ShapeMismatch("batchnorm: channel mismatch".into()));
    }
    let mut y = Tensor4::zeros(x.dims);
    for (px, py) in x.data.chunks(c).zip(y.data.chunks_mut(c)) {
        for k in 0..c {
            let inv = 1.0 / (running_var.data[k] + epsilon).sqrt();
            py[k] = scale.data[k] * (px[k] - running_mean.data[k]) * inv + shift.data[k];
        }
    }
    Ok(y)
}

/// Gradients of training-mode batchnorm w.r.t. input, scale and shift.
pub fn batchnorm_backward(
    cache: &BnCache,
    scale: &Tensor4,
    gy: &Tensor4,
) -> (Tensor4, Tensor4, Tensor4) {
    let c = gy.dims[3];
    let m = (gy.len() / c) as f64;
    let mut g_shift = Tensor4::zeros([1, 1, 1, c]);
    let mut g_scale = Tensor4::zeros([1, 1, 1, c]);
    for (p, px) in gy.data.chunks(c).enumerate() {
        for k in 0..c {
            g_shift.data[k] += px[k];
            g_scale.data[k] += px[k] * cache.x_hat[p * c + k];
        }
    }
    let mut gx = Tensor4::zeros(gy.dims);
    for (p, (pgy, pgx)) in gy.data.chunks(c).zip(gx.data.chunks_mut(c)).enumerate() {
        for k in 0..c {
            let term = pgy[k] - g_shift.data[k] / m - cache.x_hat[p * c + k] * g_scale.data[k] / m;
            pgx[k] = scale.data[k] * cache.inv_std[k] * term;
        }
    }
    (gx, g_scale, g_shift)
}

pub fn relu(x: &Tensor4) -> Tensor4 {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn relu_backward(x: &Tensor4, gy: &Tensor4) -> Tensor4 {
    let mut gx = gy.clone();
    for (g, &v) in gx.data.iter_mut().zip(&x.data) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    gx
}

/// Softmax over a designated pair of channels; input must have exactly 2
/// channels. Output channels sum to 1 per pixel.
pub fn softmax_pair(logits: &Tensor4) -> Result<Tensor4> {
    if logits.dims[3] != 2 {
        return Err(Error::ShapeMismatch("softmax_pair expects 2 channels".into()));
    }
    let mut y = Tensor4::zeros(logits.dims);
    for (px, py) in logits.data.chunks(2).zip(y.data.chunks_mut(2)) {
        let m = px[0].max(px[1]);
        let e0 = (px[0] - m).exp();
        let e1 = (px[1] - m).exp();
        let s = e0 + e1;
        py[0] = e0 / s;
        py[1] = e1 / s;
    }
    Ok(y)
}

/// Jacobian-vector product of [`softmax_pair`]: gradient w.r.t. logits given
/// the gradient w.r.t. probabilities.
pub fn softmax_pair_backward(probs: &Tensor4, g_prob: &Tensor4) -> Tensor4 {
    let mut gz = Tensor4::zeros(probs.dims);
    for ((pp, pg), pz) in probs
        .data
        .chunks(2)
        .zip(g_prob.data.chunks(2))
        .zip(gz.data.chunks_mut(2))
    {
        let dot = pg[0] * pp[0] + pg[1] * pp[1];
        pz[0] = pp[0] * (pg[0] - dot);
        pz[1] = pp[1] * (pg[1] - dot);
    }
    gz
}

/// Corner-aligned bilinear resize to the given spatial size (upsampling only).
pub fn resize_to(x: &Tensor4, h2: usize, w2: usize) -> Result<Tensor4> {
    let [n, h, w, c] = x.dims;
    if h2 < h || w2 < w {
        return Err(Error::InvalidArgument(format!(
            "resize_to: target {}x{} smaller than source {}x{}",
            h2, w2, h, w
        )));
    }
    let mut y = Tensor4::zeros([n, h2, w2, c]);
    let sr = if h2 > 1 && h > 1 {
        (h - 1) as f64 / (h2 - 1) as f64
    } else {
        0.0
    };
    let sc = if w2 > 1 && w > 1 {
        (w - 1) as f64 / (w2 - 1) as f64
    } else {
        0.0
    };
    for b in 0..n {
        for i in 0..h2 {
            let rs = i as f64 * sr;
            let r0 = (rs.floor() as usize).min(h - 1);
            let r1 = (r0 + 1).min(h - 1);
            let fr = rs - r0 as f64;
            for j in 0..w2 {
                let cs = j as f64 * sc;
                let c0 = (cs.floor() as usize).min(w - 1);
                let c1 = (c0 + 1).min(w - 1);
                let fc = cs - c0 as f64;
                let dst = y.idx(b, i, j, 0);
                let p00 = x.idx(b, r0, c0, 0);
                let p01 = x.idx(b, r0, c1, 0);
                let p10 = x.idx(b, r1, c0, 0);
                let p11 = x.idx(b, r1, c1, 0);
                for k in 0..c {
                    y.data[dst + k] = (1.0 - fr) * (1.0 - fc) * x.data[p00 + k]
                        + (1.0 - fr) * fc * x.data[p01 + k]
                        + fr * (1.0 - fc) * x.data[p10 + k]
                        + fr * fc * x.data[p11 + k];
                }
            }
        }
    }
    Ok(y)
}

/// Adjoint of [`resize_to`]: scatter an output gradient back to source size.
pub fn resize_to_adjoint(gy: &Tensor4, h: usize, w: usize) -> Tensor4 {
    let [n, h2, w2, c] = gy.dims;
    let mut gx = Tensor4::zeros([n, h, w, c]);
    let sr = if h2 > 1 && h > 1 {
        (h - 1) as f64 / (h2 - 1) as f64
    } else {
        0.0
    };
    let sc = if w2 > 1 && w > 1 {
        (w - 1) as f64 / (w2 - 1) as f64
    } else {
        0.0
    };
    for b in 0..n {
        for i in 0..h2 {
            let rs = i as f64 * sr;
            let r0 = (rs.floor() as usize).min(h - 1);
            let r1 = (r0 + 1).min(h - 1);
            let fr = rs - r0 as f64;
            for j in 0..w2 {
                let cs = j as f64 * sc;
                let c0 = (cs.floor() as usize).min(w - 1);
                let c1 = (c0 + 1).min(w - 1);
                let fc = cs - c0 as f64;
                let src = gy.idx(b, i, j, 0);
                let p00 = gx.idx(b, r0, c0, 0);
                let p01 = gx.idx(b, r0, c1, 0);
                let p10 = gx.idx(b, r1, c0, 0);
                let p11 = gx.idx(b, r1, c1, 0);
                for k in 0..c {
                    let g = gy.data[src + k];
                    gx.data[p00 + k] += (1.0 - fr) * (1.0 - fc) * g;
                    gx.data[p01 + k] += (1.0 - fr) * fc * g;
                    gx.data[p10 + k] += fr * (1.0 - fc) * g;
                    gx.data[p11 + k] += fr * fc * g;
                }
            }
        }
    }
    gx
}

/// Mean over the spatial extent, one value per (batch, channel).
pub fn global_avg_pool(x: &Tensor4) -> Tensor4 {
    let [n, h, w, c] = x.dims;
    let mut y = Tensor4::zeros([n, 1, 1, c]);
    let inv = 1.0 / (h * w) as f64;
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let off = x.idx(b, i, j, 0);
                for k in 0..c {
                    y.data[b * c + k] += x.data[off + k] * inv;
                }
            }
        }
    }
    y
}

pub fn global_avg_pool_backward(gy: &Tensor4, h: usize, w: usize) -> Tensor4 {
    let [n, _, _, c] = gy.dims;
    let mut gx = Tensor4::zeros([n, h, w, c]);
    let inv = 1.0 / (h * w) as f64;
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let off = gx.idx(b, i, j, 0);
                for k in 0..c {
                    gx.data[off + k] = gy.data[b * c + k] * inv;
                }
            }
        }
    }
    gx
}

/// Broadcast a (n, 1, 1, c) tensor over a spatial extent.
pub fn broadcast_spatial(x: &Tensor4, h: usize, w: usize) -> Tensor4 {
    let [n, _, _, c] = x.dims;
    let mut y = Tensor4::zeros([n, h, w, c]);
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let off = y.idx(b, i, j, 0);
                y.data[off..off + c].copy_from_slice(&x.data[b * c..(b + 1) * c]);
            }
        }
    }
    y
}

pub fn broadcast_spatial_backward(gy: &Tensor4) -> Tensor4 {
    let [n, h, w, c] = gy.dims;
    let mut gx = Tensor4::zeros([n, 1, 1, c]);
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let off = gy.idx(b, i, j, 0);
                for k in 0..c {
                    gx.data[b * c + k] += gy.data[off + k];
                }
            }
        }
    }
    gx
}

/// Inverted dropout. Training mode zeroes elements with probability
/// `1 - keep_rate` and scales survivors by `1/keep_rate`; inference is the
/// identity. Returns the mask for the backward pass.
pub fn dropout(x: &Tensor4, keep_rate: f64, rng: &mut impl Rng, mode: Mode) -> (Tensor4, Vec<f64>) {
    if mode == Mode::Infer || keep_rate >= 1.0 {
        return (x.clone(), vec![1.0; x.len()]);
    }
    let mut mask = vec![0.0; x.len()];
    let mut y = Tensor4::zeros(x.dims);
    for (i, (&v, m)) in x.data.iter().zip(mask.iter_mut()).enumerate() {
        if rng.gen::<f64>() < keep_rate {
            *m = 1.0 / keep_rate;
            y.data[i] = v * *m;
        }
    }
    (y, mask)
}

pub fn dropout_backward(gy: &Tensor4, mask: &[f64]) -> Tensor4 {
    let mut gx = gy.clone();
    for (g, &m) in gx.data.iter_mut().zip(mask) {
        *g *= m;
    }
    gx
}
