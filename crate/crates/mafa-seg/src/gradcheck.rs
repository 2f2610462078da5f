//! Central-difference verification of every analytic gradient in the crate.
//!
//! Each check builds a small random fixture, reduces the op's output to a
//! scalar with a fixed random weighting, and compares the hand-written
//! backward pass against `(f(x + h) - f(x - h)) / 2h` coordinate by
//! coordinate. Results are reported as machine-parseable
//! `op,max_rel_err,pass` lines.

use crate::contour::{self, DICE_TAU};
use crate::geometry::{self, Angle, BinaryMask, RotationMode};
use crate::mafa::{self, Aggregation};
use crate::model::{Model, ModelConfig};
use crate::nn::{self, Mode};
use crate::tensor::Tensor4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Tolerance for isolated operations.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the end-to-end network check.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub op: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "{},{:.3e},{}",
            self.op,
            self.max_rel_err,
            if self.pass { "pass" } else { "fail" }
        )
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Worst relative error between `analytic` and the central difference of
/// `f` at `x`, over the given coordinates.
pub fn central_diff_max_rel_err(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    indices: &[usize],
    h: f64,
) -> f64 {
    let mut buf = x.to_vec();
    let mut worst = 0.0f64;
    for &i in indices {
        let v = buf[i];
        buf[i] = v + h;
        let fp = f(&buf);
        buf[i] = v - h;
        let fm = f(&buf);
        buf[i] = v;
        let numeric = (fp - fm) / (2.0 * h);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}

fn all_indices(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Weighted-sum reduction so every op check has a scalar objective; the
/// weight vector doubles as the upstream gradient.
fn weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    random_vec(rng, n, -1.0, 1.0)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn result(op: &str, err: f64, tol: f64) -> CheckResult {
    CheckResult {
        op: op.into(),
        max_rel_err: err,
        pass: err < tol,
    }
}

fn check_conv2d(rng: &mut ChaCha8Rng, stride: usize, dilation: usize, label: &str) -> CheckResult {
    let x_dims = [1, 6, 6, 2];
    let k_dims = [3, 3, 2, 3];
    let xn = 72;
    let kn = 54;
    let v = random_vec(rng, xn + kn, -1.0, 1.0);
    let split = |v: &[f64]| {
        (
            Tensor4::from_vec(x_dims, v[..xn].to_vec()).unwrap(),
            Tensor4::from_vec(k_dims, v[xn..].to_vec()).unwrap(),
        )
    };
    let (x, k) = split(&v);
    let y = nn::conv2d(&x, &k, stride, dilation).unwrap();
    let w = weights(rng, y.len());
    let gy = Tensor4::from_vec(y.dims, w.clone()).unwrap();
    let (gx, gk) = nn::conv2d_backward(&x, &k, stride, dilation, &gy);
    let analytic: Vec<f64> = gx.data.iter().chain(&gk.data).copied().collect();
    let mut f = |v: &[f64]| {
        let (x, k) = split(v);
        dot(&nn::conv2d(&x, &k, stride, dilation).unwrap().data, &w)
    };
    let err = central_diff_max_rel_err(&mut f, &v, &analytic, &all_indices(v.len()), STEP);
    result(label, err, OP_TOLERANCE)
}

fn check_depthwise(rng: &mut ChaCha8Rng) -> CheckResult {
    let x_dims = [1, 6, 6, 3];
    let k_dims = [3, 3, 3, 1];
    let (xn, kn) = (108, 27);
    let v = random_vec(rng, xn + kn, -1.0, 1.0);
    let split = |v: &[f64]| {
        (
            Tensor4::from_vec(x_dims, v[..xn].to_vec()).unwrap(),
            Tensor4::from_vec(k_dims, v[xn..].to_vec()).unwrap(),
        )
    };
    let (x, k) = split(&v);
    let y = nn::depthwise_conv(&x, &k, 1).unwrap();
    let w = weights(rng, y.len());
    let gy = Tensor4::from_vec(y.dims, w.clone()).unwrap();
    let (gx, gk) = nn::depthwise_conv_backward(&x, &k, 1, &gy);
    let analytic: Vec<f64> = gx.data.iter().chain(&gk.data).copied().collect();
    let mut f = |v: &[f64]| {
        let (x, k) = split(v);
        dot(&nn::depthwise_conv(&x, &k, 1).unwrap().data, &w)
    };
    let err = central_diff_max_rel_err(&mut f, &v, &analytic, &all_indices(v.len()), STEP);
    result("depthwise_conv", err, OP_TOLERANCE)
}

fn check_batchnorm(rng: &mut ChaCha8Rng) -> CheckResult {
    let x_dims = [2, 4, 4, 3];
    let xn = 96;
    let cn = 3;
    let mut v = random_vec(rng, xn + 2 * cn, -1.0, 1.0);
    for s in v[xn..xn + cn].iter_mut() {
        *s += 1.5; // keep scales away from zero
    }
    let split = |v: &[f64]| {
        (
            Tensor4::from_vec(x_dims, v[..xn].to_vec()).unwrap(),
            Tensor4::from_vec([1, 1, 1, cn], v[xn..xn + cn].to_vec()).unwrap(),
            Tensor4::from_vec([1, 1, 1, cn], v[xn + cn..].to_vec()).unwrap(),
        )
    };
    let (x, scale, shift) = split(&v);
    let (y, cache) = nn::batchnorm_train(&x, &scale, &shift, 1e-5).unwrap();
    let w = weights(rng, y.len());
    let gy = Tensor4::from_vec(y.dims, w.clone()).unwrap();
    let (gx, g_scale, g_shift) = nn::batchnorm_backward(&cache, &scale, &gy);
    let analytic: Vec<f64> = gx
        .data
        .iter()
        .chain(&g_scale.data)
        .chain(&g_shift.data)
        .copied()
        .collect();
    let mut f = |v: &[f64]| {
        let (x, scale, shift) = split(v);
        let (y, _) = nn::batchnorm_train(&x, &scale, &shift, 1e-5).unwrap();
        dot(&y.data, &w)
    };
    let err = central_diff_max_rel_err(&mut f, &v, &analytic, &all_indices(v.len()), STEP);
    result("batchnorm", err, OP_TOLERANCE)
}

fn check_relu(rng: &mut ChaCha8Rng) -> CheckResult {
    let dims = [1, 5, 5, 2];
    // keep samples away from the kink at zero
    let v: Vec<f64> = random_vec(rng, 50, 0.1, 1.0)
        .into_iter()
        .zip(random_vec(rng, 50, 0.0, 1.0))
        .map(|(m, coin)| if coin < 0.5 { -m } else { m })
        .collect();
    let x = Tensor4::from_vec(dims, v.clone()).unwrap();
    let w = weights(rng, 50);
    let gy = Tensor4::from_vec(dims, w.clone()).unwrap();
    let gx = nn::relu_backward(&x, &gy);
    let mut f = |v: &[f64]| {
        let x = Tensor4::from_vec(dims, v.to_vec()).unwrap();
        dot(&nn::relu(&x).data, &w)
    };
    let err = central_diff_max_rel_err(&mut f, &v, &gx.data, &all_indices(50), STEP);
    result("relu", err, OP_TOLERANCE)
}

fn check_softmax_pair(rng: &mut ChaCha8Rng) -> CheckResult {
    let dims = [1, 4, 4, 2];
    let v = random_vec(rng, 32, -2.0, 2.0);
    let x = Tensor4::from_vec(dims, v.clone()).unwrap();
    let p = nn::softmax_pair(&x).unwrap();
    let w = weights(rng, 32);
    let gp = Tensor4::from_vec(dims, w.clone()).unwrap();
    let gz = nn::softmax_pair_backward(&p, &gp);
    let mut f = |v: &[f64]| {
        let x = Tensor4::from_vec(dims, v.to_vec()).unwrap();
        dot(&nn::softmax_pair(&x).unwrap().data, &w)
    };
    let err = central_diff_max_rel_err(&mut f, &v, &gz.data, &all_indices(32), STEP);
    result("softmax_pair", err, OP_TOLERANCE)
}

fn check_resize(rng: &mut ChaCha8Rng) -> CheckResult {
    let dims = [1, 3, 3, 2];
    let v = random_vec(rng, 18, -1.0, 1.0);
    let x = Tensor4::from_vec(dims, v.clone()).unwrap();
    let y = nn::resize_to(&x, 7, 7).unwrap();
    let w = weights(rng, y.len());
    let gy = Tensor4::from_vec(y.dims, w.clone()).unwrap();
    let gx = nn::resize_to_adjoint(&gy, 3, 3);
    let mut f = |v: &[f64]| {
        let x = Tensor4::from_vec(dims, v.to_vec()).unwrap();
        dot(&nn::resize_to(&x, 7, 7).unwrap().data, &w)
    };
    let err = central_diff_max_rel_err(&mut f, &v, &gx.data, &all_indices(18), STEP);
    result("resize_bilinear", err, OP_TOLERANCE)
}

fn check_pool_broadcast(rng: &mut ChaCha8Rng) -> CheckResult {
    let dims = [2, 4, 4, 3];
    let v = random_vec(rng, 96, -1.0, 1.0);
    let x = Tensor4::from_vec(dims, v.clone()).unwrap();
    let y = nn::broadcast_spatial(&nn::global_avg_pool(&x), 4, 4);
    let w = weights(rng, y.len());
    let gy = Tensor4::from_vec(y.dims, w.clone()).unwrap();
    let gx = nn::global_avg_pool_backward(&nn::broadcast_spatial_backward(&gy), 4, 4);
    let mut f = |v: &[f64]| {
        let x = Tensor4::from_vec(dims, v.to_vec()).unwrap();
        dot(
            &nn::broadcast_spatial(&nn::global_avg_pool(&x), 4, 4).data,
            &w,
        )
    };
    let err = central_diff_max_rel_err(&mut f, &v, &gx.data, &all_indices(96), STEP);
    result("global_pool_broadcast", err, OP_TOLERANCE)
}

fn check_rotation_bilinear(rng: &mut ChaCha8Rng) -> CheckResult {
    let dims = [1, 9, 9, 2];
    let v = random_vec(rng, 162, -1.0, 1.0);
    let x = Tensor4::from_vec(dims, v.clone()).unwrap();
    let phi = Angle::deg(60.0);
    let y = geometry::rotate_t4(&x, phi, RotationMode::Bilinear).unwrap();
    let w = weights(rng, y.len());
    let gy = Tensor4::from_vec(y.dims, w.clone()).unwrap();
    let gx = geometry::rotate_t4_adjoint(&gy, phi, RotationMode::Bilinear).unwrap();
    let mut f = |v: &[f64]| {
        let x = Tensor4::from_vec(dims, v.to_vec()).unwrap();
        dot(
            &geometry::rotate_t4(&x, phi, RotationMode::Bilinear)
                .unwrap()
                .data,
            &w,
        )
    };
    let err = central_diff_max_rel_err(&mut f, &v, &gx.data, &all_indices(162), STEP);
    result("rotate_bilinear", err, OP_TOLERANCE)
}

fn check_aggregate(rng: &mut ChaCha8Rng, mode: Aggregation, label: &str) -> CheckResult {
    let dims = [1, 4, 4, 2];
    let n_maps = 3;
    let per = 32;
    let v = random_vec(rng, n_maps * per, -1.0, 1.0);
    let split = |v: &[f64]| -> Vec<Tensor4> {
        (0..n_maps)
            .map(|k| Tensor4::from_vec(dims, v[k * per..(k + 1) * per].to_vec()).unwrap())
            .collect()
    };
    let maps = split(&v);
    let y = mafa::aggregate_t4(&maps, mode).unwrap();
    let w = weights(rng, y.len());
    let gy = Tensor4::from_vec(y.dims, w.clone()).unwrap();
    let gs = mafa::aggregate_t4_backward(&maps, mode, &gy);
    let analytic: Vec<f64> = gs.iter().flat_map(|g| g.data.iter().copied()).collect();
    let mut f = |v: &[f64]| dot(&mafa::aggregate_t4(&split(v), mode).unwrap().data, &w);
    let err = central_diff_max_rel_err(&mut f, &v, &analytic, &all_indices(v.len()), STEP);
    result(label, err, OP_TOLERANCE)
}

fn check_dice_loss(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut mask = BinaryMask::zeros(8, 8);
    for r in 2..6 {
        for c in 2..6 {
            mask.set(r, c, true);
        }
    }
    let gt = contour::extract_contour_gt(&mask, 1).unwrap();
    let dims = gt.dims;
    let v = random_vec(rng, gt.len(), 0.05, 0.95);
    let pred = Tensor4::from_vec(dims, v.clone()).unwrap();
    let (_, grad) = contour::dice_contour_loss(&pred, &gt, DICE_TAU).unwrap();
    let mut f = |v: &[f64]| {
        let pred = Tensor4::from_vec(dims, v.to_vec()).unwrap();
        contour::dice_contour_loss(&pred, &gt, DICE_TAU).unwrap().0
    };
    let err = central_diff_max_rel_err(&mut f, &v, &grad.data, &all_indices(v.len()), STEP);
    result("dice_contour_loss", err, OP_TOLERANCE)
}

fn check_cross_entropy(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut mask = BinaryMask::zeros(6, 6);
    for r in 1..4 {
        for c in 2..5 {
            mask.set(r, c, true);
        }
    }
    let gt = contour::mask_to_onehot(&mask);
    let dims = gt.dims;
    let v = random_vec(rng, gt.len(), 0.05, 0.95);
    let pred = Tensor4::from_vec(dims, v.clone()).unwrap();
    let (_, grad) = contour::cross_entropy_seg_loss(&pred, &gt).unwrap();
    let mut f = |v: &[f64]| {
        let pred = Tensor4::from_vec(dims, v.to_vec()).unwrap();
        contour::cross_entropy_seg_loss(&pred, &gt).unwrap().0
    };
    let err = central_diff_max_rel_err(&mut f, &v, &grad.data, &all_indices(v.len()), STEP);
    result("cross_entropy_loss", err, OP_TOLERANCE)
}

/// All isolated-operation checks.
pub fn run_op_checks(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        check_conv2d(&mut rng, 1, 1, "conv2d"),
        check_conv2d(&mut rng, 2, 1, "conv2d_stride2"),
        check_conv2d(&mut rng, 1, 2, "conv2d_dilated"),
        check_depthwise(&mut rng),
        check_batchnorm(&mut rng),
        check_relu(&mut rng),
        check_softmax_pair(&mut rng),
        check_resize(&mut rng),
        check_pool_broadcast(&mut rng),
        check_rotation_bilinear(&mut rng),
        check_aggregate(&mut rng, Aggregation::Mean, "aggregate_mean"),
        check_aggregate(&mut rng, Aggregation::MaxOut, "aggregate_max_out"),
        check_dice_loss(&mut rng),
        check_cross_entropy(&mut rng),
    ]
}

fn end_to_end_config() -> ModelConfig {
    ModelConfig {
        input_size: 16,
        widths: [2, 4, 4],
        skip_channels: 2,
        aspp_channels: 4,
        decoder_widths: [4, 4],
        ..Default::default()
    }
}

/// Whole-network check: the loss combines the segmentation cross-entropy and
/// the contour Dice term, and a spread-out sample of parameter coordinates is
/// verified against central differences.
pub fn run_end_to_end(seed: u64, sampled_coords: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = end_to_end_config();
    let model = Model::new(cfg.clone(), seed).unwrap();

    let mut x = Tensor4::zeros([1, 16, 16, 3]);
    for v in &mut x.data {
        *v = rng.gen::<f64>();
    }
    let mut mask = BinaryMask::zeros(16, 16);
    for r in 4..12 {
        for c in 6..13 {
            mask.set(r, c, true);
        }
    }
    let seg_gt = contour::mask_to_onehot(&mask);
    let con_gt = contour::extract_contour_gt(&mask, 3).unwrap();

    // flatten the trainable parameters into one vector
    let names = model.params.trainable_names();
    let mut flat = Vec::new();
    let mut spans = Vec::new();
    for name in &names {
        let t = model.params.get(name);
        spans.push((name.clone(), flat.len(), t.len()));
        flat.extend_from_slice(&t.data);
    }

    let loss_of = |v: &[f64]| -> (f64, Option<(Tensor4, Tensor4, crate::model::Trace, Model)>) {
        let mut m = Model::new(cfg.clone(), seed).unwrap();
        for (name, start, len) in &spans {
            m.params.get_mut(name).data.copy_from_slice(&v[*start..*start + *len]);
        }
        let mut drop_rng = ChaCha8Rng::seed_from_u64(7);
        let (out, trace) = m.forward(&x, Mode::Train, &mut drop_rng).unwrap();
        let (l_s, g_seg) = contour::cross_entropy_seg_loss(&out.seg, &seg_gt).unwrap();
        let (l_c, g_con) = contour::dice_contour_loss(&out.contour, &con_gt, DICE_TAU).unwrap();
        (l_s + l_c, Some((g_seg, g_con, trace.unwrap(), m)))
    };

    // analytic gradient at the base point
    let (_, pack) = loss_of(&flat);
    let (g_seg, g_con, trace, m) = pack.unwrap();
    let grads = m.backward(&trace, &g_seg, &g_con).unwrap();
    let mut analytic = vec![0.0; flat.len()];
    for (name, start, len) in &spans {
        if let Some(g) = grads.get(name) {
            analytic[*start..*start + *len].copy_from_slice(&g.data);
        }
    }

    // evenly spread coordinate sample
    let stride = (flat.len() / sampled_coords.max(1)).max(1);
    let indices: Vec<usize> = (0..flat.len()).step_by(stride).take(sampled_coords).collect();
    let mut f = |v: &[f64]| loss_of(v).0;
    let err = central_diff_max_rel_err(&mut f, &flat, &analytic, &indices, STEP);
    result("end_to_end", err, END_TO_END_TOLERANCE)
}

/// The full suite: op checks across several seeds plus the end-to-end check.
pub fn run_all(base_seed: u64, seeds: usize) -> Vec<CheckResult> {
    let mut worst: Vec<CheckResult> = Vec::new();
    for s in 0..seeds as u64 {
        for r in run_op_checks(base_seed + s) {
            match worst.iter_mut().find(|w| w.op == r.op) {
                Some(w) => {
                    if r.max_rel_err > w.max_rel_err {
                        *w = r;
                    }
                }
                None => worst.push(r),
            }
        }
    }
    worst.push(run_end_to_end(base_seed, 48));
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_suite_passes() {
        for r in run_op_checks(1234) {
            assert!(r.pass, "{}", r.line());
        }
    }

    #[test]
    fn end_to_end_passes() {
        let r = run_end_to_end(5, 40);
        assert!(r.pass, "{}", r.line());
    }

    #[test]
    fn harness_catches_wrong_gradients() {
        // negative control: a deliberately scaled gradient must fail
        let v = vec![0.3, -0.7, 1.1];
        let analytic = vec![2.0 * 0.3 * 1.5, 2.0 * -0.7 * 1.5, 2.0 * 1.1 * 1.5];
        let mut f = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let err = central_diff_max_rel_err(&mut f, &v, &analytic, &[0, 1, 2], STEP);
        assert!(err > OP_TOLERANCE);
    }

    #[test]
    fn line_format() {
        let r = CheckResult {
            op: "conv2d".into(),
            max_rel_err: 3.2e-9,
            pass: true,
        };
        assert_eq!(r.line(), "conv2d,3.200e-9,pass");
    }
}
