//! The segmentation network: a compact encoder-decoder with an atrous
//! spatial pyramid, a low-level skip connection, and a four-channel head
//! producing a segmentation pair and a contour pair of probability maps.
//!
//! Multi-angle aggregation wraps a prefix of the network: the input is
//! rotated once per angle, the prefix runs on each copy, the resulting
//! feature maps are rotated back into a common frame and fused, and the
//! remaining layers run once on the fused features. The skip feature crosses
//! the same boundary, so it is rotated, aligned and fused the same way.
//!
//! Everything is trained with hand-written reverse-mode gradients; forward
//! passes in training mode record the intermediates the backward pass needs.

use crate::error::{Error, Result};
use crate::geometry::{self, Angle, BinaryMask};
use crate::mafa::{self, MafaConfig, Placement};
use crate::nn::{self, BnCache, Mode};
use crate::optim::{AdamState, GradMap, ParamSet};
use crate::tensor::Tensor4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Static architecture description. The defaults give an output-stride-8
/// encoder for square inputs divisible by 8.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    pub in_channels: usize,
    /// Channel widths of the three stride-2 encoder stages.
    pub widths: [usize; 3],
    /// Channels of the 1x1-reduced low-level skip feature.
    pub skip_channels: usize,
    /// Channels of each pyramid branch and of the fused projection.
    pub aspp_channels: usize,
    /// Dilation rates of the two atrous 3x3 pyramid branches.
    pub atrous_rates: [usize; 2],
    /// Widths of the two refinement convolutions before the head.
    pub decoder_widths: [usize; 2],
    /// Batch normalization after every convolution except the head; when
    /// off, convolutions carry biases instead.
    pub batchnorm: bool,
    /// Keep rate of the dropout applied to the concatenated decoder input.
    pub dropout_keep: f64,
    pub mafa: MafaConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 96,
            in_channels: 3,
            widths: [16, 32, 64],
            skip_channels: 8,
            aspp_channels: 32,
            atrous_rates: [2, 4],
            decoder_widths: [32, 32],
            batchnorm: true,
            dropout_keep: 0.5,
            mafa: MafaConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size % 8 != 0 || self.input_size == 0 {
            return Err(Error::Config(format!(
                "input_size must be a positive multiple of 8, got {}",
                self.input_size
            )));
        }
        if !(0.0 < self.dropout_keep && self.dropout_keep <= 1.0) {
            return Err(Error::Config("dropout_keep must be in (0, 1]".into()));
        }
        self.mafa.validate()
    }
}

/// Probability maps from a forward pass, each `[n, h, w, 2]` with channels
/// (background, foreground).
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub seg: Tensor4,
    pub contour: Tensor4,
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

// ---------------------------------------------------------------------------
// conv (+ bn | bias) (+ relu) unit

struct UnitTrace {
    x: Tensor4,
    bn: Option<BnCache>,
    /// Pre-activation (after bn or bias).
    pre: Tensor4,
    relu: bool,
}

fn he_kernel(rng: &mut ChaCha8Rng, kh: usize, kw: usize, cin: usize, cout: usize) -> Tensor4 {
    let std = (2.0 / (kh * kw * cin) as f64).sqrt();
    let normal = rand_distr::Normal::new(0.0, std).unwrap();
    let mut t = Tensor4::zeros([kh, kw, cin, cout]);
    for v in &mut t.data {
        *v = rng.sample(normal);
    }
    t
}

fn insert_unit_params(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
    bn: bool,
) -> Result<()> {
    params.insert(format!("{prefix}.conv.w"), he_kernel(rng, kh, kw, cin, cout))?;
    if bn {
        params.insert(format!("{prefix}.bn.scale"), Tensor4::filled([1, 1, 1, cout], 1.0))?;
        params.insert(format!("{prefix}.bn.shift"), Tensor4::zeros([1, 1, 1, cout]))?;
        params.insert(format!("{prefix}.bn.running_mean"), Tensor4::zeros([1, 1, 1, cout]))?;
        params.insert(
            format!("{prefix}.bn.running_var"),
            Tensor4::filled([1, 1, 1, cout], 1.0),
        )?;
    } else {
        params.insert(format!("{prefix}.conv.b"), Tensor4::zeros([1, 1, 1, cout]))?;
    }
    Ok(())
}

fn update_running_stats(params: &mut ParamSet, prefix: &str, cache: &BnCache) {
    let rm = params.get_mut(&format!("{prefix}.bn.running_mean"));
    for (r, &b) in rm.data.iter_mut().zip(&cache.batch_mean) {
        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
    }
    let rv = params.get_mut(&format!("{prefix}.bn.running_var"));
    for (r, &b) in rv.data.iter_mut().zip(&cache.batch_var) {
        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
    }
}

fn unit_forward(
    params: &mut ParamSet,
    prefix: &str,
    x: &Tensor4,
    stride: usize,
    dilation: usize,
    relu_on: bool,
    use_bn: bool,
    mode: Mode,
) -> Result<(Tensor4, Option<UnitTrace>)> {
    let w = params.get(&format!("{prefix}.conv.w")).clone();
    let z = nn::conv2d(x, &w, stride, dilation)?;
    let (pre, bn_cache) = if use_bn {
        let scale = params.get(&format!("{prefix}.bn.scale")).clone();
        let shift = params.get(&format!("{prefix}.bn.shift")).clone();
        match mode {
            Mode::Train => {
                let (y, cache) = nn::batchnorm_train(&z, &scale, &shift, BN_EPSILON)?;
                update_running_stats(params, prefix, &cache);
                (y, Some(cache))
            }
            Mode::Infer => {
                let rm = params.get(&format!("{prefix}.bn.running_mean"));
                let rv = params.get(&format!("{prefix}.bn.running_var"));
                (nn::batchnorm_infer(&z, &scale, &shift, rm, rv, BN_EPSILON)?, None)
            }
        }
    } else {
        let b = params.get(&format!("{prefix}.conv.b"));
        (nn::bias_add(&z, b)?, None)
    };
    let y = if relu_on { nn::relu(&pre) } else { pre.clone() };
    let trace = match mode {
        Mode::Train => Some(UnitTrace {
            x: x.clone(),
            bn: bn_cache,
            pre,
            relu: relu_on,
        }),
        Mode::Infer => None,
    };
    Ok((y, trace))
}

fn unit_backward(
    params: &ParamSet,
    prefix: &str,
    tr: &UnitTrace,
    stride: usize,
    dilation: usize,
    gy: &Tensor4,
    grads: &mut GradMap,
) -> Tensor4 {
    let g_pre = if tr.relu {
        nn::relu_backward(&tr.pre, gy)
    } else {
        gy.clone()
    };
    let gz = match &tr.bn {
        Some(cache) => {
            let scale = params.get(&format!("{prefix}.bn.scale"));
            let (gz, g_scale, g_shift) = nn::batchnorm_backward(cache, scale, &g_pre);
            grads.accumulate(&format!("{prefix}.bn.scale"), g_scale);
            grads.accumulate(&format!("{prefix}.bn.shift"), g_shift);
            gz
        }
        None => {
            grads.accumulate(&format!("{prefix}.conv.b"), nn::bias_add_backward(&g_pre));
            g_pre
        }
    };
    let w = params.get(&format!("{prefix}.conv.w"));
    let (gx, gw) = nn::conv2d_backward(&tr.x, w, stride, dilation, &gz);
    grads.accumulate(&format!("{prefix}.conv.w"), gw);
    gx
}

// ---------------------------------------------------------------------------
// depthwise-separable unit: dw 3x3 s1 + pw 1x1 (+ bn | bias) (+ relu)

struct DwSepTrace {
    x: Tensor4,
    pw: UnitTrace,
}

fn insert_dwsep_params(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cin: usize,
    cout: usize,
    bn: bool,
) -> Result<()> {
    params.insert(format!("{prefix}.dw.w"), he_kernel(rng, 3, 3, cin, 1))?;
    insert_unit_params(params, rng, &format!("{prefix}.pw"), 1, 1, cin, cout, bn)?;
    Ok(())
}

fn dwsep_forward(
    params: &mut ParamSet,
    prefix: &str,
    x: &Tensor4,
    relu_on: bool,
    use_bn: bool,
    mode: Mode,
) -> Result<(Tensor4, Option<DwSepTrace>)> {
    let dw_w = params.get(&format!("{prefix}.dw.w")).clone();
    let dw_out = nn::depthwise_conv(x, &dw_w, 1)?;
    let pw_prefix = format!("{prefix}.pw");
    let (y, pw) = unit_forward(params, &pw_prefix, &dw_out, 1, 1, relu_on, use_bn, mode)?;
    let trace = pw.map(|pw| DwSepTrace { x: x.clone(), pw });
    Ok((y, trace))
}

fn dwsep_backward(
    params: &ParamSet,
    prefix: &str,
    tr: &DwSepTrace,
    gy: &Tensor4,
    grads: &mut GradMap,
) -> Tensor4 {
    let g_dw_out = unit_backward(params, &format!("{prefix}.pw"), &tr.pw, 1, 1, gy, grads);
    let dw_w = params.get(&format!("{prefix}.dw.w"));
    let (gx, g_dw_w) = nn::depthwise_conv_backward(&tr.x, dw_w, 1, &g_dw_out);
    grads.accumulate(&format!("{prefix}.dw.w"), g_dw_w);
    gx
}

// ---------------------------------------------------------------------------
// atrous spatial pyramid: 1x1, two atrous 3x3, image pooling, 1x1 fusion

struct AsppTrace {
    in_hw: (usize, usize),
    b0: UnitTrace,
    b1: UnitTrace,
    b2: UnitTrace,
    pool: UnitTrace,
    proj: UnitTrace,
}

fn insert_aspp_params(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    cin: usize,
    c: usize,
    bn: bool,
) -> Result<()> {
    insert_unit_params(params, rng, "aspp.b0", 1, 1, cin, c, bn)?;
    insert_unit_params(params, rng, "aspp.b1", 3, 3, cin, c, bn)?;
    insert_unit_params(params, rng, "aspp.b2", 3, 3, cin, c, bn)?;
    // the pooled branch sees a single spatial position per image, where
    // batch statistics are degenerate, so it always uses a plain bias
    insert_unit_params(params, rng, "aspp.pool", 1, 1, cin, c, false)?;
    insert_unit_params(params, rng, "aspp.proj", 1, 1, 4 * c, c, bn)?;
    Ok(())
}

fn aspp_forward(
    params: &mut ParamSet,
    cfg: &ModelConfig,
    x: &Tensor4,
    mode: Mode,
) -> Result<(Tensor4, Option<AsppTrace>)> {
    let bn = cfg.batchnorm;
    let (h, w) = (x.dims[1], x.dims[2]);
    let (y0, t0) = unit_forward(params, "aspp.b0", x, 1, 1, true, bn, mode)?;
    let (y1, t1) = unit_forward(params, "aspp.b1", x, 1, cfg.atrous_rates[0], true, bn, mode)?;
    let (y2, t2) = unit_forward(params, "aspp.b2", x, 1, cfg.atrous_rates[1], true, bn, mode)?;
    let pooled = nn::global_avg_pool(x);
    let (yp, tp) = unit_forward(params, "aspp.pool", &pooled, 1, 1, true, false, mode)?;
    let y3 = nn::broadcast_spatial(&yp, h, w);
    let cat = Tensor4::concat_channels(
        &Tensor4::concat_channels(&y0, &y1)?,
        &Tensor4::concat_channels(&y2, &y3)?,
    )?;
    let (out, tproj) = unit_forward(params, "aspp.proj", &cat, 1, 1, true, bn, mode)?;
    let trace = match mode {
        Mode::Train => Some(AsppTrace {
            in_hw: (h, w),
            b0: t0.unwrap(),
            b1: t1.unwrap(),
            b2: t2.unwrap(),
            pool: tp.unwrap(),
            proj: tproj.unwrap(),
        }),
        Mode::Infer => None,
    };
    Ok((out, trace))
}

fn aspp_backward(
    params: &ParamSet,
    cfg: &ModelConfig,
    tr: &AsppTrace,
    gy: &Tensor4,
    grads: &mut GradMap,
) -> Tensor4 {
    let g_cat = unit_backward(params, "aspp.proj", &tr.proj, 1, 1, gy, grads);
    let c = cfg.aspp_channels;
    let (g01, g23) = Tensor4::split_channels(&g_cat, 2 * c);
    let (g0, g1) = Tensor4::split_channels(&g01, c);
    let (g2, g3) = Tensor4::split_channels(&g23, c);
    let mut gx = unit_backward(params, "aspp.b0", &tr.b0, 1, 1, &g0, grads);
    gx.add_assign(&unit_backward(
        params,
        "aspp.b1",
        &tr.b1,
        1,
        cfg.atrous_rates[0],
        &g1,
        grads,
    ));
    gx.add_assign(&unit_backward(
        params,
        "aspp.b2",
        &tr.b2,
        1,
        cfg.atrous_rates[1],
        &g2,
        grads,
    ));
    let g_pooled_bc = nn::broadcast_spatial_backward(&g3);
    let g_pooled = unit_backward(params, "aspp.pool", &tr.pool, 1, 1, &g_pooled_bc, grads);
    gx.add_assign(&nn::global_avg_pool_backward(&g_pooled, tr.in_hw.0, tr.in_hw.1));
    gx
}

// ---------------------------------------------------------------------------
// whole-network traces

struct BranchTrace {
    angle: Angle,
    stages: Vec<UnitTrace>,
    skip: UnitTrace,
    aspp: Option<AsppTrace>,
}

/// Everything the backward pass needs from one training-mode forward pass.
pub struct Trace {
    branches: Vec<BranchTrace>,
    aligned_main: Vec<Tensor4>,
    aligned_skip: Vec<Tensor4>,
    suffix_stage2: Option<UnitTrace>,
    suffix_aspp: Option<AsppTrace>,
    /// Spatial size of the fused main feature before decoder upsampling.
    main_hw: (usize, usize),
    dropout_mask: Vec<f64>,
    dec0: DwSepTrace,
    dec1: DwSepTrace,
    head: DwSepTrace,
    head_hw: (usize, usize),
    seg: Tensor4,
    contour: Tensor4,
}

impl Model {
    /// Fresh network with He-initialized kernels; fully determined by the
    /// seed and the configuration.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bn = config.batchnorm;
        let mut p = ParamSet::new();
        insert_unit_params(&mut p, &mut rng, "enc0", 3, 3, config.in_channels, config.widths[0], bn)?;
        insert_unit_params(&mut p, &mut rng, "enc1", 3, 3, config.widths[0], config.widths[1], bn)?;
        insert_unit_params(&mut p, &mut rng, "enc2", 3, 3, config.widths[1], config.widths[2], bn)?;
        insert_unit_params(&mut p, &mut rng, "skip", 1, 1, config.widths[0], config.skip_channels, bn)?;
        insert_aspp_params(&mut p, &mut rng, config.widths[2], config.aspp_channels, bn)?;
        let cat_c = config.aspp_channels + config.skip_channels;
        insert_dwsep_params(&mut p, &mut rng, "dec0", cat_c, config.decoder_widths[0], bn)?;
        insert_dwsep_params(&mut p, &mut rng, "dec1", config.decoder_widths[0], config.decoder_widths[1], bn)?;
        p.insert("head.dw.w", he_kernel(&mut rng, 3, 3, config.decoder_widths[1], 1))?;
        p.insert(
            "head.pw.conv.w",
            he_kernel(&mut rng, 1, 1, config.decoder_widths[1], 4),
        )?;
        p.insert("head.pw.conv.b", Tensor4::zeros([1, 1, 1, 4]))?;
        Ok(Model { config, params: p })
    }

    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Model> {
        config.validate()?;
        Ok(Model { config, params })
    }

    // Per-angle prefix: stages up to the aggregation boundary plus the skip
    // feature. Returns (main, skip) and their traces.
    fn prefix_forward(
        &mut self,
        x: &Tensor4,
        angle: Angle,
        mode: Mode,
    ) -> Result<(Tensor4, Tensor4, Option<BranchTrace>)> {
        let bn = self.config.batchnorm;
        let mut stages = Vec::new();
        let (s0, t) = unit_forward(&mut self.params, "enc0", x, 2, 1, true, bn, mode)?;
        if let Some(t) = t {
            stages.push(t);
        }
        let (skip, skip_t) = unit_forward(&mut self.params, "skip", &s0, 1, 1, true, bn, mode)?;
        let (s1, t) = unit_forward(&mut self.params, "enc1", &s0, 2, 1, true, bn, mode)?;
        if let Some(t) = t {
            stages.push(t);
        }
        let (main, aspp_t) = match self.config.mafa.placement {
            Placement::BackboneMid => (s1, None),
            Placement::BackboneLast | Placement::EncoderOutput => {
                let (s2, t) = unit_forward(&mut self.params, "enc2", &s1, 2, 1, true, bn, mode)?;
                if let Some(t) = t {
                    stages.push(t);
                }
                if self.config.mafa.placement == Placement::EncoderOutput {
                    let (a, at) = aspp_forward(&mut self.params, &self.config.clone(), &s2, mode)?;
                    (a, at)
                } else {
                    (s2, None)
                }
            }
        };
        let trace = match mode {
            Mode::Train => Some(BranchTrace {
                angle,
                stages,
                skip: skip_t.unwrap(),
                aspp: aspp_t,
            }),
            Mode::Infer => None,
        };
        Ok((main, skip, trace))
    }

    /// Forward pass. Training mode returns the trace for [`Model::backward`]
    /// and updates batchnorm running statistics; `rng` drives dropout and is
    /// only consulted in training mode.
    pub fn forward(
        &mut self,
        x: &Tensor4,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(ModelOutput, Option<Trace>)> {
        if x.dims[1] != self.config.input_size
            || x.dims[2] != self.config.input_size
            || x.dims[3] != self.config.in_channels
        {
            return Err(Error::ShapeMismatch(format!(
                "model input {:?}, expected [n, {s}, {s}, {c}]",
                x.dims,
                s = self.config.input_size,
                c = self.config.in_channels
            )));
        }
        let cfg = self.config.clone();
        let angles = cfg.mafa.angles()?;
        let rot_mode = cfg.mafa.rotation_mode;

        // per-angle branches
        let mut branches = Vec::new();
        let mut aligned_main = Vec::new();
        let mut aligned_skip = Vec::new();
        for &phi in &angles {
            let xr = geometry::rotate_t4(x, phi, rot_mode)?;
            let (main, skip, tr) = self.prefix_forward(&xr, phi, mode)?;
            aligned_main.push(geometry::rotate_t4(&main, phi.negated(), rot_mode)?);
            aligned_skip.push(geometry::rotate_t4(&skip, phi.negated(), rot_mode)?);
            if let Some(tr) = tr {
                branches.push(tr);
            }
        }
        let main = mafa::aggregate_t4(&aligned_main, cfg.mafa.aggregation)?;
        let skip = mafa::aggregate_t4(&aligned_skip, cfg.mafa.aggregation)?;

        // shared suffix up to the decoder input
        let bn = cfg.batchnorm;
        let (main, suffix_stage2, suffix_aspp) = match cfg.mafa.placement {
            Placement::EncoderOutput => (main, None, None),
            Placement::BackboneLast => {
                let (a, at) = aspp_forward(&mut self.params, &cfg, &main, mode)?;
                (a, None, at)
            }
            Placement::BackboneMid => {
                let (s2, t2) = unit_forward(&mut self.params, "enc2", &main, 2, 1, true, bn, mode)?;
                let (a, at) = aspp_forward(&mut self.params, &cfg, &s2, mode)?;
                (a, t2, at)
            }
        };

        // decoder
        let main_hw = (main.dims[1], main.dims[2]);
        let (sh, sw) = (skip.dims[1], skip.dims[2]);
        let up = nn::resize_to(&main, sh, sw)?;
        let concat_in = Tensor4::concat_channels(&up, &skip)?;
        let (dropped, mask) = nn::dropout(&concat_in, cfg.dropout_keep, rng, mode);
        let (d0, t_d0) = dwsep_forward(&mut self.params, "dec0", &dropped, true, bn, mode)?;
        let (d1, t_d1) = dwsep_forward(&mut self.params, "dec1", &d0, true, bn, mode)?;
        let (logits, t_head) = dwsep_forward(&mut self.params, "head", &d1, false, false, mode)?;
        let head_hw = (logits.dims[1], logits.dims[2]);
        let full = nn::resize_to(&logits, cfg.input_size, cfg.input_size)?;
        let (seg_logits, con_logits) = Tensor4::split_channels(&full, 2);
        let seg = nn::softmax_pair(&seg_logits)?;
        let contour = nn::softmax_pair(&con_logits)?;
        let output = ModelOutput {
            seg: seg.clone(),
            contour: contour.clone(),
        };
        let trace = match mode {
            Mode::Train => Some(Trace {
                branches,
                aligned_main,
                aligned_skip,
                suffix_stage2,
                suffix_aspp,
                main_hw,
                dropout_mask: mask,
                dec0: t_d0.unwrap(),
                dec1: t_d1.unwrap(),
                head: t_head.unwrap(),
                head_hw,
                seg,
                contour,
            }),
            Mode::Infer => None,
        };
        Ok((output, trace))
    }

    /// Inference-only forward.
    pub fn infer(&mut self, x: &Tensor4) -> Result<ModelOutput> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, _) = self.forward(x, Mode::Infer, &mut rng)?;
        Ok(out)
    }

    /// Reverse pass from gradients on the two probability maps to parameter
    /// gradients. Input gradients are discarded.
    pub fn backward(&self, trace: &Trace, g_seg: &Tensor4, g_contour: &Tensor4) -> Result<GradMap> {
        let cfg = &self.config;
        let mut grads = GradMap::new();

        // head and decoder
        let gz_seg = nn::softmax_pair_backward(&trace.seg, g_seg);
        let gz_con = nn::softmax_pair_backward(&trace.contour, g_contour);
        let g_full = Tensor4::concat_channels(&gz_seg, &gz_con)?;
        let g_logits = nn::resize_to_adjoint(&g_full, trace.head_hw.0, trace.head_hw.1);
        let g_d1 = dwsep_backward(&self.params, "head", &trace.head, &g_logits, &mut grads);
        let g_d0 = dwsep_backward(&self.params, "dec1", &trace.dec1, &g_d1, &mut grads);
        let g_dropped = dwsep_backward(&self.params, "dec0", &trace.dec0, &g_d0, &mut grads);
        let g_concat = nn::dropout_backward(&g_dropped, &trace.dropout_mask);
        let (g_up, g_skip_agg) = Tensor4::split_channels(&g_concat, cfg.aspp_channels);
        let mut g_main_agg = nn::resize_to_adjoint(&g_up, trace.main_hw.0, trace.main_hw.1);

        // shared suffix
        if let Some(aspp_tr) = &trace.suffix_aspp {
            g_main_agg = aspp_backward(&self.params, cfg, aspp_tr, &g_main_agg, &mut grads);
        }
        if let Some(t2) = &trace.suffix_stage2 {
            g_main_agg = unit_backward(&self.params, "enc2", t2, 2, 1, &g_main_agg, &mut grads);
        }

        // aggregation and per-angle branches
        let agg = cfg.mafa.aggregation;
        let g_aligned_main = mafa::aggregate_t4_backward(&trace.aligned_main, agg, &g_main_agg);
        let g_aligned_skip = mafa::aggregate_t4_backward(&trace.aligned_skip, agg, &g_skip_agg);
        let rot_mode = cfg.mafa.rotation_mode;
        for (k, branch) in trace.branches.iter().enumerate() {
            let phi = branch.angle;
            let g_main =
                geometry::rotate_t4_adjoint(&g_aligned_main[k], phi.negated(), rot_mode)?;
            let g_skip =
                geometry::rotate_t4_adjoint(&g_aligned_skip[k], phi.negated(), rot_mode)?;
            self.branch_backward(branch, &g_main, &g_skip, &mut grads);
        }
        Ok(grads)
    }

    fn branch_backward(
        &self,
        branch: &BranchTrace,
        g_main: &Tensor4,
        g_skip: &Tensor4,
        grads: &mut GradMap,
    ) {
        let cfg = &self.config;
        let mut g = g_main.clone();
        if let Some(aspp_tr) = &branch.aspp {
            g = aspp_backward(&self.params, cfg, aspp_tr, &g, grads);
        }
        // stages in reverse; the skip gradient joins at the stage-0 output
        let names = ["enc0", "enc1", "enc2"];
        for (i, tr) in branch.stages.iter().enumerate().rev() {
            if i == 1 {
                // entering stage 1's input = stage 0's output, where the
                // skip branch taps off
                g = unit_backward(&self.params, names[i], tr, 2, 1, &g, grads);
                let g_s0 =
                    unit_backward(&self.params, "skip", &branch.skip, 1, 1, g_skip, grads);
                g.add_assign(&g_s0);
            } else {
                g = unit_backward(&self.params, names[i], tr, 2, 1, &g, grads);
            }
        }
    }

    /// Foreground masks from the segmentation probabilities: a pixel is
    /// foreground when its foreground probability strictly exceeds 0.5, so
    /// the tie goes to background.
    pub fn predict_masks(output: &ModelOutput) -> Vec<BinaryMask> {
        let [n, h, w, _] = output.seg.dims;
        let mut masks = Vec::with_capacity(n);
        for b in 0..n {
            let mut m = BinaryMask::zeros(h, w);
            for i in 0..h {
                for j in 0..w {
                    m.set(i, j, output.seg.at(b, i, j, 1) > 0.5);
                }
            }
            masks.push(m);
        }
        masks
    }

    pub fn save(&self, path: &std::path::Path, state: &AdamState) -> Result<()> {
        crate::checkpoint::save(path, &self.params, state)
    }

    pub fn load(config: ModelConfig, path: &std::path::Path) -> Result<(Model, AdamState)> {
        let (params, state) = crate::checkpoint::load(path)?;
        Ok((Model::from_params(config, params)?, state))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RotationMode;
    use crate::mafa::Aggregation;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_size: 16,
            widths: [4, 8, 8],
            skip_channels: 4,
            aspp_channels: 8,
            decoder_widths: [8, 8],
            ..Default::default()
        }
    }

    fn random_input(n: usize, size: usize, c: usize, seed: u64) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Tensor4::zeros([n, size, size, c]);
        for v in &mut x.data {
            *v = rng.gen::<f64>();
        }
        x
    }

    #[test]
    fn default_parameter_budget() {
        let m = Model::new(ModelConfig::default(), 1).unwrap();
        assert_eq!(m.params.value_count(), 73_308);
        let trainable: usize = m
            .params
            .trainable_names()
            .iter()
            .map(|n| m.params.get(n).len())
            .sum();
        assert_eq!(trainable, 72_684);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut m = Model::new(tiny_config(), 7).unwrap();
        let x = random_input(2, 16, 3, 3);
        let out = m.infer(&x).unwrap();
        assert_eq!(out.seg.dims, [2, 16, 16, 2]);
        assert_eq!(out.contour.dims, [2, 16, 16, 2]);
        for t in [&out.seg, &out.contour] {
            for px in t.data.chunks(2) {
                assert!((px[0] + px[1] - 1.0).abs() < 1e-12);
                assert!(px[0] >= 0.0 && px[1] >= 0.0);
            }
        }
    }

    #[test]
    fn seed_determinism() {
        let a = Model::new(tiny_config(), 42).unwrap();
        let b = Model::new(tiny_config(), 42).unwrap();
        let c = Model::new(tiny_config(), 43).unwrap();
        for (name, t) in a.params.iter() {
            assert_eq!(t.data, b.params.get(name).data, "{name}");
        }
        assert_ne!(
            a.params.get("enc0.conv.w").data,
            c.params.get("enc0.conv.w").data
        );
    }

    #[test]
    fn single_angle_matches_disabled() {
        let mut cfg_one = tiny_config();
        cfg_one.mafa.n_angles = 1;
        let mut cfg_off = tiny_config();
        cfg_off.mafa = MafaConfig::disabled();
        let mut m1 = Model::new(cfg_one, 5).unwrap();
        let mut m0 = Model::new(cfg_off, 5).unwrap();
        let x = random_input(1, 16, 3, 11);
        let y1 = m1.infer(&x).unwrap();
        let y0 = m0.infer(&x).unwrap();
        assert_eq!(y1.seg.data, y0.seg.data);
        assert_eq!(y1.contour.data, y0.contour.data);
    }

    #[test]
    fn placements_run_and_differ_from_single_angle() {
        let x = random_input(1, 16, 3, 13);
        for placement in [
            Placement::EncoderOutput,
            Placement::BackboneMid,
            Placement::BackboneLast,
        ] {
            let mut cfg = tiny_config();
            cfg.mafa.placement = placement;
            cfg.mafa.n_angles = 4;
            let mut m = Model::new(cfg, 5).unwrap();
            let y4 = m.infer(&x).unwrap();
            assert!(y4.seg.all_finite());

            let mut cfg1 = tiny_config();
            cfg1.mafa.placement = placement;
            cfg1.mafa.n_angles = 1;
            let mut m1 = Model::new(cfg1, 5).unwrap();
            let y1 = m1.infer(&x).unwrap();
            assert_ne!(y4.seg.data, y1.seg.data);
        }
    }

    #[test]
    fn train_forward_backward_produces_full_gradients() {
        for placement in [
            Placement::EncoderOutput,
            Placement::BackboneMid,
            Placement::BackboneLast,
        ] {
            let mut cfg = tiny_config();
            cfg.mafa.placement = placement;
            let mut m = Model::new(cfg, 2).unwrap();
            let x = random_input(2, 16, 3, 17);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let (out, trace) = m.forward(&x, Mode::Train, &mut rng).unwrap();
            let trace = trace.unwrap();
            let g_seg = out.seg.map(|_| 0.5);
            let g_con = out.contour.map(|_| -0.25);
            let grads = m.backward(&trace, &g_seg, &g_con).unwrap();
            for name in m.params.trainable_names() {
                let g = grads
                    .get(&name)
                    .unwrap_or_else(|| panic!("missing gradient for {name}"));
                assert!(g.all_finite(), "{name}");
                assert_eq!(g.dims, m.params.get(&name).dims, "{name}");
            }
        }
    }

    #[test]
    fn max_out_aggregation_runs() {
        let mut cfg = tiny_config();
        cfg.mafa.aggregation = Aggregation::MaxOut;
        let mut m = Model::new(cfg, 3).unwrap();
        let x = random_input(1, 16, 3, 19);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (out, trace) = m.forward(&x, Mode::Train, &mut rng).unwrap();
        let grads = m
            .backward(&trace.unwrap(), &out.seg.map(|_| 1.0), &out.contour.map(|_| 0.0))
            .unwrap();
        assert!(grads.get("enc0.conv.w").unwrap().all_finite());
    }

    #[test]
    fn bilinear_angles_run() {
        let mut cfg = tiny_config();
        cfg.mafa.n_angles = 3;
        cfg.mafa.rotation_mode = RotationMode::Bilinear;
        let mut m = Model::new(cfg, 3).unwrap();
        let x = random_input(1, 16, 3, 23);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (out, trace) = m.forward(&x, Mode::Train, &mut rng).unwrap();
        assert!(out.seg.all_finite());
        let grads = m
            .backward(&trace.unwrap(), &out.seg.map(|_| 1.0), &out.contour.map(|_| 1.0))
            .unwrap();
        assert!(grads.get("enc1.conv.w").unwrap().all_finite());
    }

    #[test]
    fn predict_masks_threshold() {
        let mut out = ModelOutput {
            seg: Tensor4::zeros([1, 2, 2, 2]),
            contour: Tensor4::zeros([1, 2, 2, 2]),
        };
        // (0,0): fg 0.6 → on; (0,1): exactly 0.5 → off; rest 0.0 → off
        out.seg.data[1] = 0.6;
        out.seg.data[3] = 0.5;
        let masks = Model::predict_masks(&out);
        assert!(masks[0].get(0, 0));
        assert!(!masks[0].get(0, 1));
        assert_eq!(masks[0].count_ones(), 1);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut m = Model::new(tiny_config(), 8).unwrap();
        let state = AdamState::new(&m.params);
        m.save(&path, &state).unwrap();
        let (mut m2, _) = Model::load(tiny_config(), &path).unwrap();
        // weights are stored in 32-bit floats, so outputs agree to single
        // precision rather than bit-exactly
        let x = random_input(1, 16, 3, 29);
        let a = m.infer(&x).unwrap().seg;
        let b = m2.infer(&x).unwrap().seg;
        let worst = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(worst < 1e-4, "checkpoint roundtrip drift {worst}");
    }

    #[test]
    fn validation_rejects_bad_sizes() {
        let mut cfg = tiny_config();
        cfg.input_size = 20;
        assert!(Model::new(cfg, 0).is_err());
        let mut cfg = tiny_config();
        cfg.dropout_keep = 0.0;
        assert!(Model::new(cfg, 0).is_err());
    }
}
