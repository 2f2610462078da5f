//! The multi-angle feature aggregation block: rotate the input by N_A equally
//! spaced angles, encode each rotation with a shared encoder, align the
//! feature maps back, and fuse them elementwise (mean or max-out).
//!
//! With exact-quarter rotation and N_A = 4 the aggregated feature map is
//! equivariant to quarter-turn rotations of the input: rotation is a pure
//! index permutation, so averaging over the full quarter-turn orbit commutes
//! with rotating the input.

use crate::error::{Error, Result};
use crate::geometry::{self, Angle, RasterMap, RotationMode};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Aggregation {
    Mean,
    MaxOut,
}

/// Where in the network the rotate/encode/align/aggregate block sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Placement {
    /// Aggregate the full encoder output (through ASPP and skip concat).
    EncoderOutput,
    /// Aggregate after the middle backbone stage (ablation variant).
    BackboneMid,
    /// Aggregate after the last backbone stage (ablation variant).
    BackboneLast,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MafaConfig {
    pub n_angles: usize,
    pub aggregation: Aggregation,
    pub rotation_mode: RotationMode,
    pub placement: Placement,
}

impl Default for MafaConfig {
    fn default() -> Self {
        MafaConfig {
            n_angles: 4,
            aggregation: Aggregation::Mean,
            rotation_mode: RotationMode::ExactQuarter,
            placement: Placement::EncoderOutput,
        }
    }
}

impl MafaConfig {
    /// n_angles = 1 degenerates to plain encoding.
    pub fn disabled() -> Self {
        MafaConfig {
            n_angles: 1,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_angles < 1 {
            return Err(Error::InvalidArgument("mafa: n_angles must be >= 1".into()));
        }
        if self.rotation_mode == RotationMode::ExactQuarter
            && ![1, 2, 4].contains(&self.n_angles)
        {
            return Err(Error::InvalidArgument(format!(
                "mafa: exact-quarter mode requires N_A in {{1,2,4}}, got {}",
                self.n_angles
            )));
        }
        Ok(())
    }

    pub fn angles(&self) -> Result<Vec<Angle>> {
        self.validate()?;
        geometry::angle_set(self.n_angles)
    }
}

/// Aligned multi-angle feature maps: for each angle φ_k, the encoder output
/// of the rotated input, rotated back by -φ_k. The k = 1 (φ = 0) entry equals
/// the plain encoder output bit-identically.
pub fn mafa_features<F>(image: &RasterMap, encode: F, cfg: &MafaConfig) -> Result<Vec<RasterMap>>
where
    F: Fn(&RasterMap) -> Result<RasterMap>,
{
    let angles = cfg.angles()?;
    let mut maps = Vec::with_capacity(angles.len());
    for &phi in &angles {
        let rotated = geometry::rotate(image, phi, cfg.rotation_mode)?;
        let encoded = encode(&rotated)?;
        if cfg.rotation_mode == RotationMode::ExactQuarter
            && phi.degrees() != 0.0
            && encoded.height != encoded.width
        {
            return Err(Error::ShapeMismatch(
                "mafa: exact-quarter feature alignment requires square feature maps".into(),
            ));
        }
        let aligned = geometry::align(&encoded, phi, cfg.rotation_mode)?;
        if let Some(first) = maps.first() {
            let f: &RasterMap = first;
            if (f.height, f.width, f.channels) != (aligned.height, aligned.width, aligned.channels)
            {
                return Err(Error::ShapeMismatch(
                    "mafa: per-angle feature maps differ in shape".into(),
                ));
            }
        }
        maps.push(aligned);
    }
    Ok(maps)
}

/// Elementwise fusion of same-shaped maps. Mean mode sums in ascending-k
/// order; max-out takes the elementwise maximum.
pub fn aggregate(maps: &[RasterMap], mode: Aggregation) -> Result<RasterMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("aggregate: empty map list".into()))?;
    for m in maps {
        if (m.height, m.width, m.channels) != (first.height, first.width, first.channels) {
            return Err(Error::ShapeMismatch("aggregate: shape mismatch".into()));
        }
    }
    let mut out = first.clone();
    match mode {
        Aggregation::Mean => {
            for m in &maps[1..] {
                for (o, v) in out.values.iter_mut().zip(&m.values) {
                    *o += v;
                }
            }
            let inv = 1.0 / maps.len() as f64;
            for o in &mut out.values {
                *o *= inv;
            }
        }
        Aggregation::MaxOut => {
            for m in &maps[1..] {
                for (o, &v) in out.values.iter_mut().zip(&m.values) {
                    if v > *o {
                        *o = v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Batched tensor variant of [`aggregate`] used inside the model.
pub fn aggregate_t4(maps: &[Tensor4], mode: Aggregation) -> Result<Tensor4> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("aggregate: empty map list".into()))?;
    for m in maps {
        if !m.same_shape(first) {
            return Err(Error::ShapeMismatch("aggregate: shape mismatch".into()));
        }
    }
    let mut out = first.clone();
    match mode {
        Aggregation::Mean => {
            for m in &maps[1..] {
                out.add_assign(m);
            }
            out.scale(1.0 / maps.len() as f64);
        }
        Aggregation::MaxOut => {
            for m in &maps[1..] {
                for (o, &v) in out.data.iter_mut().zip(&m.data) {
                    if v > *o {
                        *o = v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Distribute the gradient of the aggregated map back onto the per-angle
/// maps. Mean splits evenly; max-out routes each element to the first map
/// attaining the maximum (ties resolve to the lowest k).
pub fn aggregate_t4_backward(maps: &[Tensor4], mode: Aggregation, gy: &Tensor4) -> Vec<Tensor4> {
    match mode {
        Aggregation::Mean => {
            let mut g = gy.clone();
            g.scale(1.0 / maps.len() as f64);
            vec![g; maps.len()]
        }
        Aggregation::MaxOut => {
            let mut grads: Vec<Tensor4> = maps.iter().map(|m| Tensor4::zeros(m.dims)).collect();
            for i in 0..gy.len() {
                let mut best_k = 0;
                let mut best = maps[0].data[i];
                for (k, m) in maps.iter().enumerate().skip(1) {
                    if m.data[i] > best {
                        best = m.data[i];
                        best_k = k;
                    }
                }
                grads[best_k].data[i] = gy.data[i];
            }
            grads
        }
    }
}

/// Per-scale aggregation for hierarchical (multi-map) encoders: fuses
/// `maps[k][s]` over k independently for each scale s.
pub fn aggregate_multiscale(
    per_angle: &[Vec<RasterMap>],
    mode: Aggregation,
) -> Result<Vec<RasterMap>> {
    let first = per_angle
        .first()
        .ok_or_else(|| Error::InvalidArgument("aggregate: empty map list".into()))?;
    let scales = first.len();
    for maps in per_angle {
        if maps.len() != scales {
            return Err(Error::ShapeMismatch(
                "aggregate_multiscale: inconsistent scale counts".into(),
            ));
        }
    }
    (0..scales)
        .map(|s| {
            let slice: Vec<RasterMap> = per_angle.iter().map(|m| m[s].clone()).collect();
            aggregate(&slice, mode)
        })
        .collect()
}

/// Multi-angle ensemble (ablation baseline): average the aligned output
/// probability maps of a full model over the angle set, before thresholding.
pub fn ensemble_predict<F>(
    image: &RasterMap,
    predict: F,
    angles: &[Angle],
    rotation_mode: RotationMode,
) -> Result<RasterMap>
where
    F: Fn(&RasterMap) -> Result<RasterMap>,
{
    if angles.is_empty() {
        return Err(Error::InvalidArgument("ensemble: empty angle set".into()));
    }
    let mut maps = Vec::with_capacity(angles.len());
    for &phi in angles {
        let rotated = geometry::rotate(image, phi, rotation_mode)?;
        let prob = predict(&rotated)?;
        maps.push(geometry::align(&prob, phi, rotation_mode)?);
    }
    aggregate(&maps, Aggregation::Mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> RasterMap {
        RasterMap::from_vec(h, w, c, (0..h * w * c).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    fn quarter_cfg(n: usize) -> MafaConfig {
        MafaConfig {
            n_angles: n,
            ..Default::default()
        }
    }

    #[test]
    fn n1_degenerates_to_plain_encoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_map(&mut rng, 8, 8, 2);
        let encode = |m: &RasterMap| Ok(m.map_scaled());
        let maps = mafa_features(&img, encode, &quarter_cfg(1)).unwrap();
        assert_eq!(maps.len(), 1);
        assert_eq!(maps[0], img.map_scaled());
    }

    #[test]
    fn identity_encoder_gives_identical_aligned_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_map(&mut rng, 8, 8, 3);
        let maps = mafa_features(&img, |m| Ok(m.clone()), &quarter_cfg(4)).unwrap();
        for m in &maps {
            assert_eq!(m, &img);
        }
    }

    #[test]
    fn conv_encoder_matches_hand_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_map(&mut rng, 8, 8, 1);
        let kernel =
            Tensor4::from_vec([3, 3, 1, 1], (0..9).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let encode = |m: &RasterMap| {
            let y = nn::conv2d(&m.to_tensor4(), &kernel, 1, 1)?;
            RasterMap::from_tensor4(&y)
        };
        let maps = mafa_features(&img, encode, &quarter_cfg(4)).unwrap();
        let angles = geometry::angle_set(4).unwrap();
        let mut differ = false;
        for (k, &phi) in angles.iter().enumerate() {
            let by_hand = geometry::align(
                &encode(&geometry::rotate(&img, phi, RotationMode::ExactQuarter).unwrap()).unwrap(),
                phi,
                RotationMode::ExactQuarter,
            )
            .unwrap();
            assert_eq!(maps[k], by_hand);
            if maps[k] != maps[0] {
                differ = true;
            }
        }
        // a plain conv is not rotation-equivariant, so the maps differ
        assert!(differ);
    }

    #[test]
    fn aggregate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_map(&mut rng, 4, 4, 2);
        assert_eq!(aggregate(&[x.clone()], Aggregation::Mean).unwrap(), x);
        assert_eq!(aggregate(&[x.clone()], Aggregation::MaxOut).unwrap(), x);

        let a = RasterMap::from_vec(1, 1, 1, vec![1.0]).unwrap();
        let b = RasterMap::from_vec(1, 1, 1, vec![3.0]).unwrap();
        assert_eq!(
            aggregate(&[a.clone(), b.clone()], Aggregation::Mean).unwrap().values,
            vec![2.0]
        );
        assert_eq!(
            aggregate(&[a, b], Aggregation::MaxOut).unwrap().values,
            vec![3.0]
        );

        let four = vec![x.clone(), x.clone(), x.clone(), x.clone()];
        let mean = aggregate(&four, Aggregation::Mean).unwrap();
        for (m, v) in mean.values.iter().zip(&x.values) {
            assert!((m - v).abs() < 1e-7);
        }

        assert!(aggregate(&[], Aggregation::Mean).is_err());
        let other = random_map(&mut rng, 3, 4, 2);
        assert!(aggregate(&[x, other], Aggregation::Mean).is_err());
    }

    #[test]
    fn maxout_dominates_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let maps: Vec<RasterMap> = (0..4).map(|_| random_map(&mut rng, 5, 5, 3)).collect();
        let mean = aggregate(&maps, Aggregation::Mean).unwrap();
        let max = aggregate(&maps, Aggregation::MaxOut).unwrap();
        for (mx, mn) in max.values.iter().zip(&mean.values) {
            assert!(mx >= mn);
        }
    }

    #[test]
    fn channel_permutation_commutes_with_aggregation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let maps: Vec<RasterMap> = (0..3).map(|_| random_map(&mut rng, 4, 4, 3)).collect();
        let perm = [2usize, 0, 1];
        let permute = |m: &RasterMap| {
            let mut out = m.clone();
            for p in 0..16 {
                for (k, &src) in perm.iter().enumerate() {
                    out.values[p * 3 + k] = m.values[p * 3 + src];
                }
            }
            out
        };
        let before: Vec<RasterMap> = maps.iter().map(permute).collect();
        let a = aggregate(&before, Aggregation::Mean).unwrap();
        let b = permute(&aggregate(&maps, Aggregation::Mean).unwrap());
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    /// The headline property: quarter-turn equivariance of the aggregated map.
    #[test]
    fn group_equivariance_exact_quarter() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let kernel =
            Tensor4::from_vec([3, 3, 2, 2], (0..36).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let encode = |m: &RasterMap| {
            let y = nn::conv2d(&m.to_tensor4(), &kernel, 1, 1)?;
            RasterMap::from_tensor4(&nn::relu(&y))
        };
        let img = random_map(&mut rng, 8, 8, 2);
        for mode in [Aggregation::Mean, Aggregation::MaxOut] {
            let cfg = MafaConfig {
                n_angles: 4,
                aggregation: mode,
                ..Default::default()
            };
            let base = aggregate(&mafa_features(&img, encode, &cfg).unwrap(), mode).unwrap();
            for theta_deg in [90.0, 180.0, 270.0] {
                let theta = Angle::deg(theta_deg);
                let rotated_input = geometry::rotate(&img, theta, RotationMode::ExactQuarter).unwrap();
                let lhs =
                    aggregate(&mafa_features(&rotated_input, encode, &cfg).unwrap(), mode).unwrap();
                let rhs = geometry::rotate(&base, theta, RotationMode::ExactQuarter).unwrap();
                let scale = rhs.values.iter().fold(0f64, |a, v| a.max(v.abs()));
                for (l, r) in lhs.values.iter().zip(&rhs.values) {
                    match mode {
                        Aggregation::MaxOut => assert_eq!(l, r),
                        Aggregation::Mean => assert!((l - r).abs() <= 1e-5 * scale.max(1e-12)),
                    }
                }
            }
        }
    }

    #[test]
    fn ensemble_constant_model_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = random_map(&mut rng, 8, 8, 3);
        let constant = RasterMap::from_vec(8, 8, 2, vec![0.25; 128]).unwrap();
        let angles = geometry::angle_set(4).unwrap();
        let out = ensemble_predict(&img, |_| Ok(constant.clone()), &angles, RotationMode::ExactQuarter)
            .unwrap();
        assert_eq!(out, constant);

        let single = ensemble_predict(
            &img,
            |m| Ok(m.clone()),
            &geometry::angle_set(1).unwrap(),
            RotationMode::ExactQuarter,
        )
        .unwrap();
        assert_eq!(single, img);
    }

    #[test]
    fn config_validation() {
        assert!(quarter_cfg(3).validate().is_err());
        assert!(quarter_cfg(4).validate().is_ok());
        let bilinear = MafaConfig {
            n_angles: 5,
            rotation_mode: RotationMode::Bilinear,
            ..Default::default()
        };
        assert!(bilinear.validate().is_ok());
    }

    impl RasterMap {
        fn map_scaled(&self) -> RasterMap {
            let mut out = self.clone();
            for v in &mut out.values {
                *v *= 2.0;
            }
            out
        }
    }
}
