//! Data handling: a deterministic synthetic instrument generator, PNG
//! dataset loading and saving, photometric/geometric augmentation, and
//! subset-respecting cross-validation splits.

use crate::error::{Error, Result};
use crate::geometry::{self, Angle, BinaryMask, RasterMap, RotationMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One image with its ground-truth mask. `subset` names the acquisition
/// group (e.g. a procedure) so cross-validation can keep groups together.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub subset: String,
    /// RGB in [0, 1].
    pub image: RasterMap,
    pub mask: BinaryMask,
}

// ---------------------------------------------------------------------------
// synthetic scenes

/// The analytic description of one synthetic scene; the mask is exactly the
/// set of pixel centers inside the capsule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub size: usize,
    /// Capsule endpoints (row, col) and radius; `None` for an empty scene.
    pub capsule: Option<([f64; 2], [f64; 2], f64)>,
}

impl SceneSpec {
    /// Distance from a point to the capsule's axis segment.
    fn segment_distance(p0: [f64; 2], p1: [f64; 2], r: f64, c: f64) -> f64 {
        let (dr, dc) = (p1[0] - p0[0], p1[1] - p0[1]);
        let len_sq = dr * dr + dc * dc;
        let t = if len_sq == 0.0 {
            0.0
        } else {
            (((r - p0[0]) * dr + (c - p0[1]) * dc) / len_sq).clamp(0.0, 1.0)
        };
        let (qr, qc) = (p0[0] + t * dr, p0[1] + t * dc);
        ((r - qr).powi(2) + (c - qc).powi(2)).sqrt()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        match self.capsule {
            None => false,
            Some((p0, p1, radius)) => {
                Self::segment_distance(p0, p1, row as f64, col as f64) <= radius
            }
        }
    }

    pub fn rasterize(&self) -> BinaryMask {
        let mut m = BinaryMask::zeros(self.size, self.size);
        for r in 0..self.size {
            for c in 0..self.size {
                m.set(r, c, self.contains(r, c));
            }
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    /// Fraction of scenes left without an instrument.
    pub empty_rate: f64,
    /// Reduce the brightness gap between instrument and background.
    pub low_contrast: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 100,
            size: 96,
            seed: 0,
            empty_rate: 0.1,
            low_contrast: false,
        }
    }
}

fn smooth_noise_background(rng: &mut ChaCha8Rng, size: usize, low_contrast: bool) -> RasterMap {
    // coarse random grid, bilinearly upsampled, under a radial vignette
    let g = 6usize;
    let base: Vec<f64> = (0..g * g * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
    // tissue-like reddish palette
    let (lo, hi) = if low_contrast { (0.35, 0.75) } else { (0.25, 0.65) };
    let mut img = RasterMap::zeros(size, size, 3);
    let scale = (g - 1) as f64 / (size - 1) as f64;
    let center = (size as f64 - 1.0) / 2.0;
    let max_d = center * std::f64::consts::SQRT_2;
    let vignette_depth = if low_contrast { 0.25 } else { 0.45 };
    for r in 0..size {
        for c in 0..size {
            let (gr, gc) = (r as f64 * scale, c as f64 * scale);
            let (r0, c0) = (gr.floor() as usize, gc.floor() as usize);
            let (r1, c1) = ((r0 + 1).min(g - 1), (c0 + 1).min(g - 1));
            let (fr, fc) = (gr - r0 as f64, gc - c0 as f64);
            let d = (((r as f64 - center).powi(2) + (c as f64 - center).powi(2)).sqrt()) / max_d;
            let vig = 1.0 - vignette_depth * d * d;
            for k in 0..3 {
                let v00 = base[(r0 * g + c0) * 3 + k];
                let v01 = base[(r0 * g + c1) * 3 + k];
                let v10 = base[(r1 * g + c0) * 3 + k];
                let v11 = base[(r1 * g + c1) * 3 + k];
                let v = v00 * (1.0 - fr) * (1.0 - fc)
                    + v01 * (1.0 - fr) * fc
                    + v10 * fr * (1.0 - fc)
                    + v11 * fr * fc;
                let tint = match k {
                    0 => 1.0,
                    1 => 0.55,
                    _ => 0.5,
                };
                let off = img.idx(r, c, k);
                img.values[off] = ((lo + (hi - lo) * v) * tint * vig).clamp(0.0, 1.0);
            }
        }
    }
    img
}

fn random_capsule(rng: &mut ChaCha8Rng, size: usize) -> ([f64; 2], [f64; 2], f64) {
    let s = size as f64;
    // enter from a random border point, aim near the center
    let side = rng.gen_range(0..4u8);
    let along = rng.gen_range(0.0..s);
    let p0 = match side {
        0 => [0.0, along],
        1 => [s - 1.0, along],
        2 => [along, 0.0],
        _ => [along, s - 1.0],
    };
    let tip = [
        s * rng.gen_range(0.3..0.7),
        s * rng.gen_range(0.3..0.7),
    ];
    let radius = s * rng.gen_range(0.04..0.10);
    (p0, tip, radius)
}

/// One deterministic scene. Sample `index` uses its own random stream, so a
/// scene does not depend on how many others were generated before it.
pub fn synth_scene(cfg: &SynthConfig, index: usize) -> (Sample, SceneSpec) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let mut image = smooth_noise_background(&mut rng, cfg.size, cfg.low_contrast);
    let empty = rng.gen_bool(cfg.empty_rate);
    let mut spec = SceneSpec {
        size: cfg.size,
        capsule: None,
    };
    if !empty {
        let mut capsule = random_capsule(&mut rng, cfg.size);
        // keep the instrument under 40% of the frame
        loop {
            spec.capsule = Some(capsule);
            let frac = spec.rasterize().count_ones() as f64 / (cfg.size * cfg.size) as f64;
            if frac <= 0.4 {
                break;
            }
            capsule.2 *= 0.7;
        }
    }
    let mask = spec.rasterize();
    // metallic shaft, brighter than tissue unless the scene is low-contrast
    let shade = if cfg.low_contrast {
        rng.gen_range(0.40..0.55)
    } else {
        rng.gen_range(0.65..0.85)
    };
    if let Some((p0, p1, radius)) = spec.capsule {
        for r in 0..cfg.size {
            for c in 0..cfg.size {
                if mask.get(r, c) {
                    // soft axial shading so the shaft is not flat
                    let d = SceneSpec::segment_distance(p0, p1, r as f64, c as f64);
                    let v = shade * (1.0 - 0.3 * (d / radius).powi(2));
                    for k in 0..3 {
                        let off = image.idx(r, c, k);
                        image.values[off] = v;
                    }
                }
            }
        }
    }
    // sensor noise
    for v in &mut image.values {
        *v = (*v + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0);
    }
    let subset = format!("proc_{:02}", index / 10 + 1);
    let sample = Sample {
        id: format!("syn:{:05}", index),
        subset,
        image,
        mask,
    };
    (sample, spec)
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Vec<Sample> {
    (0..cfg.count).map(|i| synth_scene(cfg, i).0).collect()
}

// ---------------------------------------------------------------------------
// PNG datasets

fn image_to_raster(img: &image::RgbImage) -> RasterMap {
    let (w, h) = img.dimensions();
    let mut r = RasterMap::zeros(h as usize, w as usize, 3);
    for (x, y, px) in img.enumerate_pixels() {
        for k in 0..3 {
            let off = r.idx(y as usize, x as usize, k);
            r.values[off] = px.0[k] as f64 / 255.0;
        }
    }
    r
}

fn raster_to_image(r: &RasterMap) -> image::RgbImage {
    image::RgbImage::from_fn(r.width as u32, r.height as u32, |x, y| {
        let px = |k| (r.at(y as usize, x as usize, k).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

fn mask_to_image(m: &BinaryMask) -> image::GrayImage {
    image::GrayImage::from_fn(m.width as u32, m.height as u32, |x, y| {
        image::Luma([if m.get(y as usize, x as usize) { 255 } else { 0 }])
    })
}

fn load_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path)
        .map_err(|e| Error::Dataset {
            path: path.display().to_string(),
            message: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mut m = BinaryMask::zeros(h as usize, w as usize);
    for (x, y, px) in img.enumerate_pixels() {
        m.set(y as usize, x as usize, px.0[0] >= 128);
    }
    Ok(m)
}

fn load_pair(subset: &str, image_path: &Path, mask_path: &Path) -> Result<Sample> {
    let img = image::open(image_path)
        .map_err(|e| Error::Dataset {
            path: image_path.display().to_string(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let mask = load_mask(mask_path)?;
    let image = image_to_raster(&img);
    if image.height != mask.height || image.width != mask.width {
        return Err(Error::Dataset {
            path: image_path.display().to_string(),
            message: format!(
                "image {}x{} does not match mask {}x{}",
                image.height, image.width, mask.height, mask.width
            ),
        });
    }
    let stem = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("img")
        .to_string();
    Ok(Sample {
        id: format!("{subset}/{stem}"),
        subset: subset.to_string(),
        image,
        mask,
    })
}

fn load_subset(subset: &str, dir: &Path, out: &mut Vec<Sample>) -> Result<()> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    let mut names: Vec<String> = std::fs::read_dir(&images)
        .map_err(|e| Error::Dataset {
            path: images.display().to_string(),
            message: e.to_string(),
        })?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    for name in names {
        let mask_path = masks.join(&name);
        if !mask_path.exists() {
            return Err(Error::Dataset {
                path: mask_path.display().to_string(),
                message: "missing mask for image".into(),
            });
        }
        out.push(load_pair(subset, &images.join(&name), &mask_path)?);
    }
    Ok(())
}

/// Load a dataset from `root/<subset>/images|masks/*.png`, or directly from
/// `root/images|masks` (one subset named `all`). Samples come back sorted by
/// id.
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    if root.join("images").is_dir() {
        load_subset("all", root, &mut samples)?;
    } else {
        let mut subsets: Vec<String> = std::fs::read_dir(root)
            .map_err(|e| Error::Dataset {
                path: root.display().to_string(),
                message: e.to_string(),
            })?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("images").is_dir())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        subsets.sort();
        if subsets.is_empty() {
            return Err(Error::Dataset {
                path: root.display().to_string(),
                message: "no images/ directory and no subset directories found".into(),
            });
        }
        for subset in &subsets {
            load_subset(subset, &root.join(subset), &mut samples)?;
        }
    }
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(samples)
}

/// Write samples as `root/<subset>/images|masks/<name>.png`.
pub fn save_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        let dir = root.join(&s.subset);
        std::fs::create_dir_all(dir.join("images"))?;
        std::fs::create_dir_all(dir.join("masks"))?;
        let name = format!("img_{i:05}.png");
        raster_to_image(&s.image)
            .save(dir.join("images").join(&name))
            .map_err(|e| Error::Dataset {
                path: dir.join("images").join(&name).display().to_string(),
                message: e.to_string(),
            })?;
        mask_to_image(&s.mask)
            .save(dir.join("masks").join(&name))
            .map_err(|e| Error::Dataset {
                path: dir.join("masks").join(&name).display().to_string(),
                message: e.to_string(),
            })?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// augmentation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub hue_shift: f64,
    pub brightness_shift: f64,
    pub saturation_range: (f64, f64),
    pub contrast_range: (f64, f64),
    pub flips: bool,
    pub rotation: bool,
    pub zoom_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hue_shift: 0.1,
            brightness_shift: 0.2,
            saturation_range: (0.7, 1.3),
            contrast_range: (0.7, 1.3),
            flips: true,
            rotation: true,
            zoom_range: (0.8, 1.25),
        }
    }
}

impl AugmentConfig {
    /// Photometric-only variant (geometry disabled).
    pub fn photometric_only() -> Self {
        AugmentConfig {
            flips: false,
            rotation: false,
            zoom_range: (1.0, 1.0),
            ..Default::default()
        }
    }
}

/// The sampled geometric part of one augmentation, exposed so the identical
/// warp can be applied to the image and its mask (and inspected in tests).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoParams {
    pub hflip: bool,
    pub vflip: bool,
    pub angle: Angle,
    pub zoom: f64,
    /// Zoom center in pixel coordinates (row, col).
    pub center: (f64, f64),
}

impl GeoParams {
    pub fn identity() -> Self {
        GeoParams {
            hflip: false,
            vflip: false,
            angle: Angle::deg(0.0),
            zoom: 1.0,
            center: (0.0, 0.0),
        }
    }
}

pub fn sample_geo_params(cfg: &AugmentConfig, size: usize, rng: &mut ChaCha8Rng) -> GeoParams {
    let hflip = cfg.flips && rng.gen_bool(0.5);
    let vflip = cfg.flips && rng.gen_bool(0.5);
    let angle = if cfg.rotation {
        Angle::deg(rng.gen_range(0.0..360.0))
    } else {
        Angle::deg(0.0)
    };
    let zoom = rng.gen_range(cfg.zoom_range.0..=cfg.zoom_range.1);
    let center = if zoom > 1.0 {
        // zooming in: pick a crop center that keeps the window inside
        let half = (size as f64 - 1.0) / (2.0 * zoom);
        let lo = half;
        let hi = (size as f64 - 1.0) - half;
        (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi))
    } else {
        let mid = (size as f64 - 1.0) / 2.0;
        (mid, mid)
    };
    GeoParams {
        hflip,
        vflip,
        angle,
        zoom,
        center,
    }
}

fn flip_raster(img: &RasterMap, hflip: bool, vflip: bool) -> RasterMap {
    let mut out = img.clone();
    for r in 0..img.height {
        for c in 0..img.width {
            let sr = if vflip { img.height - 1 - r } else { r };
            let sc = if hflip { img.width - 1 - c } else { c };
            for k in 0..img.channels {
                let off = out.idx(r, c, k);
                out.values[off] = img.at(sr, sc, k);
            }
        }
    }
    out
}

fn flip_mask(m: &BinaryMask, hflip: bool, vflip: bool) -> BinaryMask {
    let mut out = m.clone();
    for r in 0..m.height {
        for c in 0..m.width {
            let sr = if vflip { m.height - 1 - r } else { r };
            let sc = if hflip { m.width - 1 - c } else { c };
            out.set(r, c, m.get(sr, sc));
        }
    }
    out
}

/// Zoom around a center: output pixel `o` samples `center + (o - mid)/zoom`.
/// Bilinear for images; call with an indicator and threshold for masks.
fn zoom_raster(img: &RasterMap, zoom: f64, center: (f64, f64)) -> RasterMap {
    let mut out = RasterMap::zeros(img.height, img.width, img.channels);
    let mid_r = (img.height as f64 - 1.0) / 2.0;
    let mid_c = (img.width as f64 - 1.0) / 2.0;
    for r in 0..img.height {
        for c in 0..img.width {
            let sr = center.0 + (r as f64 - mid_r) / zoom;
            let sc = center.1 + (c as f64 - mid_c) / zoom;
            let (r0, c0) = (sr.floor(), sc.floor());
            let (fr, fc) = (sr - r0, sc - c0);
            for k in 0..img.channels {
                let tap = |ri: f64, ci: f64| -> f64 {
                    if ri < 0.0 || ci < 0.0 || ri >= img.height as f64 || ci >= img.width as f64 {
                        0.0
                    } else {
                        img.at(ri as usize, ci as usize, k)
                    }
                };
                let v = tap(r0, c0) * (1.0 - fr) * (1.0 - fc)
                    + tap(r0, c0 + 1.0) * (1.0 - fr) * fc
                    + tap(r0 + 1.0, c0) * fr * (1.0 - fc)
                    + tap(r0 + 1.0, c0 + 1.0) * fr * fc;
                let off = out.idx(r, c, k);
                out.values[off] = v;
            }
        }
    }
    out
}

fn zoom_mask(m: &BinaryMask, zoom: f64, center: (f64, f64)) -> BinaryMask {
    let mut out = BinaryMask::zeros(m.height, m.width);
    let mid_r = (m.height as f64 - 1.0) / 2.0;
    let mid_c = (m.width as f64 - 1.0) / 2.0;
    for r in 0..m.height {
        for c in 0..m.width {
            let sr = (center.0 + (r as f64 - mid_r) / zoom).round();
            let sc = (center.1 + (c as f64 - mid_c) / zoom).round();
            let inside = sr >= 0.0 && sc >= 0.0 && sr < m.height as f64 && sc < m.width as f64;
            out.set(r, c, inside && m.get(sr as usize, sc as usize));
        }
    }
    out
}

/// Apply one geometric warp to an image (bilinear) and its mask (nearest
/// neighbor), keeping the two aligned.
pub fn apply_geometric(
    image: &RasterMap,
    mask: &BinaryMask,
    p: &GeoParams,
) -> Result<(RasterMap, BinaryMask)> {
    let mut img = flip_raster(image, p.hflip, p.vflip);
    let mut m = flip_mask(mask, p.hflip, p.vflip);
    if p.angle.degrees() != 0.0 {
        img = geometry::rotate(&img, p.angle, RotationMode::Bilinear)?;
        m = geometry::rotate_mask_nn(&m, p.angle);
    }
    if p.zoom != 1.0 {
        img = zoom_raster(&img, p.zoom, p.center);
        m = zoom_mask(&m, p.zoom, p.center);
    }
    Ok((img, m))
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / d).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Photometric jitter on the image only: hue rotation, saturation scale,
/// brightness shift, contrast scale; everything clamped back to [0, 1].
pub fn apply_photometric(image: &RasterMap, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> RasterMap {
    let dh = rng.gen_range(-cfg.hue_shift..=cfg.hue_shift);
    let ds = rng.gen_range(cfg.saturation_range.0..=cfg.saturation_range.1);
    let dv = rng.gen_range(-cfg.brightness_shift..=cfg.brightness_shift);
    let dc = rng.gen_range(cfg.contrast_range.0..=cfg.contrast_range.1);
    let mut out = image.clone();
    for px in out.values.chunks_mut(3) {
        let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
        let (r, g, b) = hsv_to_rgb(h + dh, (s * ds).clamp(0.0, 1.0), (v + dv).clamp(0.0, 1.0));
        px[0] = ((r - 0.5) * dc + 0.5).clamp(0.0, 1.0);
        px[1] = ((g - 0.5) * dc + 0.5).clamp(0.0, 1.0);
        px[2] = ((b - 0.5) * dc + 0.5).clamp(0.0, 1.0);
    }
    out
}

/// Full augmentation of one sample.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let image = apply_photometric(&sample.image, cfg, rng);
    let p = sample_geo_params(cfg, sample.image.height, rng);
    let (image, mask) = apply_geometric(&image, &sample.mask, &p)?;
    Ok(Sample {
        id: sample.id.clone(),
        subset: sample.subset.clone(),
        image,
        mask,
    })
}

// ---------------------------------------------------------------------------
// cross-validation

/// K contiguous groups of the lexicographically sorted subset names, with the
/// remainder spread over the first groups; fold i validates on group i and
/// trains on the rest. Returns per-fold (train, validation) index lists.
pub fn kfold_split(samples: &[Sample], k: usize) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 {
        return Err(Error::InvalidArgument("kfold: k must be >= 2".into()));
    }
    let mut subsets: Vec<&str> = samples.iter().map(|s| s.subset.as_str()).collect();
    subsets.sort();
    subsets.dedup();
    if subsets.len() < k {
        return Err(Error::InvalidArgument(format!(
            "kfold: {} subsets cannot form {} folds",
            subsets.len(),
            k
        )));
    }
    let n = subsets.len();
    let base = n / k;
    let rem = n % k;
    let mut groups: Vec<Vec<&str>> = Vec::with_capacity(k);
    let mut pos = 0;
    for g in 0..k {
        let size = base + usize::from(g < rem);
        groups.push(subsets[pos..pos + size].to_vec());
        pos += size;
    }
    let mut folds = Vec::with_capacity(k);
    for group in &groups {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            if group.contains(&s.subset.as_str()) {
                val.push(i);
            } else {
                train.push(i);
            }
        }
        folds.push((train, val));
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn synthetic_is_deterministic_and_stream_stable() {
        let cfg = SynthConfig {
            count: 12,
            size: 32,
            seed: 5,
            ..Default::default()
        };
        let a = generate_synthetic(&cfg);
        let b = generate_synthetic(&cfg);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.values, y.image.values);
            assert_eq!(x.mask.values, y.mask.values);
        }
        // sample 7 does not depend on the requested count
        let small = SynthConfig { count: 8, ..cfg };
        let c = generate_synthetic(&small);
        assert_eq!(a[7].image.values, c[7].image.values);
    }

    #[test]
    fn synthetic_masks_match_scene_oracle() {
        let cfg = SynthConfig {
            count: 20,
            size: 48,
            seed: 11,
            ..Default::default()
        };
        for i in 0..cfg.count {
            let (sample, spec) = synth_scene(&cfg, i);
            for r in 0..48 {
                for c in 0..48 {
                    assert_eq!(sample.mask.get(r, c), spec.contains(r, c), "{i} ({r},{c})");
                }
            }
        }
    }

    #[test]
    fn synthetic_respects_budget_and_empty_rate() {
        let cfg = SynthConfig {
            count: 100,
            size: 48,
            seed: 3,
            ..Default::default()
        };
        let samples = generate_synthetic(&cfg);
        let mut empties = 0;
        for s in &samples {
            let frac = s.mask.count_ones() as f64 / (48.0 * 48.0);
            assert!(frac <= 0.4, "{}: {frac}", s.id);
            if s.mask.count_ones() == 0 {
                empties += 1;
            }
            assert!(s.image.values.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!((2..=25).contains(&empties), "empties = {empties}");
        // ten samples per subset
        assert_eq!(samples[0].subset, "proc_01");
        assert_eq!(samples[10].subset, "proc_02");
    }

    #[test]
    fn low_contrast_shrinks_the_gap() {
        let normal = SynthConfig {
            count: 30,
            size: 48,
            seed: 9,
            empty_rate: 0.0,
            low_contrast: false,
        };
        let low = SynthConfig {
            low_contrast: true,
            ..normal
        };
        let gap = |samples: &[Sample]| {
            let mut fg = (0.0, 0usize);
            let mut bg = (0.0, 0usize);
            for s in samples {
                for r in 0..48 {
                    for c in 0..48 {
                        let v = s.image.at(r, c, 0);
                        if s.mask.get(r, c) {
                            fg = (fg.0 + v, fg.1 + 1);
                        } else {
                            bg = (bg.0 + v, bg.1 + 1);
                        }
                    }
                }
            }
            (fg.0 / fg.1 as f64 - bg.0 / bg.1 as f64).abs()
        };
        let g_normal = gap(&generate_synthetic(&normal));
        let g_low = gap(&generate_synthetic(&low));
        assert!(g_low < g_normal, "{g_low} !< {g_normal}");
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            count: 6,
            size: 24,
            seed: 2,
            ..Default::default()
        };
        let samples = generate_synthetic(&cfg);
        save_dataset(dir.path(), &samples).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 6);
        for (orig, re) in samples.iter().zip(&loaded) {
            assert_eq!(orig.mask.values, re.mask.values);
            let worst = orig
                .image
                .values
                .iter()
                .zip(&re.image.values)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(worst <= 0.5 / 255.0 + 1e-9, "quantization drift {worst}");
            assert_eq!(re.subset, orig.subset);
        }
    }

    #[test]
    fn load_reports_missing_mask() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("x").join("images");
        std::fs::create_dir_all(&images).unwrap();
        std::fs::create_dir_all(dir.path().join("x").join("masks")).unwrap();
        image::RgbImage::new(8, 8).save(images.join("a.png")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("missing mask"), "{err}");
    }

    #[test]
    fn photometric_preserves_range_and_mask() {
        let cfg = SynthConfig {
            count: 1,
            size: 32,
            seed: 7,
            empty_rate: 0.0,
            low_contrast: false,
        };
        let sample = &generate_synthetic(&cfg)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = augment(sample, &AugmentConfig::photometric_only(), &mut rng).unwrap();
        assert!(out.image.values.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(out.mask.values, sample.mask.values);
    }

    #[test]
    fn flips_are_exact() {
        let cfg = SynthConfig {
            count: 1,
            size: 16,
            seed: 13,
            empty_rate: 0.0,
            low_contrast: false,
        };
        let s = &generate_synthetic(&cfg)[0];
        let p = GeoParams {
            hflip: true,
            ..GeoParams::identity()
        };
        let (img, mask) = apply_geometric(&s.image, &s.mask, &p).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                assert_eq!(img.at(r, c, 1), s.image.at(r, 15 - c, 1));
                assert_eq!(mask.get(r, c), s.mask.get(r, 15 - c));
            }
        }
        // identity params change nothing
        let (img, mask) = apply_geometric(&s.image, &s.mask, &GeoParams::identity()).unwrap();
        assert_eq!(img.values, s.image.values);
        assert_eq!(mask.values, s.mask.values);
    }

    #[test]
    fn zoom_in_magnifies_around_center() {
        // a centered square doubles its linear extent under zoom 2
        let mut mask = BinaryMask::zeros(33, 33);
        for r in 12..21 {
            for c in 12..21 {
                mask.set(r, c, true);
            }
        }
        let img = RasterMap::zeros(33, 33, 3);
        let p = GeoParams {
            zoom: 2.0,
            center: (16.0, 16.0),
            ..GeoParams::identity()
        };
        let (_, zoomed) = apply_geometric(&img, &mask, &p).unwrap();
        assert!(zoomed.get(16, 16));
        let area = zoomed.count_ones();
        assert!((area as f64 - 81.0 * 4.0).abs() <= 20.0, "area {area}");
    }

    #[test]
    fn kfold_grouping() {
        // ten subsets, three folds → groups of 4, 3, 3
        let cfg = SynthConfig {
            count: 100,
            size: 8,
            seed: 1,
            ..Default::default()
        };
        let samples = generate_synthetic(&cfg);
        let folds = kfold_split(&samples, 3).unwrap();
        assert_eq!(folds.len(), 3);
        assert_eq!(folds[0].1.len(), 40);
        assert_eq!(folds[1].1.len(), 30);
        assert_eq!(folds[2].1.len(), 30);
        for (train, val) in &folds {
            assert_eq!(train.len() + val.len(), 100);
            // no subset appears on both sides
            let val_subsets: std::collections::HashSet<_> =
                val.iter().map(|&i| samples[i].subset.clone()).collect();
            assert!(train.iter().all(|&i| !val_subsets.contains(&samples[i].subset)));
        }
        // every sample validates exactly once across folds
        let mut seen = vec![0usize; 100];
        for (_, val) in &folds {
            for &i in val {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));

        assert!(kfold_split(&samples[..15], 3).is_err()); // only 2 subsets
        assert!(kfold_split(&samples, 1).is_err());
    }

    proptest! {
        #[test]
        fn augmented_masks_stay_binary(seed in 0u64..1000) {
            let cfg = SynthConfig { count: 1, size: 24, seed, ..Default::default() };
            let s = &generate_synthetic(&cfg)[0];
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
            let out = augment(s, &AugmentConfig::default(), &mut rng).unwrap();
            prop_assert!(out.mask.values.iter().all(|&v| v <= 1));
            prop_assert_eq!(out.mask.height, 24);
            prop_assert!(out.image.values.iter().all(|v| v.is_finite()));
        }
    }
}
