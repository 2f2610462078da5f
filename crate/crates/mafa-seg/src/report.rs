//! Evaluation and reporting: per-image metrics with CSV/JSON artifacts and
//! optional overlay images, the rotation-robustness audit, and the ablation
//! runner that retrains the network under systematic configuration changes.

use crate::config::ExperimentConfig;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::geometry::{self, BinaryMask, RasterMap, RotationMode};
use crate::mafa;
use crate::metrics::{self, DatasetSummary, MetricsRecord};
use crate::model::Model;
use crate::train;
use serde::Serialize;
use std::cell::RefCell;
use std::io::Write;
use std::path::Path;

/// Half-width of the near-boundary evaluation band, in pixels.
pub const BAND_HALF_WIDTH: f64 = 10.0;

/// How a trained model turns one image into a mask at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Predictor {
    /// One forward pass.
    Single,
    /// Average the aligned foreground probability maps over this many
    /// bilinearly rotated copies before thresholding.
    Ensemble(usize),
}

fn infer_probabilities(model: &mut Model, image: &RasterMap) -> Result<RasterMap> {
    let out = model.infer(&image.to_tensor4())?;
    RasterMap::from_tensor4(&out.seg)
}

fn threshold(prob: &RasterMap) -> BinaryMask {
    let mut m = BinaryMask::zeros(prob.height, prob.width);
    for r in 0..prob.height {
        for c in 0..prob.width {
            m.set(r, c, prob.at(r, c, 1) > 0.5);
        }
    }
    m
}

/// Predict one mask under the chosen evaluation strategy.
pub fn predict(model: &mut Model, image: &RasterMap, predictor: Predictor) -> Result<BinaryMask> {
    match predictor {
        Predictor::Single => Ok(threshold(&infer_probabilities(model, image)?)),
        Predictor::Ensemble(n) => {
            let angles = geometry::angle_set(n)?;
            let cell = RefCell::new(model);
            let prob = mafa::ensemble_predict(
                image,
                |img| infer_probabilities(*cell.borrow_mut(), img),
                &angles,
                RotationMode::Bilinear,
            )?;
            Ok(threshold(&prob))
        }
    }
}

/// Per-image metrics for a whole evaluation set.
pub fn evaluate_records(
    model: &mut Model,
    samples: &[Sample],
    predictor: Predictor,
) -> Result<Vec<MetricsRecord>> {
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = predict(model, &s.image, predictor)?;
        let dsc = metrics::dsc(&pred, &s.mask)?;
        let iou = metrics::iou(&pred, &s.mask)?;
        let cell = RefCell::new(&mut *model);
        let (rm, rsd) = metrics::rotational_iou_stats(
            |img| predict(*cell.borrow_mut(), img, predictor),
            &s.image,
            &s.mask,
            &metrics::evaluation_angles(),
        )?;
        let band = metrics::near_boundary_band(&s.mask, BAND_HALF_WIDTH);
        let iou_nb = metrics::iou_nb(&pred, &s.mask, &band)?;
        records.push(MetricsRecord {
            id: s.id.clone(),
            dsc,
            iou,
            rm_iou: rm,
            rsd_iou: rsd,
            iou_nb,
        });
    }
    Ok(records)
}

fn overlay_png(sample: &Sample, pred: &BinaryMask) -> image::RgbImage {
    let gt_contour = crate::contour::extract_contour_gt(&sample.mask, 1).unwrap();
    image::RgbImage::from_fn(
        sample.image.width as u32,
        sample.image.height as u32,
        |x, y| {
            let (r, c) = (y as usize, x as usize);
            let px = |k| (sample.image.at(r, c, k).clamp(0.0, 1.0) * 255.0) as u8;
            let mut rgb = [px(0), px(1), px(2)];
            if pred.get(r, c) {
                // predicted foreground tinted green
                rgb[1] = rgb[1].saturating_add(90);
            }
            if gt_contour.at(0, r, c, 1) > 0.5 {
                // ground-truth contour drawn red
                rgb = [255, 32, 32];
            }
            image::Rgb(rgb)
        },
    )
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

/// Full evaluation: `metrics.csv` and `summary.json` in `out_dir`, plus one
/// overlay PNG per image when requested.
pub fn evaluate(
    model: &mut Model,
    samples: &[Sample],
    predictor: Predictor,
    out_dir: Option<&Path>,
    overlays: bool,
) -> Result<(Vec<MetricsRecord>, DatasetSummary)> {
    let records = evaluate_records(model, samples, predictor)?;
    let summary = metrics::dataset_summary(&records)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let mut csv = std::fs::File::create(dir.join("metrics.csv"))?;
        metrics::write_csv(&mut csv, &records)?;
        std::fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&summary)?,
        )?;
        if overlays {
            let ov = dir.join("overlays");
            std::fs::create_dir_all(&ov)?;
            for s in samples {
                let pred = predict(model, &s.image, predictor)?;
                overlay_png(s, &pred)
                    .save(ov.join(format!("{}.png", sanitize(&s.id))))
                    .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
            }
        }
    }
    Ok((records, summary))
}

// ---------------------------------------------------------------------------
// rotation audit

#[derive(Debug, Clone, Serialize)]
pub struct AuditRow {
    pub id: String,
    pub per_angle_iou: Vec<f64>,
    pub rm_iou: f64,
    pub rsd_iou: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub angles_deg: Vec<f64>,
    pub rows: Vec<AuditRow>,
    pub mean_per_angle: Vec<f64>,
    pub mean_rm_iou: f64,
    pub mean_rsd_iou: f64,
}

/// Rotation-robustness audit: the per-angle IOU table over the evaluation
/// angles, per image and averaged. Writes `audit.csv` and `audit.json`.
pub fn audit(
    model: &mut Model,
    samples: &[Sample],
    out_dir: Option<&Path>,
) -> Result<AuditReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("audit: no samples".into()));
    }
    let angles = metrics::evaluation_angles();
    let mut rows = Vec::with_capacity(samples.len());
    let mut sums = vec![0.0; angles.len()];
    for s in samples {
        let cell = RefCell::new(&mut *model);
        let ious = metrics::per_angle_ious(
            |img| predict(*cell.borrow_mut(), img, Predictor::Single),
            &s.image,
            &s.mask,
            &angles,
        )?;
        for (acc, v) in sums.iter_mut().zip(&ious) {
            *acc += v;
        }
        let (rm, rsd) = metrics::mean_and_population_stdev(&ious);
        rows.push(AuditRow {
            id: s.id.clone(),
            per_angle_iou: ious,
            rm_iou: rm,
            rsd_iou: rsd,
        });
    }
    let n = samples.len() as f64;
    let report = AuditReport {
        angles_deg: angles.iter().map(|a| a.degrees()).collect(),
        mean_per_angle: sums.iter().map(|s| s / n).collect(),
        mean_rm_iou: rows.iter().map(|r| r.rm_iou).sum::<f64>() / n,
        mean_rsd_iou: rows.iter().map(|r| r.rsd_iou).sum::<f64>() / n,
        rows,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let mut csv = std::fs::File::create(dir.join("audit.csv"))?;
        let header: Vec<String> = report
            .angles_deg
            .iter()
            .map(|d| format!("iou_{}", *d as i64))
            .collect();
        writeln!(csv, "id,{},rm_iou,rsd_iou", header.join(","))?;
        for row in &report.rows {
            let vals: Vec<String> = row.per_angle_iou.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(
                csv,
                "{},{},{:.6},{:.6}",
                row.id,
                vals.join(","),
                row.rm_iou,
                row.rsd_iou
            )?;
        }
        std::fs::write(dir.join("audit.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// ablation

#[derive(Debug, Clone)]
pub struct Variant {
    pub name: String,
    pub config: ExperimentConfig,
    pub predictor: Predictor,
}

/// The standard ablation grid derived from a base configuration: rotation
/// augmentation on/off, angle counts 2-6, max-out fusion, alternative
/// aggregation placements, the test-time ensemble, and contour supervision
/// on/off. Every variant shares the base seed.
pub fn standard_variants(base: &ExperimentConfig) -> Vec<Variant> {
    let mut single = base.clone();
    single.model.mafa.n_angles = 1;
    single.train.rotation_augment = false;

    let v = |name: &str, f: &dyn Fn(&mut ExperimentConfig)| {
        let mut cfg = single.clone();
        f(&mut cfg);
        Variant {
            name: name.into(),
            config: cfg,
            predictor: Predictor::Single,
        }
    };

    let mut out = vec![
        v("baseline", &|_| {}),
        v("rot_aug", &|c| c.train.rotation_augment = true),
        v("mafa_n2", &|c| c.model.mafa.n_angles = 2),
        v("mafa_n3", &|c| {
            c.model.mafa.n_angles = 3;
            c.model.mafa.rotation_mode = RotationMode::Bilinear;
        }),
        v("mafa_n4", &|c| c.model.mafa.n_angles = 4),
        v("mafa_n5", &|c| {
            c.model.mafa.n_angles = 5;
            c.model.mafa.rotation_mode = RotationMode::Bilinear;
        }),
        v("mafa_n6", &|c| {
            c.model.mafa.n_angles = 6;
            c.model.mafa.rotation_mode = RotationMode::Bilinear;
        }),
        v("mafa_n4_max_out", &|c| {
            c.model.mafa.n_angles = 4;
            c.model.mafa.aggregation = mafa::Aggregation::MaxOut;
        }),
        v("mafa_n4_mid", &|c| {
            c.model.mafa.n_angles = 4;
            c.model.mafa.placement = mafa::Placement::BackboneMid;
        }),
        v("mafa_n4_last", &|c| {
            c.model.mafa.n_angles = 4;
            c.model.mafa.placement = mafa::Placement::BackboneLast;
        }),
        v("no_contour", &|c| c.train.contour_supervision = false),
    ];
    out.push(Variant {
        name: "ensemble_n4".into(),
        config: single,
        predictor: Predictor::Ensemble(4),
    });
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub summary: DatasetSummary,
    /// Wall-clock training time, reported but never asserted on.
    pub train_seconds: f64,
}

/// Train and evaluate every variant with shared seeds and the same split.
/// Writes `ablation.csv` and a plain-text table.
pub fn run_ablation(
    variants: &[Variant],
    train_samples: &[Sample],
    val_samples: &[Sample],
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for variant in variants {
        let t0 = std::time::Instant::now();
        let mut result = train::train(&variant.config, train_samples, None)?;
        let train_seconds = t0.elapsed().as_secs_f64();
        let (_, summary) =
            evaluate(&mut result.model, val_samples, variant.predictor, None, false)?;
        rows.push(AblationRow {
            variant: variant.name.clone(),
            summary,
            train_seconds,
        });
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let mut csv = std::fs::File::create(dir.join("ablation.csv"))?;
        writeln!(csv, "variant,m_dsc,m_iou,m_rm_iou,m_rsd_iou,m_iou_nb,train_seconds")?;
        for r in &rows {
            let s = &r.summary;
            writeln!(
                csv,
                "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.1}",
                r.variant, s.m_dsc, s.m_iou, s.m_rm_iou, s.m_rsd_iou, s.m_iou_nb, r.train_seconds
            )?;
        }
        std::fs::write(dir.join("ablation.txt"), ablation_table(&rows))?;
    }
    Ok(rows)
}

/// Human-readable fixed-width table of ablation results.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<18} {:>8} {:>8} {:>8} {:>9} {:>8} {:>8}\n",
        "variant", "mDSC", "mIOU", "mRM_IOU", "mRSD_IOU", "mIOU_NB", "time_s"
    );
    for r in rows {
        let m = &r.summary;
        s.push_str(&format!(
            "{:<18} {:>8.4} {:>8.4} {:>8.4} {:>9.4} {:>8.4} {:>8.1}\n",
            r.variant, m.m_dsc, m.m_iou, m.m_rm_iou, m.m_rsd_iou, m.m_iou_nb, r.train_seconds
        ));
    }
    s
}
