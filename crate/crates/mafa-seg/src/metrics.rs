//! Segmentation metrics: DSC, IOU, the rotational statistics RM_IOU /
//! RSD_IOU over the six evaluation angles, the near-boundary IOU_NB, and
//! dataset-level means.
//!
//! Empty-union convention: when both masks are empty (or the band is empty),
//! agreement on emptiness counts as perfect agreement and the metric is 1.

use crate::error::{Error, Result};
use crate::geometry::{self, Angle, BinaryMask, RasterMap, RotationMode};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// The six evaluation rotations.
pub fn evaluation_angles() -> Vec<Angle> {
    [0.0, 60.0, 120.0, 180.0, 240.0, 300.0]
        .iter()
        .map(|&d| Angle::deg(d))
        .collect()
}

fn check_shapes(pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::ShapeMismatch(format!(
            "mask shapes {}x{} vs {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    Ok(())
}

/// Intersection over union. Both-empty returns 1.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.values.iter().zip(&gt.values) {
        let (p, g) = (p != 0, g != 0);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Dice similarity coefficient. Both-empty returns 1.
pub fn dsc(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&p, &g) in pred.values.iter().zip(&gt.values) {
        let (p, g) = (p != 0, g != 0);
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    }
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

/// Rotational mean and population standard deviation of IOU over the given
/// angles. The input image is rotated with bilinear interpolation; the ground
/// truth with nearest-neighbor to keep it binary.
pub fn rotational_iou_stats<F>(
    infer: F,
    image: &RasterMap,
    gt: &BinaryMask,
    angles: &[Angle],
) -> Result<(f64, f64)>
where
    F: Fn(&RasterMap) -> Result<BinaryMask>,
{
    if angles.is_empty() {
        return Err(Error::InvalidArgument("rotational stats: empty angle set".into()));
    }
    let values = per_angle_ious(infer, image, gt, angles)?;
    Ok(mean_and_population_stdev(&values))
}

/// The per-angle IOU values behind [`rotational_iou_stats`].
pub fn per_angle_ious<F>(
    infer: F,
    image: &RasterMap,
    gt: &BinaryMask,
    angles: &[Angle],
) -> Result<Vec<f64>>
where
    F: Fn(&RasterMap) -> Result<BinaryMask>,
{
    let mut values = Vec::with_capacity(angles.len());
    for &phi in angles {
        let rotated = geometry::rotate(image, phi, RotationMode::Bilinear)?;
        let pred = infer(&rotated)?;
        let gt_rot = geometry::rotate_mask_nn(gt, phi);
        values.push(iou(&pred, &gt_rot)?);
    }
    Ok(values)
}

pub fn mean_and_population_stdev(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Band of pixels (either side) whose Euclidean distance to the ground-truth
/// boundary is at most `half_width`. The boundary is the set of foreground
/// pixels 4-adjacent to background, with the image border counting as
/// background.
pub fn near_boundary_band(gt: &BinaryMask, half_width: f64) -> BinaryMask {
    let (h, w) = (gt.height, gt.width);
    let mut band = BinaryMask::zeros(h, w);
    let mut boundary = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !gt.get(r, c) {
                continue;
            }
            let edge = r == 0
                || r == h - 1
                || c == 0
                || c == w - 1
                || !gt.get(r - 1, c)
                || !gt.get(r + 1, c)
                || !gt.get(r, c - 1)
                || !gt.get(r, c + 1);
            if edge {
                boundary.push((r as isize, c as isize));
            }
        }
    }
    let reach = half_width.floor() as isize;
    let hw_sq = half_width * half_width;
    for &(br, bc) in &boundary {
        for dr in -reach..=reach {
            let rr = br + dr;
            if rr < 0 || rr >= h as isize {
                continue;
            }
            for dc in -reach..=reach {
                let cc = bc + dc;
                if cc < 0 || cc >= w as isize {
                    continue;
                }
                if (dr * dr + dc * dc) as f64 <= hw_sq {
                    band.set(rr as usize, cc as usize, true);
                }
            }
        }
    }
    band
}

/// IOU restricted to a band: |(S∩G)∩B| / |(S∪G)∩B|, 1 when the denominator
/// is empty.
pub fn iou_nb(pred: &BinaryMask, gt: &BinaryMask, band: &BinaryMask) -> Result<f64> {
    check_shapes(pred, gt)?;
    check_shapes(pred, band)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for ((&p, &g), &b) in pred.values.iter().zip(&gt.values).zip(&band.values) {
        if b == 0 {
            continue;
        }
        let (p, g) = (p != 0, g != 0);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Per-image metric record; the row unit of the CSV report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub id: String,
    pub dsc: f64,
    pub iou: f64,
    pub rm_iou: f64,
    pub rsd_iou: f64,
    pub iou_nb: f64,
}

/// Dataset-level means of every metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub count: usize,
    pub m_dsc: f64,
    pub m_iou: f64,
    pub m_rm_iou: f64,
    pub m_rsd_iou: f64,
    pub m_iou_nb: f64,
}

pub fn dataset_summary(records: &[MetricsRecord]) -> Result<DatasetSummary> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("dataset_summary: no records".into()));
    }
    let n = records.len() as f64;
    let round4 = |v: f64| (v * 10_000.0).round() / 10_000.0;
    Ok(DatasetSummary {
        count: records.len(),
        m_dsc: round4(records.iter().map(|r| r.dsc).sum::<f64>() / n),
        m_iou: round4(records.iter().map(|r| r.iou).sum::<f64>() / n),
        m_rm_iou: round4(records.iter().map(|r| r.rm_iou).sum::<f64>() / n),
        m_rsd_iou: round4(records.iter().map(|r| r.rsd_iou).sum::<f64>() / n),
        m_iou_nb: round4(records.iter().map(|r| r.iou_nb).sum::<f64>() / n),
    })
}

/// Mean and standard deviation over K fold-level summaries, one pair per
/// metric. Population stdev over the K values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldStatistics {
    pub folds: usize,
    pub m_dsc: (f64, f64),
    pub m_iou: (f64, f64),
    pub m_rm_iou: (f64, f64),
    pub m_rsd_iou: (f64, f64),
    pub m_iou_nb: (f64, f64),
}

pub fn fold_statistics(summaries: &[DatasetSummary]) -> Result<FoldStatistics> {
    if summaries.is_empty() {
        return Err(Error::InvalidArgument("fold_statistics: no folds".into()));
    }
    let stat = |f: fn(&DatasetSummary) -> f64| {
        let vals: Vec<f64> = summaries.iter().map(f).collect();
        mean_and_population_stdev(&vals)
    };
    Ok(FoldStatistics {
        folds: summaries.len(),
        m_dsc: stat(|s| s.m_dsc),
        m_iou: stat(|s| s.m_iou),
        m_rm_iou: stat(|s| s.m_rm_iou),
        m_rsd_iou: stat(|s| s.m_rsd_iou),
        m_iou_nb: stat(|s| s.m_iou_nb),
    })
}

/// CSV report: header `id,dsc,iou,rm_iou,rsd_iou,iou_nb`, one row per image,
/// UTF-8 with LF line endings.
pub fn write_csv(out: &mut impl Write, records: &[MetricsRecord]) -> Result<()> {
    out.write_all(b"id,dsc,iou,rm_iou,rsd_iou,iou_nb\n")?;
    for r in records {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.id, r.dsc, r.iou, r.rm_iou, r.rsd_iou, r.iou_nb
        )?;
    }
    Ok(())
}
