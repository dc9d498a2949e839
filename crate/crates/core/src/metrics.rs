//! Pixel-wise mIoU and instance-wise precision / recall / F-measure.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Level;
use crate::geometry::{rasterize_polygon, GeometryError, PolygonSet, RasterMask};
use crate::postprocess::MatchResult;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("mask dimensions differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("stream lengths differ: {0} results vs {1} ground truths")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn check_dims(a: &RasterMask, b: &RasterMask) -> Result<(), MetricsError> {
    if a.dims() == b.dims() {
        Ok(())
    } else {
        Err(MetricsError::ShapeMismatch(a.dims(), b.dims()))
    }
}

/// IoU of the non-zero pixels of two masks; 1 when both are empty.
pub fn mask_iou(a: &RasterMask, b: &RasterMask) -> Result<f64, MetricsError> {
    check_dims(a, b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += usize::from(x != 0 && y != 0);
        union += usize::from(x != 0 || y != 0);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean of background and foreground IoU; a class absent from both masks
/// scores 1.
pub fn miou(pred: &RasterMask, gt: &RasterMask) -> Result<f64, MetricsError> {
    check_dims(pred, gt)?;
    let (mut fg_i, mut fg_u, mut bg_i, mut bg_u) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p != 0, g != 0);
        fg_i += usize::from(p && g);
        fg_u += usize::from(p || g);
        bg_i += usize::from(!p && !g);
        bg_u += usize::from(!p || !g);
    }
    let iou = |i: usize, u: usize| if u == 0 { 1.0 } else { i as f64 / u as f64 };
    Ok(0.5 * (iou(fg_i, fg_u) + iou(bg_i, bg_u)))
}

/// Matched and total instance counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl MatchCounts {
    pub fn add(&mut self, other: MatchCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// `(precision, recall, f_measure)`. An empty side scores 0, or 1 when
    /// both sides are empty.
    pub fn prf(&self) -> (f64, f64, f64) {
        let preds = self.tp + self.fp;
        let gts = self.tp + self.fn_;
        if preds == 0 && gts == 0 {
            return (1.0, 1.0, 1.0);
        }
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let (p, r) = (ratio(self.tp, preds), ratio(self.tp, gts));
        (p, r, f_measure(p, r))
    }
}

pub fn f_measure(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Greedy one-to-one matching in descending IoU order; a pair matches only
/// when its IoU is strictly above 0.5. Ties go to the lower prediction, then
/// the lower ground-truth index.
pub fn match_instances(preds: &[RasterMask], gts: &[RasterMask]) -> Result<MatchCounts, MetricsError> {
    let mut pairs = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let iou = mask_iou(p, g)?;
            if iou > 0.5 {
                pairs.push((iou, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pred_used = vec![false; preds.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut tp = 0;
    for (_, i, j) in pairs {
        if !pred_used[i] && !gt_used[j] {
            pred_used[i] = true;
            gt_used[j] = true;
            tp += 1;
        }
    }
    Ok(MatchCounts { tp, fp: preds.len() - tp, fn_: gts.len() - tp })
}

/// `(precision, recall, f_measure)` of one image.
pub fn instance_prf(preds: &[RasterMask], gts: &[RasterMask]) -> Result<(f64, f64, f64), MetricsError> {
    Ok(match_instances(preds, gts)?.prf())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub miou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub miou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub per_level: BTreeMap<String, LevelMetrics>,
    pub counts: ReportCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReportCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub images: usize,
}

/// Ground-truth instance masks of a polygon set, in set order.
pub fn gt_instance_masks(gt: &PolygonSet, height: usize, width: usize) -> Result<Vec<RasterMask>, MetricsError> {
    Ok(gt
        .iter()
        .map(|ip| rasterize_polygon(&ip.polygon, height, width))
        .collect::<Result<Vec<_>, _>>()?)
}

/// Union of all ground-truth instances.
pub fn gt_merged_mask(gt: &PolygonSet, height: usize, width: usize) -> Result<RasterMask, MetricsError> {
    let mut m = RasterMask::zeros(height, width)?;
    for inst in gt_instance_masks(gt, height, width)? {
        for (o, &v) in m.data_mut().iter_mut().zip(inst.data()) {
            *o |= u32::from(v != 0);
        }
    }
    Ok(m)
}

/// Per-image scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageScore {
    pub miou: f64,
    pub counts: MatchCounts,
    pub level: Level,
}

pub fn score_image(result: &MatchResult, gt: &PolygonSet, level: Level) -> Result<ImageScore, MetricsError> {
    let (h, w) = result.merged.dims();
    let gt_masks = gt_instance_masks(gt, h, w)?;
    let merged = gt_merged_mask(gt, h, w)?;
    let preds: Vec<RasterMask> = result.instances.iter().map(|i| i.mask.clone()).collect();
    Ok(ImageScore {
        miou: miou(&result.merged, &merged)?,
        counts: match_instances(&preds, &gt_masks)?,
        level,
    })
}

fn summarize(scores: &[&ImageScore]) -> (LevelMetrics, MatchCounts) {
    let mut counts = MatchCounts::default();
    for s in scores {
        counts.add(s.counts);
    }
    let (p, r, f) = counts.prf();
    let miou = if scores.is_empty() {
        0.0
    } else {
        scores.iter().map(|s| s.miou).sum::<f64>() / scores.len() as f64
    };
    (LevelMetrics { miou, precision: p, recall: r, f, images: scores.len() }, counts)
}

/// Aggregates per-image scores: mIoU averaged over images, P/R/F from counts
/// summed over images, with a breakdown per level.
pub fn aggregate(scores: &[ImageScore]) -> MetricReport {
    let all: Vec<&ImageScore> = scores.iter().collect();
    let (total, counts) = summarize(&all);
    let mut per_level = BTreeMap::new();
    for level in Level::ALL {
        let subset: Vec<&ImageScore> = scores.iter().filter(|s| s.level == level).collect();
        if !subset.is_empty() {
            per_level.insert(level.name().to_string(), summarize(&subset).0);
        }
    }
    MetricReport {
        miou: total.miou,
        precision: total.precision,
        recall: total.recall,
        f_measure: total.f,
        per_level,
        counts: ReportCounts { tp: counts.tp, fp: counts.fp, fn_: counts.fn_, images: scores.len() },
    }
}

/// Scores a stream of decoded results against their ground truth.
pub fn evaluate_run(results: &[MatchResult], gts: &[PolygonSet], levels: &[Level]) -> Result<MetricReport, MetricsError> {
    if results.len() != gts.len() || results.len() != levels.len() {
        return Err(MetricsError::LengthMismatch(results.len(), gts.len().min(levels.len())));
    }
    let scores = results
        .iter()
        .zip(gts)
        .zip(levels)
        .map(|((r, g), &l)| score_image(r, g, l))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(aggregate(&scores))
}

impl MetricReport {
    /// One-row table in percent with columns `Level I mIoU, Level I F, …,
    /// Total mIoU, Total F`; levels absent from the run have empty cells.
    pub fn to_csv(&self) -> String {
        let mut header = Vec::new();
        let mut row = Vec::new();
        for level in Level::ALL {
            header.push(format!("Level {} mIoU,Level {} F", level.name(), level.name()));
            row.push(match self.per_level.get(level.name()) {
                Some(m) => format!("{:.2},{:.2}", 100.0 * m.miou, 100.0 * m.f),
                None => ",".to_string(),
            });
        }
        header.push("Total mIoU,Total F".to_string());
        row.push(format!("{:.2},{:.2}", 100.0 * self.miou, 100.0 * self.f_measure));
        format!("{}\n{}\n", header.join(","), row.join(","))
    }
}
