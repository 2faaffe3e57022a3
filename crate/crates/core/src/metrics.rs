//! Pedestrian-detection evaluation: greedy IoU matching, the log-average miss
//! rate over the "reasonable" subset, and COCO-style average precision.

use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, GtBox, Occlusion};
use crate::error::{Error, Result};

pub const REASONABLE_MIN_HEIGHT: f64 = 55.0;
pub const MR_IOU: f64 = 0.5;
pub const MR_FLOOR: f64 = 1e-10;
pub const FPPI_POINTS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image: usize,
    pub bbox: BBox,
    pub score: f64,
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

pub fn is_reasonable(gt: &GtBox) -> bool {
    gt.height() >= REASONABLE_MIN_HEIGHT && gt.occlusion == Occlusion::None
}

/// Splits ground truth into evaluated and ignored boxes, preserving order.
pub fn reasonable_filter(gts: &[GtBox]) -> (Vec<GtBox>, Vec<GtBox>) {
    gts.iter().cloned().partition(is_reasonable)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchLabel {
    /// Matched the evaluated ground truth with this index.
    TruePositive(usize),
    FalsePositive,
    /// Overlaps only ignored ground truth.
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// One label per detection, in input order.
    pub labels: Vec<MatchLabel>,
    pub gt_matched: Vec<bool>,
}

/// Indices sorted by descending score; equal scores keep input order.
fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

fn best_overlap(
    det: &BBox,
    gts: &[BBox],
    allowed: impl Fn(usize) -> bool,
    thr: f64,
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, g) in gts.iter().enumerate() {
        if !allowed(j) {
            continue;
        }
        let v = det.iou(g);
        if v >= thr && best.is_none_or(|(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    best.map(|(j, _)| j)
}

/// Greedy matching for one image. Detections are visited by descending score;
/// each takes the highest-IoU unmatched evaluated box at or above `thr`, else
/// is absorbed by the highest-IoU ignored box, else is a false positive.
pub fn match_detections(
    dets: &[(BBox, f64)],
    gts: &[BBox],
    ignore: &[bool],
    thr: f64,
) -> MatchResult {
    assert_eq!(
        gts.len(),
        ignore.len(),
        "one ignore flag per ground-truth box"
    );
    let scores: Vec<f64> = dets.iter().map(|d| d.1).collect();
    let mut labels = vec![MatchLabel::FalsePositive; dets.len()];
    let mut matched = vec![false; gts.len()];
    for i in score_order(&scores) {
        let b = &dets[i].0;
        if let Some(j) = best_overlap(b, gts, |j| !ignore[j] && !matched[j], thr) {
            matched[j] = true;
            labels[i] = MatchLabel::TruePositive(j);
        } else if best_overlap(b, gts, |j| ignore[j], thr).is_some() {
            labels[i] = MatchLabel::Ignored;
        }
    }
    MatchResult {
        labels,
        gt_matched: matched,
    }
}

/// Groups detections by image; images without an entry in `gts` are rejected.
fn per_image(dets: &[Detection], n_images: usize) -> Result<Vec<Vec<(BBox, f64)>>> {
    let mut out = vec![Vec::new(); n_images];
    for d in dets {
        if !d.score.is_finite() {
            return Err(Error::NonFiniteValue(format!(
                "score of detection in image {}",
                d.image
            )));
        }
        let slot = out.get_mut(d.image).ok_or_else(|| {
            Error::BadSpec(format!("detection for image {} of {n_images}", d.image))
        })?;
        slot.push((d.bbox, d.score));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub gt: usize,
    pub tp: usize,
    pub fp: usize,
    pub ignored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissRateCurve {
    pub mr2: f64,
    /// `(fppi, miss rate)` at the log-spaced reference points.
    pub samples: Vec<(f64, f64)>,
    pub counts: MatchCounts,
}

/// Reference FPPI values `10^(-2 + k/4)`, `k = 0..9`.
pub fn fppi_reference() -> [f64; FPPI_POINTS] {
    std::array::from_fn(|k| 10f64.powf(-2.0 + 2.0 * k as f64 / (FPPI_POINTS - 1) as f64))
}

/// Geometric mean of the sampled miss rates, each clamped below at [`MR_FLOOR`].
pub fn log_average(miss_rates: &[f64]) -> f64 {
    let mean =
        miss_rates.iter().map(|m| m.max(MR_FLOOR).ln()).sum::<f64>() / miss_rates.len() as f64;
    mean.exp()
}

/// Samples a miss-rate staircase of `(fppi, mr)` points at the reference FPPI
/// values: the lowest miss rate reached at or below each point, 1 if none.
pub fn sample_curve(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    fppi_reference()
        .into_iter()
        .map(|r| {
            let mr = points
                .iter()
                .filter(|p| p.0 <= r)
                .map(|p| p.1)
                .fold(1.0, f64::min);
            (r, mr)
        })
        .collect()
}

/// MR⁻² over all images. `gts[i]` holds the annotations of image `i`; the
/// reasonable filter decides which boxes are evaluated.
pub fn log_average_miss_rate(
    dets: &[Detection],
    gts: &[Vec<GtBox>],
    thr: f64,
) -> Result<MissRateCurve> {
    let n_images = gts.len();
    if n_images == 0 {
        return Err(Error::NoGroundTruth);
    }
    let grouped = per_image(dets, n_images)?;
    let mut scored: Vec<(f64, bool)> = Vec::new();
    let mut counts = MatchCounts::default();
    for (image_dets, image_gts) in grouped.iter().zip(gts) {
        let boxes: Vec<BBox> = image_gts.iter().map(|g| g.bbox).collect();
        let ignore: Vec<bool> = image_gts.iter().map(|g| !is_reasonable(g)).collect();
        counts.gt += ignore.iter().filter(|&&i| !i).count();
        let m = match_detections(image_dets, &boxes, &ignore, thr);
        for (d, label) in image_dets.iter().zip(&m.labels) {
            match label {
                MatchLabel::TruePositive(_) => {
                    counts.tp += 1;
                    scored.push((d.1, true));
                }
                MatchLabel::FalsePositive => {
                    counts.fp += 1;
                    scored.push((d.1, false));
                }
                MatchLabel::Ignored => counts.ignored += 1,
            }
        }
    }
    if counts.gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![(0.0, 1.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &(score, is_tp)) in scored.iter().enumerate() {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        // a threshold admits every detection with an equal score
        if scored.get(k + 1).is_some_and(|next| next.0 == score) {
            continue;
        }
        points.push((
            fp as f64 / n_images as f64,
            1.0 - tp as f64 / counts.gt as f64,
        ));
    }
    let samples = sample_curve(&points);
    let mrs: Vec<f64> = samples.iter().map(|s| s.1).collect();
    Ok(MissRateCurve {
        mr2: log_average(&mrs),
        samples,
        counts,
    })
}

pub const COCO_IOUS: usize = 10;

pub fn coco_thresholds() -> [f64; COCO_IOUS] {
    std::array::from_fn(|k| 0.5 + 0.05 * k as f64)
}

/// 101-point interpolated AP from a score-ordered TP/FP sequence.
pub fn interpolated_ap(is_tp: &[bool], n_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(is_tp.len());
    let mut recall = Vec::with_capacity(is_tp.len());
    let mut tp = 0usize;
    for (k, &t) in is_tp.iter().enumerate() {
        tp += usize::from(t);
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let total: f64 = (0..=100)
        .map(|i| {
            let r = i as f64 / 100.0;
            let k = recall.partition_point(|&x| x < r);
            precision.get(k).copied().unwrap_or(0.0)
        })
        .sum();
    total / 101.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAp {
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub per_iou: Vec<(f64, f64)>,
}

/// Single-class COCO AP; every ground-truth box is evaluated.
pub fn coco_map(dets: &[Detection], gts: &[Vec<GtBox>]) -> Result<CocoAp> {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    let grouped = per_image(dets, gts.len())?;
    let per_iou: Vec<(f64, f64)> = coco_thresholds()
        .into_iter()
        .map(|thr| {
            let mut scored: Vec<(f64, usize, bool)> = Vec::new();
            for (image, (image_dets, image_gts)) in grouped.iter().zip(gts).enumerate() {
                let boxes: Vec<BBox> = image_gts.iter().map(|g| g.bbox).collect();
                let m = match_detections(image_dets, &boxes, &vec![false; boxes.len()], thr);
                for (d, label) in image_dets.iter().zip(&m.labels) {
                    scored.push((d.1, image, matches!(label, MatchLabel::TruePositive(_))));
                }
            }
            scored.sort_by(|a, b| b.0.total_cmp(&a.0));
            let flags: Vec<bool> = scored.iter().map(|s| s.2).collect();
            (thr, interpolated_ap(&flags, n_gt))
        })
        .collect();
    let map = per_iou.iter().map(|p| p.1).sum::<f64>() / COCO_IOUS as f64;
    Ok(CocoAp {
        map,
        ap50: per_iou[0].1,
        ap75: per_iou[5].1,
        per_iou,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mr2: f64,
    pub fppi_samples: Vec<(f64, f64)>,
    pub ap_per_iou: Vec<(f64, f64)>,
    pub map_coco: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub counts: MatchCounts,
}

pub fn evaluate(dets: &[Detection], gts: &[Vec<GtBox>]) -> Result<EvalReport> {
    let curve = log_average_miss_rate(dets, gts, MR_IOU)?;
    let ap = coco_map(dets, gts)?;
    Ok(EvalReport {
        mr2: curve.mr2,
        fppi_samples: curve.samples,
        ap_per_iou: ap.per_iou,
        map_coco: ap.map,
        ap50: ap.ap50,
        ap75: ap.ap75,
        counts: curve.counts,
    })
}
