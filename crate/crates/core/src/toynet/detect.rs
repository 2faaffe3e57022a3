use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::mea::sum_vars;
use crate::metrics::Detection;
use crate::tensor::{sigmoid, Tape, Tensor, Var};

use super::student::HEAD_OUTPUTS;

/// Anchor side at a level is `ANCHOR_SCALE · stride`.
pub const ANCHOR_SCALE: f64 = 4.0;
pub const LOGIT_CAP: f64 = 20.0;
pub const SCORE_THRESHOLD: f64 = 0.05;
pub const NMS_IOU: f64 = 0.5;
pub const MAX_DETECTIONS: usize = 100;
const MAX_LOG_SCALE: f64 = 4.0;

/// Positive cell of one box: level, flat cell index and regression target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub level: usize,
    pub cell: usize,
    pub offsets: [f64; 4],
}

/// Level whose anchor is closest to the box size in log space; ties go to
/// the finer level.
pub fn assign_level(b: &BBox, strides: &[f64]) -> usize {
    let size = (b.width() * b.height()).sqrt();
    let mut best = (0, f64::INFINITY);
    for (l, &s) in strides.iter().enumerate() {
        let d = (size / (ANCHOR_SCALE * s)).ln().abs();
        if d < best.1 {
            best = (l, d);
        }
    }
    best.0
}

/// One positive cell per box: the cell holding the box centre at its level.
/// A cell claimed by an earlier box keeps that box.
pub fn assign(boxes: &[BBox], levels: &[(usize, usize)], strides: &[f64]) -> Vec<Assignment> {
    let mut out: Vec<Assignment> = Vec::new();
    for b in boxes {
        let l = assign_level(b, strides);
        let (h, w) = levels[l];
        let s = strides[l];
        let (cx, cy) = b.center();
        let i = ((cy / s).floor().max(0.0) as usize).min(h - 1);
        let j = ((cx / s).floor().max(0.0) as usize).min(w - 1);
        let cell = i * w + j;
        if out.iter().any(|a| a.level == l && a.cell == cell) {
            continue;
        }
        let a = ANCHOR_SCALE * s;
        out.push(Assignment {
            level: l,
            cell,
            offsets: [
                cx / s - (j as f64 + 0.5),
                cy / s - (i as f64 + 0.5),
                (b.width() / a).ln(),
                (b.height() / a).ln(),
            ],
        });
    }
    out
}

fn level_extent(tape: &Tape, p: Var) -> Result<(usize, usize)> {
    let (c, h, w) = tape.value(p).chw()?;
    if c != HEAD_OUTPUTS {
        return Err(Error::ShapeMismatch(format!(
            "head emits {c} channels, expected {HEAD_OUTPUTS}"
        )));
    }
    Ok((h, w))
}

/// Objectness BCE over every cell plus L1 on the offsets of positive cells,
/// both divided by `max(1, positives)`.
pub fn detection_loss(
    tape: &mut Tape,
    predictions: &[Var],
    boxes: &[BBox],
    strides: &[f64],
) -> Result<Var> {
    if predictions.len() != strides.len() || predictions.is_empty() {
        return Err(Error::PyramidMismatch(format!(
            "{} prediction levels for {} strides",
            predictions.len(),
            strides.len()
        )));
    }
    let levels = predictions
        .iter()
        .map(|&p| level_extent(tape, p))
        .collect::<Result<Vec<_>>>()?;
    let positives = assign(boxes, &levels, strides);
    let mut parts = Vec::new();
    for (l, (&p, &(h, w))) in predictions.iter().zip(&levels).enumerate() {
        let hw = h * w;
        let mut targets = vec![0.0; hw];
        let mut index = Vec::new();
        let mut wanted = Vec::new();
        for a in positives.iter().filter(|a| a.level == l) {
            targets[a.cell] = 1.0;
            for (k, &o) in a.offsets.iter().enumerate() {
                index.push((1 + k) * hw + a.cell);
                wanted.push(o);
            }
        }
        let all: Vec<usize> = (0..hw).collect();
        let logits = tape.gather(p, &all)?;
        let bce = tape.bce_with_logits(logits, &targets)?;
        parts.push(tape.sum_all(bce));
        if !index.is_empty() {
            let got = tape.gather(p, &index)?;
            let want = tape.constant(Tensor::new(&[wanted.len()], wanted)?);
            let d = tape.sub(got, want)?;
            let d = tape.abs(d);
            parts.push(tape.sum_all(d));
        }
    }
    let total = sum_vars(tape, &parts)?;
    Ok(tape.scale(total, 1.0 / positives.len().max(1) as f64))
}

/// Scored boxes from raw head outputs, clipped to the image.
pub fn decode(
    predictions: &[Tensor],
    strides: &[f64],
    image: usize,
    (ih, iw): (usize, usize),
) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (p, &s) in predictions.iter().zip(strides) {
        let (c, h, w) = p.chw()?;
        if c != HEAD_OUTPUTS {
            return Err(Error::ShapeMismatch(format!("head emits {c} channels")));
        }
        let hw = h * w;
        let d = p.data();
        let a = ANCHOR_SCALE * s;
        for i in 0..h {
            for j in 0..w {
                let cell = i * w + j;
                let score = sigmoid(d[cell]);
                if score <= SCORE_THRESHOLD {
                    continue;
                }
                let cx = (j as f64 + 0.5 + d[hw + cell]) * s;
                let cy = (i as f64 + 0.5 + d[2 * hw + cell]) * s;
                let bw = a * d[3 * hw + cell].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
                let bh = a * d[4 * hw + cell].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
                let x1 = (cx - 0.5 * bw).clamp(0.0, iw as f64);
                let y1 = (cy - 0.5 * bh).clamp(0.0, ih as f64);
                let x2 = (cx + 0.5 * bw).clamp(0.0, iw as f64);
                let y2 = (cy + 0.5 * bh).clamp(0.0, ih as f64);
                if let Some(bbox) = BBox::new(x1, y1, x2, y2) {
                    out.push(Detection { image, bbox, score });
                }
            }
        }
    }
    Ok(out)
}

/// Greedy suppression: keep the best-scoring box, drop others overlapping it
/// by more than `iou`, repeat. Keeps at most [`MAX_DETECTIONS`].
pub fn nms(mut dets: Vec<Detection>, iou: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept.len() == MAX_DETECTIONS {
            break;
        }
        if kept.iter().all(|k| k.bbox.iou(&d.bbox) <= iou) {
            kept.push(d);
        }
    }
    kept
}
