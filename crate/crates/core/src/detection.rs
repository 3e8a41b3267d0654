//! Detection heads, box decoding, training losses and average precision.
//!
//! Every cell carries one anchor at its centre with unit extent and zero yaw.
//! Regression channels are `(dx, dy, z, ln l, ln w, ln h, yaw)` relative to
//! that anchor; classification channels are `(background, foreground)` logits.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::geometry::{nms_rotated, normalize_angle, rotated_iou_bev, score_order, Box7};
use crate::gridcore::params::{Conv, ParamStore};
use crate::gridcore::tape::{focal_term, smooth_l1_term, Tape, Var};
use crate::gridcore::{conv2d, sigmoid, ConvGeom, ConvParams, FeatureGrid};
use crate::scenario::GridSpec;

pub const REG_CHANNELS: usize = 7;
pub const CLS_CHANNELS: usize = 2;
/// Log-extents are clamped to this magnitude when decoding.
pub const MAX_LOG_EXTENT: f64 = 5.0;
/// Foreground bias so the initial foreground probability is 0.01.
pub const FOREGROUND_PRIOR_BIAS: f64 = -4.595_119_850_134_589;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub regression: FeatureGrid,
    pub classification: FeatureGrid,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Box7,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionHead {
    pub reg: Conv,
    pub cls: Conv,
}

impl DetectionHead {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let reg = Conv::xavier(store, &format!("{name}.reg"), ConvGeom::same(REG_CHANNELS, channels, 1), rng);
        let cls = Conv::xavier(store, &format!("{name}.cls"), ConvGeom::same(CLS_CHANNELS, channels, 1), rng);
        store.get_mut(cls.bias).data = vec![0.0, FOREGROUND_PRIOR_BIAS];
        Self { reg, cls }
    }

    pub fn forward_t(&self, tape: &mut Tape, store: &ParamStore, fused: Var) -> Result<(Var, Var)> {
        Ok((tape.conv(fused, &self.reg, store)?, tape.conv(fused, &self.cls, store)?))
    }

    /// One-channel conv whose sigmoid equals the foreground softmax probability.
    pub fn confidence_generator(&self, store: &ParamStore) -> ConvParams {
        foreground_margin(&self.cls.params(store))
    }
}

/// `fg − bg` of a two-class conv as a single-channel conv.
pub fn foreground_margin(cls: &ConvParams) -> ConvParams {
    let g = cls.geom;
    let per_out = g.weight_len() / g.out_channels;
    let weight = (0..per_out).map(|i| cls.weight[per_out + i] - cls.weight[i]).collect();
    ConvParams {
        geom: ConvGeom { out_channels: 1, ..g },
        weight,
        bias: vec![cls.bias[1] - cls.bias[0]],
    }
}

pub fn decode_heads(fused: &FeatureGrid, reg: &ConvParams, cls: &ConvParams) -> Result<HeadOutput> {
    if reg.geom.out_channels != REG_CHANNELS || cls.geom.out_channels != CLS_CHANNELS {
        return Err(shape_err!(
            "decoders give {} and {} channels, expected {REG_CHANNELS} and {CLS_CHANNELS}",
            reg.geom.out_channels,
            cls.geom.out_channels
        ));
    }
    Ok(HeadOutput {
        regression: conv2d(fused, reg)?,
        classification: conv2d(fused, cls)?,
    })
}

/// Box encoded at cell `(row, col)`.
pub fn decode_cell(reg: &[f64], spec: &GridSpec, row: usize, col: usize) -> Result<Box7> {
    if reg.len() != REG_CHANNELS {
        return Err(shape_err!("regression column of {} values", reg.len()));
    }
    let (x, y) = spec.cell_center(row, col);
    let ext = |v: f64| v.clamp(-MAX_LOG_EXTENT, MAX_LOG_EXTENT).exp();
    Box7::new(x + reg[0], y + reg[1], reg[2], ext(reg[3]), ext(reg[4]), ext(reg[5]), normalize_angle(reg[6]))
}

/// Inverse of [`decode_cell`] for a box whose centre falls in that cell.
pub fn encode_cell(b: &Box7, spec: &GridSpec, row: usize, col: usize) -> [f64; REG_CHANNELS] {
    let (x, y) = spec.cell_center(row, col);
    [
        b.cx - x,
        b.cy - y,
        b.cz,
        b.length.ln(),
        b.width.ln(),
        b.height.ln(),
        normalize_angle(b.yaw),
    ]
}

/// Candidates above `score_threshold`, rotated NMS, highest score first.
pub fn extract_boxes(
    out: &HeadOutput,
    spec: &GridSpec,
    score_threshold: f64,
    nms_threshold: f64,
) -> Result<Vec<Detection>> {
    for t in [score_threshold, nms_threshold] {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Precondition(format!("threshold {t} outside [0, 1]")));
        }
    }
    let (reg, cls) = (&out.regression, &out.classification);
    if reg.channels() != REG_CHANNELS || cls.channels() != CLS_CHANNELS {
        return Err(shape_err!("head output channels {} / {}", reg.channels(), cls.channels()));
    }
    if (reg.height(), reg.width()) != (spec.height(), spec.width())
        || (cls.height(), cls.width()) != (spec.height(), spec.width())
    {
        return Err(shape_err!("head output {:?} does not match the grid", reg.shape()));
    }
    let mut boxes = Vec::new();
    let mut scores = Vec::new();
    for r in 0..reg.height() {
        for c in 0..reg.width() {
            let score = sigmoid(cls.get(1, r, c) - cls.get(0, r, c));
            if score >= score_threshold && score > 0.0 {
                boxes.push(decode_cell(&reg.column(r, c), spec, r, c)?);
                scores.push(score);
            }
        }
    }
    let keep = nms_rotated(&boxes, &scores, nms_threshold)?;
    Ok(keep
        .into_iter()
        .map(|i| Detection {
            bbox: boxes[i],
            score: scores[i],
        })
        .collect())
}

/// Per-cell training targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub labels: Vec<bool>,
    pub regression: FeatureGrid,
}

impl Targets {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&b| b).count()
    }
}

/// A cell is foreground when its centre lies inside a box; the first such box wins.
pub fn assign_targets(gts: &[Box7], spec: &GridSpec) -> Targets {
    let (h, w) = (spec.height(), spec.width());
    let mut labels = vec![false; h * w];
    let mut regression = FeatureGrid::zeros(REG_CHANNELS, h, w);
    for r in 0..h {
        for c in 0..w {
            let (x, y) = spec.cell_center(r, c);
            if let Some(b) = gts.iter().find(|b| b.contains_bev(x, y)) {
                labels[r * w + c] = true;
                for (k, v) in encode_cell(b, spec, r, c).into_iter().enumerate() {
                    regression.set(k, r, c, v);
                }
            }
        }
    }
    Targets { labels, regression }
}

/// Mean smooth-L1 over elements.
pub fn smooth_l1(pred: &[f64], target: &[f64], beta: f64) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(shape_err!("{} predictions vs {} targets", pred.len(), target.len()));
    }
    if !(beta > 0.0) {
        return Err(Error::Precondition(format!("beta must be positive, got {beta}")));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok(pred.iter().zip(target).map(|(p, t)| smooth_l1_term(p - t, beta)).sum::<f64>() / pred.len() as f64)
}

/// Mean focal loss over cells with two-way softmax probabilities.
pub fn focal_loss(logits: &FeatureGrid, labels: &[bool], alpha: f64, gamma: f64) -> Result<f64> {
    if logits.channels() != CLS_CHANNELS || labels.len() != logits.plane_len() {
        return Err(shape_err!("focal expects (2,H,W) logits and H·W labels"));
    }
    if !(0.0..=1.0).contains(&alpha) || !(gamma >= 0.0) {
        return Err(Error::Precondition(format!("alpha {alpha} / gamma {gamma} out of range")));
    }
    let n = logits.plane_len();
    let d = logits.data();
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &fg)| {
            let z = d[n + i] - d[i];
            focal_term(if fg { z } else { -z }, if fg { alpha } else { 1.0 - alpha }, gamma).0
        })
        .sum();
    Ok(total / n as f64)
}

/// Loss weights and constants used in training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub beta: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub reg_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 1.0 / 9.0,
            alpha: 0.25,
            gamma: 2.0,
            reg_weight: 1.0,
        }
    }
}

/// `focal + w · smoothL1(foreground)` on the tape.
pub fn detection_loss_t(tape: &mut Tape, reg: Var, cls: Var, targets: &Targets, cfg: &LossConfig) -> Result<Var> {
    let labels = std::rc::Rc::new(targets.labels.clone());
    let f = tape.focal(cls, labels.clone(), cfg.alpha, cfg.gamma)?;
    let r = tape.smooth_l1(reg, std::rc::Rc::new(targets.regression.clone()), labels, cfg.beta)?;
    let r = tape.affine(r, cfg.reg_weight, 0.0);
    tape.add(f, r)
}

/// Area under the all-point interpolated precision-recall curve.
///
/// Without ground truth the result is 1 for an empty detection list and 0 otherwise.
pub fn evaluate_ap(dets: &[Detection], gts: &[Box7], iou_threshold: f64) -> Result<f64> {
    evaluate_ap_frames(&[(dets, gts)], iou_threshold)
}

/// AP over several frames: one global ranking, matches only within a frame.
pub fn evaluate_ap_frames(frames: &[(&[Detection], &[Box7])], iou_threshold: f64) -> Result<f64> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::Precondition(format!("IoU threshold {iou_threshold} outside (0, 1]")));
    }
    let total_gt: usize = frames.iter().map(|f| f.1.len()).sum();
    let total_det: usize = frames.iter().map(|f| f.0.len()).sum();
    if total_gt == 0 {
        return Ok(if total_det == 0 { 1.0 } else { 0.0 });
    }
    let flat: Vec<(usize, &Detection)> = frames
        .iter()
        .enumerate()
        .flat_map(|(i, f)| f.0.iter().map(move |d| (i, d)))
        .collect();
    let scores: Vec<f64> = flat.iter().map(|(_, d)| d.score).collect();
    let mut matched: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.1.len()]).collect();
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(flat.len());
    for (rank, i) in score_order(&scores).into_iter().enumerate() {
        let (frame, d) = flat[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in frames[frame].1.iter().enumerate() {
            if matched[frame][g] {
                continue;
            }
            let iou = rotated_iou_bev(&d.bbox, gt)?;
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            matched[frame][g] = true;
            tp += 1;
        }
        curve.push((tp as f64 / total_gt as f64, tp as f64 / (rank + 1) as f64));
    }
    // Precision envelope: running maximum from the right.
    let mut envelope = 0.0f64;
    for point in curve.iter_mut().rev() {
        envelope = envelope.max(point.1);
        point.1 = envelope;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &(r, p) in &curve {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    Ok(ap)
}

/// Detections as CSV rows `frame,score,cx,cy,cz,length,width,height,yaw`.
pub fn detections_csv(frame: u64, dets: &[Detection]) -> String {
    let mut s = String::new();
    for d in dets {
        let b = d.bbox;
        let _ = writeln!(
            s,
            "{frame},{},{},{},{},{},{},{},{}",
            d.score, b.cx, b.cy, b.cz, b.length, b.width, b.height, b.yaw
        );
    }
    s
}

pub const DETECTIONS_CSV_HEADER: &str = "frame,score,cx,cy,cz,length,width,height,yaw";
