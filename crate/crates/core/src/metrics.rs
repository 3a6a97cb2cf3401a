//! Explanation quality: IoU against the positive mask, and precision, recall
//! and F1 over labeled pixels.

use alloc::format;
use alloc::vec::Vec;

use crate::data::{AnnotationMask, BinaryMask};
use crate::error::{Error, Result};
use crate::saliency::binarize;

/// Threshold used to binarise saliency for evaluation.
pub const EVAL_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ExplanationScore {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ExplanationScore {
    /// Unweighted mean of each field; all zeros for an empty slice.
    pub fn mean(scores: &[ExplanationScore]) -> ExplanationScore {
        if scores.is_empty() {
            return ExplanationScore::default();
        }
        let n = scores.len() as f64;
        let mut m = ExplanationScore::default();
        for s in scores {
            m.iou += s.iou;
            m.precision += s.precision;
            m.recall += s.recall;
            m.f1 += s.f1;
        }
        m.iou /= n;
        m.precision /= n;
        m.recall /= n;
        m.f1 /= n;
        m
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn check_size(op: &'static str, a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if !a.same_size(b) {
        return Err(Error::shape(
            op,
            format!("{}×{} vs {}×{}", a.height(), a.width(), b.height(), b.width()),
        ));
    }
    Ok(())
}

/// `|pred ∧ truth| / |pred ∨ truth|`, 1 when both are empty.
pub fn iou(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    check_size("iou", pred, truth)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.bits().iter().zip(truth.bits()) {
        inter += (p != 0 && t != 0) as usize;
        union += (p != 0 || t != 0) as usize;
    }
    Ok(if union == 0 { 1.0 } else { ratio(inter, union) })
}

/// Precision, recall and F1 with positive pixels as ground-truth positives
/// and negative pixels as ground-truth negatives. Unlabeled pixels are ignored.
pub fn prf1(pred: &BinaryMask, mask: &AnnotationMask) -> Result<(f64, f64, f64)> {
    check_size("prf1", pred, &mask.positive)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for ((&p, &f), &c) in pred.bits().iter().zip(mask.positive.bits()).zip(mask.negative.bits()) {
        match (p != 0, f != 0, c != 0) {
            (true, true, _) => tp += 1,
            (false, true, _) => fn_ += 1,
            (true, false, true) => fp += 1,
            _ => {}
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok((precision, recall, f1))
}

pub fn score(pred: &BinaryMask, mask: &AnnotationMask) -> Result<ExplanationScore> {
    let iou = iou(pred, &mask.positive)?;
    let (precision, recall, f1) = prf1(pred, mask)?;
    Ok(ExplanationScore {
        iou,
        precision,
        recall,
        f1,
    })
}

/// Per-sample scores of `N` row-major `H×W` maps binarised at `threshold`.
pub fn score_maps(
    maps: &[f64],
    masks: &[&AnnotationMask],
    threshold: f64,
) -> Result<Vec<ExplanationScore>> {
    let Some(first) = masks.first() else {
        return Ok(Vec::new());
    };
    let (h, w) = (first.height(), first.width());
    if maps.len() != masks.len() * h * w {
        return Err(Error::shape(
            "evaluate_explanations",
            format!("{} values for {} masks of {h}×{w}", maps.len(), masks.len()),
        ));
    }
    maps.chunks_exact((h * w).max(1))
        .zip(masks)
        .map(|(m, mask)| score(&binarize(m, h, w, threshold)?, mask))
        .collect()
}

/// Mean score of a batch of maps.
pub fn evaluate_explanations(
    maps: &[f64],
    masks: &[&AnnotationMask],
    threshold: f64,
) -> Result<ExplanationScore> {
    Ok(ExplanationScore::mean(&score_maps(maps, masks, threshold)?))
}
