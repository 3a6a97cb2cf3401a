//! Explanation losses and the joint objective.
//!
//! The robust loss for one sample is
//!
//! ```text
//! max(0, mean_{H != 0} |tanh(gamma (M - a)) - H| - alpha) + mean_{H != 0} |M - h(F, C)|
//! ```
//!
//! with `H = F - C`, `a` the adaptive threshold and `h` an imputation of the
//! masks. Only labeled pixels contribute. The baselines are the plain L1
//! distance to the positive mask over all pixels and binary cross-entropy
//! over labeled pixels.

use alloc::format;
use alloc::vec::Vec;

use crate::data::AnnotationMask;
use crate::error::{Error, Result};
use crate::imputation::ImputerDepth;
use crate::tensor::{Tape, Tensor, Var};

/// Clipping applied to saliency before taking logarithms in the BCE loss.
pub const BCE_EPSILON: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Supervision {
    /// Prediction loss only.
    None,
    /// L1 distance between the map and the positive mask.
    Gradia,
    /// BCE against positive/negative masks.
    Haics,
    /// Robust loss with Gaussian imputation.
    ResGaussian,
    /// Robust loss with learnable imputation.
    ResLearnable,
}

impl Supervision {
    pub const ALL: [Supervision; 5] = [
        Supervision::None,
        Supervision::Gradia,
        Supervision::Haics,
        Supervision::ResGaussian,
        Supervision::ResLearnable,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Supervision::None => "none",
            Supervision::Gradia => "gradia",
            Supervision::Haics => "haics",
            Supervision::ResGaussian => "res-g",
            Supervision::ResLearnable => "res-l",
        }
    }

    pub fn is_robust(self) -> bool {
        matches!(self, Supervision::ResGaussian | Supervision::ResLearnable)
    }
}

impl core::str::FromStr for Supervision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Supervision::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown supervision variant {s:?}")))
    }
}

impl core::fmt::Display for Supervision {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustLossConfig {
    /// Hinge slack, in `[0, 2]`.
    pub alpha: f64,
    /// Slope of the tanh surrogate.
    pub gamma: f64,
    /// Weight of the explanation loss in the joint objective.
    pub lambda_exp: f64,
    pub variant: Supervision,
    pub gaussian_kernel: usize,
    pub gaussian_sigma: f64,
    pub imputer_depth: ImputerDepth,
}

impl Default for RobustLossConfig {
    fn default() -> Self {
        RobustLossConfig {
            alpha: 0.01,
            gamma: 50.0,
            lambda_exp: 1.0,
            variant: Supervision::ResLearnable,
            gaussian_kernel: 5,
            gaussian_sigma: 1.5,
            imputer_depth: ImputerDepth::Shallow,
        }
    }
}

impl RobustLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=2.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!("alpha {} outside [0, 2]", self.alpha)));
        }
        if self.gamma.is_nan() || self.gamma <= 0.0 {
            return Err(Error::InvalidArgument(format!("gamma {} must be positive", self.gamma)));
        }
        if self.lambda_exp.is_nan() || self.lambda_exp < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "explanation weight {} must be nonnegative",
                self.lambda_exp
            )));
        }
        if self.gaussian_kernel.is_multiple_of(2) || self.gaussian_sigma.is_nan() || self.gaussian_sigma <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "Gaussian kernel {} / sigma {} invalid",
                self.gaussian_kernel, self.gaussian_sigma
            )));
        }
        Ok(())
    }
}

/// Annotation masks of a batch as constant `N×1×h×w` tensors.
#[derive(Clone, Debug)]
pub struct LabelLayer {
    pub positive: Tensor,
    pub negative: Tensor,
    /// `F - C`.
    pub signed: Tensor,
    /// `1(F - C != 0)`.
    pub labeled: Tensor,
    /// Reciprocal labeled-pixel count per sample (0 when none are labeled).
    pub inv_counts: Vec<f64>,
}

impl LabelLayer {
    fn from_planes(n: usize, h: usize, w: usize, pos: Vec<f64>, neg: Vec<f64>) -> Result<Self> {
        let shape = alloc::vec![n, 1, h, w];
        let signed: Vec<f64> = pos.iter().zip(&neg).map(|(p, c)| p - c).collect();
        let labeled: Vec<f64> = signed.iter().map(|&s| (s != 0.0) as u8 as f64).collect();
        let inv_counts = labeled
            .chunks((h * w).max(1))
            .map(|c| {
                let k: f64 = c.iter().sum();
                if k > 0.0 {
                    1.0 / k
                } else {
                    0.0
                }
            })
            .collect();
        Ok(LabelLayer {
            positive: Tensor::new(shape.clone(), pos)?,
            negative: Tensor::new(shape.clone(), neg)?,
            signed: Tensor::new(shape.clone(), signed)?,
            labeled: Tensor::new(shape, labeled)?,
            inv_counts,
        })
    }

    /// Masks at their own resolution.
    pub fn full(masks: &[&AnnotationMask]) -> Result<Self> {
        let (h, w) = dims(masks)?;
        let mut pos = Vec::with_capacity(masks.len() * h * w);
        let mut neg = Vec::with_capacity(masks.len() * h * w);
        for m in masks {
            pos.extend(m.positive.bits().iter().map(|&b| b as f64));
            neg.extend(m.negative.bits().iter().map(|&b| b as f64));
        }
        Self::from_planes(masks.len(), h, w, pos, neg)
    }

    /// Masks reduced to `size` by blocks: a cell is positive if any of its
    /// pixels is, negative if any pixel is negative and none positive.
    pub fn pooled(masks: &[&AnnotationMask], size: (usize, usize)) -> Result<Self> {
        let (h, w) = dims(masks)?;
        let (ph, pw) = size;
        if ph == 0 || pw == 0 || h % ph != 0 || w % pw != 0 {
            return Err(Error::shape(
                "label pooling",
                format!("{h}×{w} masks do not tile into {ph}×{pw}"),
            ));
        }
        let (by, bx) = (h / ph, w / pw);
        let mut pos = Vec::with_capacity(masks.len() * ph * pw);
        let mut neg = Vec::with_capacity(masks.len() * ph * pw);
        for m in masks {
            for cy in 0..ph {
                for cx in 0..pw {
                    let cell = (cy * by..(cy + 1) * by)
                        .flat_map(|y| (cx * bx..(cx + 1) * bx).map(move |x| (y, x)));
                    let (mut p, mut c) = (false, false);
                    for (y, x) in cell {
                        p |= m.positive.get(y, x);
                        c |= m.negative.get(y, x);
                    }
                    pos.push(p as u8 as f64);
                    neg.push((c && !p) as u8 as f64);
                }
            }
        }
        Self::from_planes(masks.len(), ph, pw, pos, neg)
    }

    pub fn batch_size(&self) -> usize {
        self.inv_counts.len()
    }

    pub fn total_labeled(&self) -> usize {
        self.labeled.data().iter().filter(|&&v| v != 0.0).count()
    }
}

fn dims(masks: &[&AnnotationMask]) -> Result<(usize, usize)> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty mask batch".into()))?;
    let (h, w) = (first.height(), first.width());
    if masks.iter().any(|m| (m.height(), m.width()) != (h, w)) {
        return Err(Error::shape("label layer", "masks differ in size"));
    }
    Ok((h, w))
}

fn check_map(tape: &Tape, map: Var, layer: &LabelLayer, op: &'static str) -> Result<()> {
    if tape.shape(map) != layer.labeled.shape() {
        return Err(Error::shape(
            op,
            format!("map {:?} vs labels {:?}", tape.shape(map), layer.labeled.shape()),
        ));
    }
    Ok(())
}

/// Per-sample terms and the batch mean of the robust loss.
#[derive(Clone, Copy, Debug)]
pub struct RobustLoss {
    /// `N`, slack hinge on the tanh-binarised map.
    pub hinge: Var,
    /// `N`, mean absolute distance to the imputed target.
    pub distance: Var,
    /// Scalar batch mean of `hinge + distance`.
    pub total: Var,
}

/// Mean over labeled pixels of `|values|`, per sample. Unlabeled entries
/// are zeroed before the abs so they never sit near its kink.
fn labeled_mean_abs(tape: &mut Tape, diff: Var, layer: &LabelLayer) -> Result<Var> {
    let mask = tape.constant(layer.labeled.clone());
    let gated = tape.mul(diff, mask)?;
    let a = tape.abs(gated);
    let s = tape.sum_per_sample(a)?;
    tape.scale_rows(s, &layer.inv_counts)
}

/// Slack hinge on the tanh surrogate, per sample. `thresholds` holds one
/// value per sample (a shared threshold is simply repeated).
pub fn res_hinge(
    tape: &mut Tape,
    map: Var,
    labels: &LabelLayer,
    thresholds: &[f64],
    alpha: f64,
    gamma: f64,
) -> Result<Var> {
    check_map(tape, map, labels, "res_hinge")?;
    if thresholds.len() != labels.batch_size() {
        return Err(Error::shape(
            "res_hinge",
            format!("{} thresholds for {} samples", thresholds.len(), labels.batch_size()),
        ));
    }
    let shape = labels.labeled.shape().to_vec();
    let per = labels.labeled.len() / thresholds.len().max(1);
    let a = tape.constant(Tensor::from_fn(&shape, |i| thresholds[i / per]));
    let z = tape.sub(map, a)?;
    let z = tape.mul_scalar(z, gamma);
    let soft = tape.tanh(z);
    // |tanh - s| with s = +-1 never changes sign, so it is 1 - s tanh
    let target = tape.constant(labels.signed.clone());
    let agree = tape.mul(soft, target)?;
    let agree = tape.mul_scalar(agree, -1.0);
    let gap = tape.add_scalar(agree, 1.0);
    let mask = tape.constant(labels.labeled.clone());
    let gap = tape.mul(gap, mask)?;
    let mismatch = tape.sum_per_sample(gap)?;
    let mismatch = tape.scale_rows(mismatch, &labels.inv_counts)?;
    let slack = tape.add_scalar(mismatch, -alpha);
    Ok(tape.relu(slack))
}

/// The robust explanation loss.
///
/// `hinge_map` is compared against `hinge_labels` through the tanh surrogate;
/// `distance_map` is compared with `target` (the imputed masks) over the
/// labeled pixels of `distance_labels`. The two pairs may live at different
/// resolutions.
#[allow(clippy::too_many_arguments)]
pub fn res_loss(
    tape: &mut Tape,
    hinge_map: Var,
    hinge_labels: &LabelLayer,
    distance_map: Var,
    target: Var,
    distance_labels: &LabelLayer,
    thresholds: &[f64],
    config: &RobustLossConfig,
) -> Result<RobustLoss> {
    let hinge = res_hinge(tape, hinge_map, hinge_labels, thresholds, config.alpha, config.gamma)?;
    check_map(tape, distance_map, distance_labels, "res_loss")?;
    if tape.shape(target) != tape.shape(distance_map) {
        return Err(Error::shape(
            "res_loss",
            format!("target {:?} vs map {:?}", tape.shape(target), tape.shape(distance_map)),
        ));
    }
    let diff = tape.sub(distance_map, target)?;
    let distance = labeled_mean_abs(tape, diff, distance_labels)?;
    let per_sample = tape.add(hinge, distance)?;
    let total = tape.mean(per_sample);
    Ok(RobustLoss {
        hinge,
        distance,
        total,
    })
}

/// Hinge with the exact sign binarisation `M >= a -> 1, else -1`, per sample.
pub fn exact_hinge(map: &[f64], signed: &[f64], threshold: f64, alpha: f64) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (&m, &h) in map.iter().zip(signed) {
        if h != 0.0 {
            let binary = if m >= threshold { 1.0 } else { -1.0 };
            total += (binary - h).abs();
            count += 1;
        }
    }
    if count == 0 {
        return 0.0;
    }
    (total / count as f64 - alpha).max(0.0)
}

/// Mean over all pixels of `|M - F|`.
pub fn gradia_loss(tape: &mut Tape, map: Var, labels: &LabelLayer) -> Result<Var> {
    check_map(tape, map, labels, "gradia_loss")?;
    let f = tape.constant(labels.positive.clone());
    let d = tape.sub(map, f)?;
    let d = tape.abs(d);
    Ok(tape.mean(d))
}

/// Binary cross-entropy over the labeled pixels of the batch, targets 1 on
/// positive and 0 on negative pixels, with `M` clipped to `[eps, 1 - eps]`.
pub fn haics_loss(tape: &mut Tape, map: Var, labels: &LabelLayer) -> Result<Var> {
    check_map(tape, map, labels, "haics_loss")?;
    let count = labels.total_labeled();
    let m = tape.clamp(map, BCE_EPSILON, 1.0 - BCE_EPSILON);
    let log_m = tape.ln(m);
    let one_minus = tape.mul_scalar(m, -1.0);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let log_1m = tape.ln(one_minus);
    let f = tape.constant(labels.positive.clone());
    let c = tape.constant(labels.negative.clone());
    let pos = tape.mul(f, log_m)?;
    let neg = tape.mul(c, log_1m)?;
    let ll = tape.add(pos, neg)?;
    let s = tape.sum(ll);
    let scale = if count == 0 { 0.0 } else { -1.0 / count as f64 };
    Ok(tape.mul_scalar(s, scale))
}

/// `pred + lambda * exp`.
pub fn total_objective(tape: &mut Tape, pred: Var, exp: Var, lambda_exp: f64) -> Result<Var> {
    let weighted = tape.mul_scalar(exp, lambda_exp);
    tape.add(pred, weighted)
}

#[cfg(test)]
mod tests;
