//! Class activation maps.
//!
//! For a global-average-pool + linear head, the Grad-CAM channel weights are
//! proportional to the head weights of the target class, so the map is
//! `relu(sum_k w[class, k] * A_k)`. Each map is divided by its own maximum,
//! and the division is differentiated like any other op: with the maximum
//! held constant instead, a uniform shrink of the raw map looks like progress
//! to every loss that pushes pixels down, and supervised maps decay to zero.

use alloc::vec::Vec;

use crate::data::BinaryMask;
use crate::error::{Error, Result};
use crate::model::{BoundParams, HEAD_WEIGHT};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct SaliencyMap {
    /// `N×1×h×w` at feature resolution.
    pub native: Var,
    /// `N×1×H×W`, bilinear upsampling of `native`.
    pub full: Var,
    pub target_class: Vec<usize>,
}

pub fn compute_saliency(
    tape: &mut Tape,
    params: &BoundParams,
    activations: Var,
    target_class: &[usize],
    full_size: (usize, usize),
) -> Result<SaliencyMap> {
    let head = params.get(HEAD_WEIGHT)?;
    let classes = tape.shape(head)[0];
    if let Some(&bad) = target_class.iter().find(|&&c| c >= classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes,
        });
    }
    let weights = tape.select_rows(head, target_class)?;
    let raw = tape.weighted_channel_sum(activations, weights)?;
    let raw = tape.relu(raw);
    let native = tape.max_normalize(raw)?;
    let full = tape.upsample_bilinear(native, full_size.0, full_size.1)?;
    Ok(SaliencyMap {
        native,
        full,
        target_class: target_class.to_vec(),
    })
}

/// Threshold one `H×W` map: 1 where `value >= threshold`.
pub fn binarize(values: &[f64], height: usize, width: usize, threshold: f64) -> Result<BinaryMask> {
    BinaryMask::from_bits(
        height,
        width,
        values.iter().map(|&v| (v >= threshold) as u8).collect(),
    )
}

/// Threshold every map of an `N×1×H×W` tensor.
pub fn binarize_batch(maps: &Tensor, threshold: f64) -> Result<Vec<BinaryMask>> {
    let s = maps.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape("binarize", alloc::format!("expected N×1×H×W, got {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    maps.data()
        .chunks_exact((h * w).max(1))
        .map(|m| binarize(m, h, w, threshold))
        .collect()
}
