//! Annotation noise: boundary inaccuracy via square-element morphology and
//! incompleteness via whole-region dropout.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{AnnotationMask, BinaryMask};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSpec {
    /// Pixels to grow (positive) or shrink (negative) every annotated region by.
    pub boundary_radius: i32,
    /// Chance of removing each connected annotated region.
    pub drop_probability: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec {
            boundary_radius: 0,
            drop_probability: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err(Error::InvalidArgument(format!(
                "drop probability {} outside [0, 1]",
                self.drop_probability
            )));
        }
        Ok(())
    }
}

pub(crate) fn sample_seed(seed: u64, index: u64) -> u64 {
    rng::derive(seed, rng::tags::NOISE, index)
}

/// 1-D running max/min along rows (`horizontal`) or columns with window
/// `2r+1`, ignoring out-of-bounds pixels.
fn sweep(mask: &BinaryMask, radius: usize, horizontal: bool, grow: bool) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    BinaryMask::from_fn(h, w, |y, x| {
        let (pos, len) = if horizontal { (x, w) } else { (y, h) };
        let lo = pos.saturating_sub(radius);
        let hi = (pos + radius).min(len - 1);
        let mut probe = (lo..=hi).map(|p| if horizontal { mask.get(y, p) } else { mask.get(p, x) });
        if grow {
            probe.any(|b| b)
        } else {
            probe.all(|b| b)
        }
    })
}

/// Dilation by a `(2r+1)×(2r+1)` square, clipped to the image.
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 || mask.bits().is_empty() {
        return mask.clone();
    }
    sweep(&sweep(mask, radius, true, true), radius, false, true)
}

/// Erosion by a `(2r+1)×(2r+1)` square; pixels outside the image impose no
/// constraint.
pub fn erode(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 || mask.bits().is_empty() {
        return mask.clone();
    }
    sweep(&sweep(mask, radius, true, false), radius, false, false)
}

/// 8-connected regions as lists of flat pixel indices, ordered by each
/// region's first pixel in raster order.
pub fn connected_regions(mask: &BinaryMask) -> Vec<Vec<usize>> {
    let (h, w) = (mask.height(), mask.width());
    let mut seen = vec![false; h * w];
    let mut regions = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if seen[start] || mask.bits()[start] == 0 {
            continue;
        }
        let mut region = Vec::new();
        seen[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            region.push(p);
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if !seen[q] && mask.bits()[q] != 0 {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        region.sort_unstable();
        regions.push(region);
    }
    regions
}

fn perturb(mask: &BinaryMask, spec: &NoiseSpec, rng: &mut impl Rng) -> BinaryMask {
    let r = spec.boundary_radius.unsigned_abs() as usize;
    let mut out = if spec.boundary_radius >= 0 {
        dilate(mask, r)
    } else {
        erode(mask, r)
    };
    let width = out.width();
    for region in connected_regions(&out.clone()) {
        if rng.gen::<f64>() < spec.drop_probability {
            for p in region {
                out.set(p / width, p % width, false);
            }
        }
    }
    out
}

/// Noisy annotation from clean masks: boundary change, then region dropout,
/// first on the positive then on the negative mask, and finally removal of
/// negative pixels that overlap the positive mask.
pub fn corrupt_annotations(clean: &AnnotationMask, spec: &NoiseSpec) -> Result<AnnotationMask> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, rng::tags::NOISE, u64::MAX);
    let positive = perturb(&clean.positive, spec, &mut rng);
    let negative = perturb(&clean.negative, spec, &mut rng).minus(&positive);
    Ok(AnnotationMask {
        positive,
        negative,
        clean: clean.clean.clone(),
    })
}
