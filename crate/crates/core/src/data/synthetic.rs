//! Synthetic classification images with exact explanation masks.
//!
//! Each image holds one class-discriminative shape (disk, cross, ring or
//! triangle for classes 0..4) plus square distractors that appear in every
//! class. The clean positive mask is the discriminative shape, the clean
//! negative mask the distractors.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::{AnnotationMask, BinaryMask, Dataset, Sample};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub n: usize,
    pub image_size: usize,
    pub class_count: usize,
    pub seed: u64,
    pub distractors: usize,
    /// Upper bound of the uniform background noise.
    pub background_noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n: 500,
            image_size: 64,
            class_count: 2,
            seed: 0,
            distractors: 2,
            background_noise: 0.25,
        }
    }
}

fn shape_contains(class: usize, dy: f64, dx: f64, r: f64) -> bool {
    let thick = (r / 3.0).max(1.0);
    match class {
        0 => dy * dy + dx * dx <= r * r,
        1 => (dy.abs() <= thick && dx.abs() <= r) || (dx.abs() <= thick && dy.abs() <= r),
        2 => {
            let m = dy.abs().max(dx.abs());
            m <= r && m > r - thick
        }
        _ => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
    }
}

fn quantize(v: f64) -> f64 {
    libm::round(v.clamp(0.0, 1.0) * 255.0) / 255.0
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Dataset> {
    let size = config.image_size;
    if size < 32 {
        return Err(Error::InvalidArgument(format!(
            "image size {size} below the minimum of 32"
        )));
    }
    if !(2..=4).contains(&config.class_count) {
        return Err(Error::InvalidArgument(format!(
            "class count {} outside 2..=4",
            config.class_count
        )));
    }
    let samples = (0..config.n)
        .map(|i| make_sample(config, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples })
}

fn make_sample(config: &SyntheticConfig, index: usize) -> Result<Sample> {
    let size = config.image_size;
    let s = size as f64;
    let label = index % config.class_count;
    let mut rng = rng::stream(config.seed, rng::tags::SYNTHETIC, index as u64);

    let mut pixels: Vec<f64> = (0..size * size)
        .map(|_| rng.gen_range(0.0..=config.background_noise))
        .collect();

    let radius = rng.gen_range(s / 10.0..=s / 6.0);
    let margin = libm::ceil(radius) as usize + 1;
    let cy = rng.gen_range(margin..size - margin) as f64;
    let cx = rng.gen_range(margin..size - margin) as f64;
    let intensity = rng.gen_range(0.6..=1.0);
    let positive = BinaryMask::from_fn(size, size, |y, x| {
        shape_contains(label, y as f64 - cy, x as f64 - cx, radius)
    });

    // Distractors avoid the shape (with a 2-pixel gap) and each other when a
    // free spot is found within a bounded number of attempts.
    let mut occupied = super::dilate(&positive, 2);
    let mut negative = BinaryMask::empty(size, size);
    for _ in 0..config.distractors {
        let half = libm::round(rng.gen_range(s / 16.0..=s / 10.0)).max(1.0) as usize;
        let mut placed = None;
        for _ in 0..50 {
            let y = rng.gen_range(half..size - half);
            let x = rng.gen_range(half..size - half);
            placed = Some((y, x));
            let clash = (y - half..=y + half)
                .any(|yy| (x - half..=x + half).any(|xx| occupied.get(yy, xx)));
            if !clash {
                break;
            }
        }
        let (y, x) = placed.expect("at least one placement attempt");
        let v = rng.gen_range(0.6..=1.0);
        for yy in y - half..=y + half {
            for xx in x - half..=x + half {
                negative.set(yy, xx, true);
                pixels[yy * size + xx] = v;
            }
        }
        for yy in (y - half).saturating_sub(2)..=(y + half + 2).min(size - 1) {
            for xx in (x - half).saturating_sub(2)..=(x + half + 2).min(size - 1) {
                occupied.set(yy, xx, true);
            }
        }
    }
    for (p, &on) in pixels.iter_mut().zip(positive.bits()) {
        if on != 0 {
            *p = intensity;
        }
    }
    let negative = negative.minus(&positive);
    let data: Vec<f64> = pixels.into_iter().map(quantize).collect();
    let image = Tensor::new(alloc::vec![1, size, size], data)?;
    let mask = AnnotationMask::new(positive.clone(), negative.clone())?.with_clean(positive, negative)?;
    Ok(Sample {
        id: format!("s{index:05}"),
        image,
        label,
        mask,
    })
}
