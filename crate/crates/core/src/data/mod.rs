//! Samples, annotation masks, synthetic data and annotation noise.

mod mask;
mod noise;
mod synthetic;

pub use mask::{AnnotationMask, BinaryMask};
pub use noise::{connected_regions, corrupt_annotations, dilate, erode, NoiseSpec};
pub use synthetic::{generate_synthetic, SyntheticConfig};

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `C×H×W`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    pub mask: AnnotationMask,
}

impl Sample {
    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Dataset { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(channels, height, width)` of the first sample.
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.samples
            .first()
            .map(|s| (s.channels(), s.height(), s.width()))
    }

    pub fn num_classes(&self) -> usize {
        self.samples.iter().map(|s| s.label + 1).max().unwrap_or(0)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = alloc::vec![0; self.num_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Apply annotation noise to every sample. The clean masks are kept (or
    /// recorded from the current masks when absent); sample `i` uses the
    /// noise stream `i` of `spec.seed`.
    pub fn corrupted(&self, spec: &NoiseSpec) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let clean = s.mask.clean_or_current();
                let mut per_sample = spec.clone();
                per_sample.seed = noise::sample_seed(spec.seed, i as u64);
                let mut mask = corrupt_annotations(&clean, &per_sample)?;
                mask.clean = Some((clean.positive, clean.negative));
                Ok(Sample {
                    mask,
                    ..s.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { samples })
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Class-stratified split. Each class is shuffled with the split seed and
/// the classes are interleaved round-robin, so every prefix of the ordering
/// (and therefore every split) is balanced to within one sample per class
/// whenever the classes are large enough.
pub fn split(dataset: &Dataset, sizes: (usize, usize, usize), seed: u64) -> Result<Splits> {
    let (train, val, test) = sizes;
    if train + val + test > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "split sizes {train}+{val}+{test} exceed dataset size {}",
            dataset.len()
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    let mut rng = rng::stream(seed, rng::tags::SPLIT, 0);
    let mut queues: Vec<Vec<usize>> = by_class.into_values().collect();
    for q in &mut queues {
        q.shuffle(&mut rng);
        q.reverse();
    }
    let mut order = Vec::with_capacity(dataset.len());
    while order.len() < dataset.len() {
        for q in &mut queues {
            if let Some(i) = q.pop() {
                order.push(i);
            }
        }
    }
    Ok(Splits {
        train: dataset.subset(&order[..train]),
        val: dataset.subset(&order[train..train + val]),
        test: dataset.subset(&order[train + val..train + val + test]),
    })
}

#[cfg(test)]
mod tests;
