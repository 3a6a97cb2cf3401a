use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// `H×W` map of `{0, 1}` values.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    /// Any nonzero byte is read as 1.
    pub fn from_bits(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(
                "mask",
                format!("{height}×{width} mask needs {} values, got {}", height * width, bits.len()),
            ));
        }
        Ok(BinaryMask {
            height,
            width,
            bits: bits.into_iter().map(|b| (b != 0) as u8).collect(),
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x) as u8);
            }
        }
        BinaryMask {
            height,
            width,
            bits,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.bits[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    pub fn same_size(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }

    /// Pixels set in `self` but not in `other`.
    pub fn minus(&self, other: &BinaryMask) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| a & !b & 1)
                .collect(),
        }
    }
}

/// Positive (`F`, should be important) and negative (`C`, should not be
/// important) annotation masks. Synthetic data also carries the clean masks
/// the noisy ones were derived from.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationMask {
    pub positive: BinaryMask,
    pub negative: BinaryMask,
    pub clean: Option<(BinaryMask, BinaryMask)>,
}

impl AnnotationMask {
    /// Builds a mask pair, rejecting size mismatches and overlapping pixels.
    pub fn new(positive: BinaryMask, negative: BinaryMask) -> Result<Self> {
        check_pair(&positive, &negative)?;
        Ok(AnnotationMask {
            positive,
            negative,
            clean: None,
        })
    }

    pub fn with_clean(mut self, positive: BinaryMask, negative: BinaryMask) -> Result<Self> {
        check_pair(&positive, &negative)?;
        if !positive.same_size(&self.positive) {
            return Err(Error::shape("annotation", "clean masks differ in size from noisy masks"));
        }
        self.clean = Some((positive, negative));
        Ok(self)
    }

    pub fn height(&self) -> usize {
        self.positive.height()
    }

    pub fn width(&self) -> usize {
        self.positive.width()
    }

    /// `F - C` per pixel, in `{-1, 0, 1}`.
    pub fn signed(&self) -> Vec<f64> {
        self.positive
            .bits()
            .iter()
            .zip(self.negative.bits())
            .map(|(&f, &c)| f as f64 - c as f64)
            .collect()
    }

    pub fn labeled_count(&self) -> usize {
        self.positive.count() + self.negative.count()
    }

    /// The clean pair as an annotation of its own, or a copy of the noisy
    /// pair when no clean masks are known.
    pub fn clean_or_current(&self) -> AnnotationMask {
        match &self.clean {
            Some((p, n)) => AnnotationMask {
                positive: p.clone(),
                negative: n.clone(),
                clean: None,
            },
            None => AnnotationMask {
                positive: self.positive.clone(),
                negative: self.negative.clone(),
                clean: None,
            },
        }
    }
}

fn check_pair(positive: &BinaryMask, negative: &BinaryMask) -> Result<()> {
    if !positive.same_size(negative) {
        return Err(Error::shape(
            "annotation",
            format!(
                "positive {}×{} vs negative {}×{}",
                positive.height(),
                positive.width(),
                negative.height(),
                negative.width()
            ),
        ));
    }
    if positive.bits().iter().zip(negative.bits()).any(|(&a, &b)| a & b != 0) {
        return Err(Error::InvalidArgument(
            "positive and negative masks overlap".into(),
        ));
    }
    Ok(())
}
