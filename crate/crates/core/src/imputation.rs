//! Mappings from binary annotation masks to continuous targets in `[0, 1]`.
//!
//! The fixed variant blurs both masks with a normalised Gaussian and keeps
//! `clamp(blur(F) - blur(C), 0, 1)`, which gives pixels near an annotation
//! boundary intermediate values. The learnable variant runs a small stack of
//! convolutions over the two masks and squashes the result with a sigmoid;
//! its geometry is chosen so the output lands on the saliency resolution.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::AnnotationMask;
use crate::error::{Error, Result};
use crate::model::{kaiming_uniform, BoundParams, ModelParams};
use crate::rng;
use crate::tensor::kernels::conv_out_extent;
use crate::tensor::{Tape, Tensor, Var};

pub const IMPUTER_PREFIX: &str = "imputer.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImputerDepth {
    /// One convolution with kernel `2s`, stride `s`, padding `s/2`, where
    /// `s` is the mask-to-saliency downscale factor.
    Shallow,
    /// Five convolutions; the first `log2(s)` use stride 2.
    Deep,
}

impl core::str::FromStr for ImputerDepth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shallow" => Ok(ImputerDepth::Shallow),
            "deep" => Ok(ImputerDepth::Deep),
            _ => Err(Error::InvalidArgument(format!("unknown imputer depth {s:?} (shallow or deep)"))),
        }
    }
}

impl core::fmt::Display for ImputerDepth {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            ImputerDepth::Shallow => "shallow",
            ImputerDepth::Deep => "deep",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImputerLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

const DEEP_WIDTH: usize = 8;

pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Vec<f64>> {
    if size.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "Gaussian kernel size {size} must be odd"
        )));
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!("sigma {sigma} must be positive")));
    }
    let c = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 - c, (i % size) as f64 - c);
            libm::exp(-(y * y + x * x) / (2.0 * sigma * sigma))
        })
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    Ok(k)
}

fn blur(bits: &[u8], h: usize, w: usize, kernel: &[f64], size: usize) -> Vec<f64> {
    let r = (size / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for ky in -r..=r {
                for kx in -r..=r {
                    let (yy, xx) = (y + ky, x + kx);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    if bits[yy as usize * w + xx as usize] != 0 {
                        acc += kernel[((ky + r) as usize) * size + (kx + r) as usize];
                    }
                }
            }
            out[y as usize * w + x as usize] = acc;
        }
    }
    out
}

/// `clamp(G * F - G * C, 0, 1)` at mask resolution, zero padded.
pub fn gaussian_impute(mask: &AnnotationMask, size: usize, sigma: f64) -> Result<Vec<f64>> {
    let kernel = gaussian_kernel(size, sigma)?;
    let (h, w) = (mask.height(), mask.width());
    let pos = blur(mask.positive.bits(), h, w, &kernel, size);
    let neg = blur(mask.negative.bits(), h, w, &kernel, size);
    Ok(pos
        .iter()
        .zip(&neg)
        .map(|(p, n)| (p - n).clamp(0.0, 1.0))
        .collect())
}

/// Layer geometry taking `mask` resolution to `native` resolution.
pub fn imputer_layers(
    depth: ImputerDepth,
    mask: (usize, usize),
    native: (usize, usize),
) -> Result<Vec<ImputerLayer>> {
    let bad = || {
        Error::InvalidArgument(format!(
            "no {depth:?} imputer geometry maps {}×{} masks to {}×{}",
            mask.0, mask.1, native.0, native.1
        ))
    };
    if native.0 == 0 || native.1 == 0 || !mask.0.is_multiple_of(native.0) || !mask.1.is_multiple_of(native.1) {
        return Err(bad());
    }
    let factor = mask.0 / native.0;
    if mask.1 / native.1 != factor {
        return Err(bad());
    }
    let layers = match depth {
        ImputerDepth::Shallow => {
            let (kernel, padding) = match factor {
                1 => (1, 0),
                s if s % 2 == 0 => (2 * s, s / 2),
                _ => return Err(bad()),
            };
            vec![ImputerLayer {
                in_channels: 2,
                out_channels: 1,
                kernel,
                stride: factor,
                padding,
            }]
        }
        ImputerDepth::Deep => {
            if !factor.is_power_of_two() || factor > 32 {
                return Err(bad());
            }
            let downs = factor.trailing_zeros() as usize;
            (0..5)
                .map(|i| {
                    let (base, padding) = if i == 0 { (7, 3) } else { (3, 1) };
                    let stride = if i < downs { 2 } else { 1 };
                    // an even kernel keeps stride-2 extents integral on even inputs
                    let kernel = if stride == 2 { base + 1 } else { base };
                    ImputerLayer {
                        in_channels: if i == 0 { 2 } else { DEEP_WIDTH },
                        out_channels: if i == 4 { 1 } else { DEEP_WIDTH },
                        kernel,
                        stride,
                        padding,
                    }
                })
                .collect()
        }
    };
    let (mut h, mut w) = mask;
    for l in &layers {
        h = conv_out_extent(h, l.kernel, l.stride, l.padding).map_err(|_| bad())?;
        w = conv_out_extent(w, l.kernel, l.stride, l.padding).map_err(|_| bad())?;
    }
    if (h, w) != native {
        return Err(bad());
    }
    Ok(layers)
}

fn layer_names(i: usize) -> (alloc::string::String, alloc::string::String) {
    (
        format!("{IMPUTER_PREFIX}conv{}.weight", i + 1),
        format!("{IMPUTER_PREFIX}conv{}.bias", i + 1),
    )
}

/// Pre-activation of the shallow imputer at initialisation, for a window
/// entirely positive (`+GAIN`) or entirely negative (`-GAIN`).
pub const SHALLOW_INIT_GAIN: f64 = 8.0;

/// Initial imputer parameters.
///
/// A single layer starts as a signed window average, `sigmoid(GAIN * (mean F
/// - mean C))`, which already resembles a smoothed annotation; a randomly
/// initialised layer gives a target the saliency map can chase anywhere.
/// Deeper stacks use fan-in scaled random weights from `seed`.
pub fn init_imputer(layers: &[ImputerLayer], seed: u64) -> ModelParams {
    let mut params = ModelParams::new();
    if let [l] = layers {
        let (w, b) = layer_names(0);
        let area = l.kernel * l.kernel;
        let unit = SHALLOW_INIT_GAIN / area as f64;
        params.insert(
            w,
            Tensor::from_fn(&[1, 2, l.kernel, l.kernel], |i| if i < area { unit } else { -unit }),
        );
        params.insert(b, Tensor::zeros(&[1]));
        return params;
    }
    let mut rng = rng::stream(seed, rng::tags::IMPUTER_INIT, 0);
    for (i, l) in layers.iter().enumerate() {
        let (w, b) = layer_names(i);
        let fan_in = l.in_channels * l.kernel * l.kernel;
        params.insert(
            w,
            kaiming_uniform(&[l.out_channels, l.in_channels, l.kernel, l.kernel], fan_in, &mut rng),
        );
        params.insert(b, Tensor::zeros(&[l.out_channels]));
    }
    params
}

/// `N×2×H×W` stack of positive and negative masks.
pub fn stack_masks(masks: &[&AnnotationMask]) -> Result<Tensor> {
    let Some(first) = masks.first() else {
        return Err(Error::InvalidArgument("no masks to stack".into()));
    };
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(masks.len() * 2 * h * w);
    for m in masks {
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::shape("stack_masks", "masks differ in size"));
        }
        data.extend(m.positive.bits().iter().map(|&b| b as f64));
        data.extend(m.negative.bits().iter().map(|&b| b as f64));
    }
    Tensor::new(vec![masks.len(), 2, h, w], data)
}

/// Learnable imputation `h_phi(F, C)`, returning `N×1×h×w` in `(0, 1)`.
pub fn learnable_impute(
    tape: &mut Tape,
    params: &BoundParams,
    layers: &[ImputerLayer],
    stacked_masks: Var,
) -> Result<Var> {
    let mut h = stacked_masks;
    for (i, l) in layers.iter().enumerate() {
        let (w, b) = layer_names(i);
        h = tape.conv2d(h, params.get(&w)?, Some(params.get(&b)?), l.stride, l.padding)?;
        if i + 1 < layers.len() {
            h = tape.relu(h);
        }
    }
    Ok(tape.sigmoid(h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BinaryMask;
    use crate::tensor::gradient_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn annotation(f: BinaryMask, c: BinaryMask) -> AnnotationMask {
        AnnotationMask::new(f, c).unwrap()
    }

    #[test]
    fn kernel_is_normalised_and_nonnegative() {
        for (k, s) in [(1, 0.5), (3, 1.0), (5, 1.5), (9, 3.0)] {
            let g = gaussian_kernel(k, s).unwrap();
            assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(g.iter().all(|&v| v >= 0.0));
        }
        assert!(gaussian_kernel(4, 1.0).is_err());
        assert!(gaussian_kernel(3, 0.0).is_err());
    }

    #[test]
    fn full_positive_mask_keeps_interior_at_one() {
        let m = annotation(BinaryMask::from_fn(12, 12, |_, _| true), BinaryMask::empty(12, 12));
        let out = gaussian_impute(&m, 5, 1.5).unwrap();
        for y in 2..10 {
            for x in 2..10 {
                assert!((out[y * 12 + x] - 1.0).abs() < 1e-12);
            }
        }
        // border pixels receive slack values
        assert!(out[0] > 0.0 && out[0] < 1.0);
    }

    #[test]
    fn empty_masks_give_zero() {
        let m = annotation(BinaryMask::empty(8, 8), BinaryMask::empty(8, 8));
        assert!(gaussian_impute(&m, 3, 1.0).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_stamps_the_kernel() {
        let mut f = BinaryMask::empty(7, 7);
        f.set(3, 3, true);
        let out = gaussian_impute(&annotation(f, BinaryMask::empty(7, 7)), 3, 0.8).unwrap();
        // direct convolution of a delta: the (flipped, symmetric) kernel
        let sigma2 = 2.0 * 0.8 * 0.8;
        let raw: Vec<f64> = (0..9)
            .map(|i| {
                let (dy, dx) = ((i / 3) as f64 - 1.0, (i % 3) as f64 - 1.0);
                (-(dy * dy + dx * dx) / sigma2).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        for y in 0..7 {
            for x in 0..7 {
                let inside = (2..=4).contains(&y) && (2..=4).contains(&x);
                let expected = if inside { raw[(y - 2) * 3 + (x - 2)] / total } else { 0.0 };
                assert!((out[y * 7 + x] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unit_kernel_returns_positive_mask() {
        let f = BinaryMask::from_fn(6, 6, |y, x| (y + x) % 3 == 0);
        let c = BinaryMask::from_fn(6, 6, |y, x| (y + x) % 3 == 1);
        let out = gaussian_impute(&annotation(f.clone(), c), 1, 1.0).unwrap();
        assert_eq!(out, f.to_f64());
    }

    #[test]
    fn geometry_lands_on_native_resolution() {
        let shallow = imputer_layers(ImputerDepth::Shallow, (64, 64), (8, 8)).unwrap();
        assert_eq!(
            shallow,
            [ImputerLayer { in_channels: 2, out_channels: 1, kernel: 16, stride: 8, padding: 4 }]
        );
        let paper_scale = imputer_layers(ImputerDepth::Shallow, (224, 224), (7, 7)).unwrap();
        assert_eq!((paper_scale[0].kernel, paper_scale[0].stride, paper_scale[0].padding), (64, 32, 16));
        let deep = imputer_layers(ImputerDepth::Deep, (64, 64), (8, 8)).unwrap();
        assert_eq!(deep.len(), 5);
        assert_eq!(deep.iter().filter(|l| l.stride == 2).count(), 3);
        assert!(imputer_layers(ImputerDepth::Shallow, (64, 64), (7, 7)).is_err());
        assert!(imputer_layers(ImputerDepth::Shallow, (48, 48), (16, 16)).is_err());
        assert!(imputer_layers(ImputerDepth::Deep, (48, 48), (8, 8)).is_err());

        for depth in [ImputerDepth::Shallow, ImputerDepth::Deep] {
            let layers = imputer_layers(depth, (64, 64), (8, 8)).unwrap();
            let params = init_imputer(&layers, 3);
            let m = annotation(BinaryMask::from_fn(64, 64, |y, _| y < 20), BinaryMask::empty(64, 64));
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, false);
            let x = tape.constant(stack_masks(&[&m, &m]).unwrap());
            let out = learnable_impute(&mut tape, &bound, &layers, x).unwrap();
            assert_eq!(tape.shape(out), &[2, 1, 8, 8]);
        }
    }

    #[test]
    fn shallow_init_is_a_signed_average() {
        let layers = imputer_layers(ImputerDepth::Shallow, (32, 32), (4, 4)).unwrap();
        let params = init_imputer(&layers, 0);
        let m = annotation(
            BinaryMask::from_fn(32, 32, |y, _| y < 8),
            BinaryMask::from_fn(32, 32, |y, _| y >= 24),
        );
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let x = tape.constant(stack_masks(&[&m]).unwrap());
        let out = learnable_impute(&mut tape, &bound, &layers, x).unwrap();
        let v = tape.value(out).data();
        let l = &layers[0];
        let unit = SHALLOW_INIT_GAIN / (l.kernel * l.kernel) as f64;
        for (i, &got) in v.iter().enumerate() {
            let (oy, ox) = ((i / 4) as isize, (i % 4) as isize);
            let mut z = 0.0;
            for ky in 0..l.kernel as isize {
                for kx in 0..l.kernel as isize {
                    let y = oy * l.stride as isize - l.padding as isize + ky;
                    let x = ox * l.stride as isize - l.padding as isize + kx;
                    if (0..32).contains(&y) && (0..32).contains(&x) {
                        let (y, x) = (y as usize, x as usize);
                        z += unit * (m.positive.get(y, x) as u8 as f64 - m.negative.get(y, x) as u8 as f64);
                    }
                }
            }
            assert!((got - 1.0 / (1.0 + libm::exp(-z))).abs() < 1e-12);
        }
        assert!(v[0] > 0.95 && v[15] < 0.05);
    }

    #[test]
    fn zero_parameters_give_one_half() {
        let layers = imputer_layers(ImputerDepth::Shallow, (32, 32), (4, 4)).unwrap();
        let mut params = init_imputer(&layers, 0);
        for (name, t) in params.clone().iter() {
            params.insert(name.clone(), Tensor::zeros(t.shape()));
        }
        let m = annotation(BinaryMask::from_fn(32, 32, |y, x| y < x), BinaryMask::empty(32, 32));
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let x = tape.constant(stack_masks(&[&m]).unwrap());
        let out = learnable_impute(&mut tape, &bound, &layers, x).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn learnable_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let layers = imputer_layers(ImputerDepth::Shallow, (32, 32), (4, 4)).unwrap();
        let params = init_imputer(&layers, 5);
        let f_mask = BinaryMask::from_fn(32, 32, |_, _| rng.gen_bool(0.3));
        let c_mask = BinaryMask::from_fn(32, 32, |_, _| rng.gen_bool(0.3)).minus(&f_mask);
        let masks = stack_masks(&[&annotation(f_mask, c_mask)]).unwrap();
        let bias = params.get("imputer.conv1.bias").unwrap().clone();
        let f = |tape: &mut Tape, w: Var| {
            let b = tape.constant(bias.clone());
            let bound = BoundParams::from_vars([
                ("imputer.conv1.weight".into(), w),
                ("imputer.conv1.bias".into(), b),
            ]);
            let x = tape.constant(masks.clone());
            let out = learnable_impute(tape, &bound, &layers, x)?;
            Ok(tape.mean(out))
        };
        let point = params.get("imputer.conv1.weight").unwrap();
        assert!(gradient_check(f, point, 1e-5).unwrap() < 1e-3);
    }

    proptest! {
        #[test]
        fn gaussian_is_bounded_and_monotone(
            bits in proptest::collection::vec(any::<bool>(), 100),
            extra in proptest::collection::vec(any::<bool>(), 100),
            neg in proptest::collection::vec(prop::bool::weighted(0.2), 100),
        ) {
            let f = BinaryMask::from_bits(10, 10, bits.iter().map(|&b| b as u8).collect()).unwrap();
            let grown = BinaryMask::from_bits(
                10, 10, bits.iter().zip(&extra).map(|(&a, &b)| (a || b) as u8).collect()).unwrap();
            let c = BinaryMask::from_bits(10, 10, neg.iter().map(|&b| b as u8).collect()).unwrap()
                .minus(&grown);
            let base = gaussian_impute(&annotation(f, c.clone()), 5, 1.5).unwrap();
            let more = gaussian_impute(&annotation(grown, c), 5, 1.5).unwrap();
            prop_assert!(base.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!(base.iter().zip(&more).all(|(a, b)| b >= a));
        }
    }
}
