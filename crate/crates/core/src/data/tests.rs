use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use proptest::prelude::*;

use super::*;

fn small_config(n: usize, seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        n,
        image_size: 32,
        seed,
        ..SyntheticConfig::default()
    }
}

fn square(size: usize, top: usize, left: usize, side: usize) -> BinaryMask {
    BinaryMask::from_fn(size, size, |y, x| {
        y >= top && y < top + side && x >= left && x < left + side
    })
}

/// Brute-force square-element dilation straight from the definition.
fn dilation_oracle(mask: &BinaryMask, r: usize) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    BinaryMask::from_fn(h, w, |y, x| {
        (0..h).any(|yy| {
            (0..w).any(|xx| mask.get(yy, xx) && yy.abs_diff(y) <= r && xx.abs_diff(x) <= r)
        })
    })
}

fn erosion_oracle(mask: &BinaryMask, r: usize) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    BinaryMask::from_fn(h, w, |y, x| {
        (0..h).all(|yy| (0..w).all(|xx| yy.abs_diff(y) > r || xx.abs_diff(x) > r || mask.get(yy, xx)))
    })
}

#[test]
fn synthetic_is_deterministic() {
    let a = generate_synthetic(&small_config(12, 7)).unwrap();
    let b = generate_synthetic(&small_config(12, 7)).unwrap();
    assert_eq!(a, b);
    let c = generate_synthetic(&small_config(12, 8)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn synthetic_is_class_balanced() {
    for n in [1, 2, 7, 50] {
        let d = generate_synthetic(&small_config(n, 1)).unwrap();
        let counts = d.class_counts();
        let c1 = counts.get(1).copied().unwrap_or(0);
        assert!(counts[0].abs_diff(c1) <= 1);
    }
}

#[test]
fn synthetic_masks_are_nonempty_and_disjoint() {
    let d = generate_synthetic(&SyntheticConfig {
        n: 40,
        seed: 3,
        ..SyntheticConfig::default()
    })
    .unwrap();
    for s in &d.samples {
        let (f, c) = s.mask.clean.as_ref().unwrap();
        assert!(!f.is_empty());
        assert_eq!(f, &s.mask.positive);
        assert_eq!(c, &s.mask.negative);
        assert!(f.bits().iter().zip(c.bits()).all(|(&a, &b)| a & b == 0));
        assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // quantised to 8-bit levels
        assert!(s.image.data().iter().all(|&v| (v * 255.0 - (v * 255.0).round()).abs() < 1e-9));
    }
}

#[test]
fn synthetic_rejects_small_images_and_bad_class_counts() {
    assert!(generate_synthetic(&SyntheticConfig {
        image_size: 16,
        ..SyntheticConfig::default()
    })
    .is_err());
    assert!(generate_synthetic(&SyntheticConfig {
        class_count: 5,
        ..small_config(4, 0)
    })
    .is_err());
    let four = generate_synthetic(&SyntheticConfig {
        class_count: 4,
        ..small_config(8, 0)
    })
    .unwrap();
    assert_eq!(four.class_counts(), [2, 2, 2, 2]);
}

#[test]
fn zero_noise_is_identity() {
    let d = generate_synthetic(&small_config(10, 2)).unwrap();
    let noisy = d.corrupted(&NoiseSpec::none()).unwrap();
    for (a, b) in d.samples.iter().zip(&noisy.samples) {
        assert_eq!(a.mask, b.mask);
    }
}

#[test]
fn full_dropout_empties_positive_mask() {
    let d = generate_synthetic(&small_config(10, 2)).unwrap();
    let spec = NoiseSpec {
        boundary_radius: 1,
        drop_probability: 1.0,
        seed: 4,
    };
    for s in &d.samples {
        let noisy = corrupt_annotations(&s.mask, &spec).unwrap();
        assert!(noisy.positive.is_empty());
        assert!(noisy.negative.is_empty());
    }
}

#[test]
fn dilating_a_square() {
    let m = square(20, 6, 6, 5);
    let d = dilate(&m, 2);
    assert_eq!(d, square(20, 4, 4, 9));
    assert_eq!(d.count(), 81);
    assert_eq!(d, dilation_oracle(&m, 2));
    // clipped at the border
    let corner = square(10, 0, 0, 5);
    let dc = dilate(&corner, 2);
    assert_eq!(dc.count(), 49);
    assert_eq!(dc, dilation_oracle(&corner, 2));
}

#[test]
fn corruption_with_positive_radius_dilates() {
    let clean = AnnotationMask::new(square(20, 6, 6, 5), BinaryMask::empty(20, 20)).unwrap();
    let noisy = corrupt_annotations(
        &clean,
        &NoiseSpec {
            boundary_radius: 2,
            drop_probability: 0.0,
            seed: 1,
        },
    )
    .unwrap();
    assert_eq!(noisy.positive.count(), 81);
    let eroded = corrupt_annotations(
        &clean,
        &NoiseSpec {
            boundary_radius: -1,
            drop_probability: 0.0,
            seed: 1,
        },
    )
    .unwrap();
    assert_eq!(eroded.positive, square(20, 7, 7, 3));
}

#[test]
fn drop_probability_is_validated() {
    let spec = NoiseSpec {
        boundary_radius: 0,
        drop_probability: 1.5,
        seed: 0,
    };
    assert!(spec.validate().is_err());
}

#[test]
fn connected_regions_use_eight_connectivity() {
    let mut m = BinaryMask::empty(6, 6);
    m.set(0, 0, true);
    m.set(1, 1, true);
    m.set(4, 4, true);
    m.set(4, 5, true);
    let regions = connected_regions(&m);
    assert_eq!(regions.len(), 2);
    assert_eq!(regions[0], [0, 7]);
    assert_eq!(regions[1], [28, 29]);
}

#[test]
fn split_covers_disjointly_and_is_stratified() {
    let d = generate_synthetic(&small_config(500, 5)).unwrap();
    let s = split(&d, (100, 200, 200), 9).unwrap();
    let ids: BTreeSet<_> = s
        .train
        .samples
        .iter()
        .chain(&s.val.samples)
        .chain(&s.test.samples)
        .map(|x| x.id.clone())
        .collect();
    assert_eq!(ids.len(), 500);
    for part in [&s.train, &s.val, &s.test] {
        let c = part.class_counts();
        assert!(c[0].abs_diff(c[1]) <= 1);
    }
    assert_eq!(s, split(&d, (100, 200, 200), 9).unwrap());
    assert_ne!(s.train, split(&d, (100, 200, 200), 10).unwrap().train);
    assert!(split(&d, (300, 200, 1), 0).is_err());
}

#[test]
fn split_is_stratified_for_odd_sizes() {
    let d = generate_synthetic(&small_config(41, 5)).unwrap();
    for train in [1, 9, 10, 21] {
        let s = split(&d, (train, 5, 5), 1).unwrap();
        let c = s.train.class_counts();
        let c1 = c.get(1).copied().unwrap_or(0);
        assert!(c[0].abs_diff(c1) <= 1);
    }
}

fn arb_mask(size: usize) -> impl Strategy<Value = BinaryMask> {
    proptest::collection::vec(prop::bool::weighted(0.2), size * size)
        .prop_map(move |b| BinaryMask::from_bits(size, size, b.into_iter().map(u8::from).collect()).unwrap())
}

proptest! {
    #[test]
    fn morphology_matches_brute_force(m in arb_mask(9), r in 0usize..4) {
        prop_assert_eq!(dilate(&m, r), dilation_oracle(&m, r));
        prop_assert_eq!(erode(&m, r), erosion_oracle(&m, r));
    }

    #[test]
    fn corruption_keeps_masks_binary_and_disjoint(
        f in arb_mask(12),
        c in arb_mask(12),
        radius in -2i32..3,
        drop in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let clean = AnnotationMask::new(f.clone(), c.minus(&f)).unwrap();
        let spec = NoiseSpec { boundary_radius: radius, drop_probability: drop, seed };
        let noisy = corrupt_annotations(&clean, &spec).unwrap();
        prop_assert!(noisy.positive.bits().iter().chain(noisy.negative.bits()).all(|&b| b <= 1));
        prop_assert!(noisy.positive.bits().iter().zip(noisy.negative.bits()).all(|(&a, &b)| a & b == 0));
        prop_assert_eq!(&noisy, &corrupt_annotations(&clean, &spec).unwrap());
    }

    #[test]
    fn dropout_removes_whole_regions(f in arb_mask(10), seed in any::<u64>()) {
        let clean = AnnotationMask::new(f.clone(), BinaryMask::empty(10, 10)).unwrap();
        let spec = NoiseSpec { boundary_radius: 0, drop_probability: 0.5, seed };
        let noisy = corrupt_annotations(&clean, &spec).unwrap();
        for region in connected_regions(&f) {
            let kept: Vec<bool> = region.iter().map(|&p| noisy.positive.bits()[p] != 0).collect();
            prop_assert!(kept.iter().all(|&k| k) || kept.iter().all(|&k| !k));
        }
    }
}
