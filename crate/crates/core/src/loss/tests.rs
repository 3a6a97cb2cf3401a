use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::BinaryMask;
use crate::tensor::gradient_check;

fn mask(h: usize, w: usize, pos: &[u8], neg: &[u8]) -> AnnotationMask {
    AnnotationMask::new(
        BinaryMask::from_bits(h, w, pos.to_vec()).unwrap(),
        BinaryMask::from_bits(h, w, neg.to_vec()).unwrap(),
    )
    .unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> AnnotationMask {
    let mut pos = vec![0u8; h * w];
    let mut neg = vec![0u8; h * w];
    for i in 0..h * w {
        match rng.gen_range(0..3) {
            0 => pos[i] = 1,
            1 => neg[i] = 1,
            _ => {}
        }
    }
    mask(h, w, &pos, &neg)
}

fn hinge_value(map: &[f64], m: &AnnotationMask, a: f64, alpha: f64, gamma: f64) -> f64 {
    let labels = LabelLayer::full(&[m]).unwrap();
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::new(vec![1, 1, m.height(), m.width()], map.to_vec()).unwrap());
    let h = res_hinge(&mut tape, v, &labels, &[a], alpha, gamma).unwrap();
    tape.value(h).data()[0]
}

fn config(alpha: f64, gamma: f64) -> RobustLossConfig {
    RobustLossConfig {
        alpha,
        gamma,
        ..RobustLossConfig::default()
    }
}

#[test]
fn single_pixel_hinge() {
    let m = mask(1, 1, &[1], &[0]);
    let got = hinge_value(&[0.8], &m, 0.5, 0.001, 10.0);
    let oracle = 1.0 - libm::tanh(3.0) - 0.001;
    assert!((got - oracle).abs() < 1e-15);
    assert!((got - 0.003_945_246_313_269_5).abs() < 1e-12, "{got}");
}

#[test]
fn perfect_alignment_is_zero() {
    let m = mask(2, 2, &[1, 1, 0, 0], &[0, 0, 1, 1]);
    let map = [1.0, 1.0, 0.0, 0.0];
    let labels = LabelLayer::full(&[&m]).unwrap();
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::new(vec![1, 1, 2, 2], map.to_vec()).unwrap());
    let t = tape.constant(Tensor::new(vec![1, 1, 2, 2], map.to_vec()).unwrap());
    let loss = res_loss(&mut tape, v, &labels, v, t, &labels, &[0.5], &config(0.01, 50.0)).unwrap();
    assert_eq!(tape.value(loss.total).item().unwrap(), 0.0);
}

#[test]
fn unlabeled_sample_contributes_nothing() {
    let m = mask(2, 2, &[0; 4], &[0; 4]);
    assert_eq!(hinge_value(&[0.3, 0.9, 0.1, 0.6], &m, 0.5, 0.0, 50.0), 0.0);
    let labels = LabelLayer::full(&[&m]).unwrap();
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::full(&[1, 1, 2, 2], 0.7));
    let t = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
    let loss = res_loss(&mut tape, v, &labels, v, t, &labels, &[0.5], &config(0.0, 50.0)).unwrap();
    assert_eq!(tape.value(loss.total).item().unwrap(), 0.0);
}

#[test]
fn large_gamma_matches_exact_hinge() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let m = random_mask(&mut rng, 6, 6);
        let a = rng.gen_range(0.2..0.8);
        let alpha = rng.gen_range(0.0..0.5);
        // Keep every pixel at least 0.01 away from the threshold.
        let map: Vec<f64> = (0..36)
            .map(|_| loop {
                let v: f64 = rng.gen();
                if (v - a).abs() >= 0.01 {
                    break v;
                }
            })
            .collect();
        let soft = hinge_value(&map, &m, a, alpha, 1e4);
        let exact = exact_hinge(&map, &m.signed(), a, alpha);
        assert!((soft - exact).abs() < 1e-6, "{soft} vs {exact}");
    }
}

#[test]
fn alpha_two_disables_hinge() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let m = random_mask(&mut rng, 5, 5);
        let map: Vec<f64> = (0..25).map(|_| rng.gen()).collect();
        let a = rng.gen();
        assert_eq!(hinge_value(&map, &m, a, 2.0, 50.0), 0.0);
        assert_eq!(hinge_value(&map, &m, a, 2.5, 50.0), 0.0);
    }
}

#[test]
fn distance_term_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let masks: Vec<AnnotationMask> = (0..3).map(|_| random_mask(&mut rng, 4, 4)).collect();
    let refs: Vec<&AnnotationMask> = masks.iter().collect();
    let labels = LabelLayer::full(&refs).unwrap();
    let map: Vec<f64> = (0..48).map(|_| rng.gen()).collect();
    let target: Vec<f64> = (0..48).map(|_| rng.gen()).collect();
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::new(vec![3, 1, 4, 4], map.clone()).unwrap());
    let t = tape.constant(Tensor::new(vec![3, 1, 4, 4], target.clone()).unwrap());
    let loss = res_loss(&mut tape, v, &labels, v, t, &labels, &[0.5; 3], &config(2.0, 50.0)).unwrap();
    let mut expected = 0.0;
    for (s, m) in masks.iter().enumerate() {
        let signed = m.signed();
        let (mut sum, mut n) = (0.0, 0);
        for i in 0..16 {
            if signed[i] != 0.0 {
                sum += (map[s * 16 + i] - target[s * 16 + i]).abs();
                n += 1;
            }
        }
        if n > 0 {
            expected += sum / n as f64;
        }
    }
    expected /= 3.0;
    assert!((tape.value(loss.total).item().unwrap() - expected).abs() < 1e-14);
}

#[test]
fn pooled_labels_mark_touched_cells() {
    let mut pos = vec![0u8; 16];
    let mut neg = vec![0u8; 16];
    pos[0] = 1; // cell (0,0)
    neg[1] = 1; // cell (0,0) as well, positive wins
    neg[15] = 1; // cell (1,1)
    let m = mask(4, 4, &pos, &neg);
    let pooled = LabelLayer::pooled(&[&m], (2, 2)).unwrap();
    assert_eq!(pooled.positive.data(), &[1.0, 0.0, 0.0, 0.0]);
    assert_eq!(pooled.negative.data(), &[0.0, 0.0, 0.0, 1.0]);
    assert_eq!(pooled.labeled.data(), &[1.0, 0.0, 0.0, 1.0]);
    assert_eq!(pooled.inv_counts, vec![0.5]);
    assert!(LabelLayer::pooled(&[&m], (3, 3)).is_err());
}

#[test]
fn gradia_examples() {
    let m = mask(1, 2, &[1, 0], &[0, 0]);
    let labels = LabelLayer::full(&[&m]).unwrap();
    let mut tape = Tape::new();
    let exact = tape.constant(Tensor::new(vec![1, 1, 1, 2], vec![1.0, 0.0]).unwrap());
    let l = gradia_loss(&mut tape, exact, &labels).unwrap();
    assert_eq!(tape.value(l).item().unwrap(), 0.0);
    let half = tape.constant(Tensor::full(&[1, 1, 1, 2], 0.5));
    let l = gradia_loss(&mut tape, half, &labels).unwrap();
    assert!((tape.value(l).item().unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn haics_examples() {
    let m = mask(1, 3, &[1, 0, 0], &[0, 1, 0]);
    let labels = LabelLayer::full(&[&m]).unwrap();
    let mut tape = Tape::new();
    let sat = tape.constant(Tensor::new(vec![1, 1, 1, 3], vec![1.0, 0.0, 0.37]).unwrap());
    let l = haics_loss(&mut tape, sat, &labels).unwrap();
    assert!(tape.value(l).item().unwrap() < 1e-6);
    let half = tape.constant(Tensor::full(&[1, 1, 1, 3], 0.5));
    let l = haics_loss(&mut tape, half, &labels).unwrap();
    assert!((tape.value(l).item().unwrap() - core::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn haics_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let masks: Vec<AnnotationMask> = (0..2).map(|_| random_mask(&mut rng, 3, 3)).collect();
    let refs: Vec<&AnnotationMask> = masks.iter().collect();
    let labels = LabelLayer::full(&refs).unwrap();
    let map: Vec<f64> = (0..18).map(|_| rng.gen_range(0.01..0.99)).collect();
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::new(vec![2, 1, 3, 3], map.clone()).unwrap());
    let l = haics_loss(&mut tape, v, &labels).unwrap();
    let (mut sum, mut n) = (0.0, 0);
    for (s, m) in masks.iter().enumerate() {
        for (i, h) in m.signed().into_iter().enumerate() {
            let p = map[s * 9 + i];
            if h > 0.0 {
                sum -= p.ln();
                n += 1;
            } else if h < 0.0 {
                sum -= (1.0 - p).ln();
                n += 1;
            }
        }
    }
    assert!((tape.value(l).item().unwrap() - sum / n as f64).abs() < 1e-12);
}

#[test]
fn objective_combines_terms() {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::scalar(0.7));
    let e = tape.constant(Tensor::scalar(0.2));
    let t = total_objective(&mut tape, p, e, 1.0).unwrap();
    assert!((tape.value(t).item().unwrap() - 0.9).abs() < 1e-15);
    let t = total_objective(&mut tape, p, e, 0.0).unwrap();
    assert_eq!(tape.value(t).item().unwrap(), 0.7);
}

#[test]
fn config_validation() {
    assert!(RobustLossConfig::default().validate().is_ok());
    assert!(config(2.0, 50.0).validate().is_ok());
    assert!(config(2.1, 50.0).validate().is_err());
    assert!(config(-0.1, 50.0).validate().is_err());
    assert!(config(0.1, 0.0).validate().is_err());
    for v in Supervision::ALL {
        assert_eq!(v.name().parse::<Supervision>().unwrap(), v);
    }
    assert!("res".parse::<Supervision>().is_err());
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let masks: Vec<AnnotationMask> = (0..2).map(|_| random_mask(&mut rng, 4, 4)).collect();
    let refs: Vec<&AnnotationMask> = masks.iter().collect();
    let labels = LabelLayer::full(&refs).unwrap();
    let target = Tensor::from_fn(&[2, 1, 4, 4], |_| rng.gen());
    // Points away from |M - target| = 0 and the hinge kink.
    let point = Tensor::from_fn(&[2, 1, 4, 4], |i| 0.05 + 0.9 * ((i * 7919) % 97) as f64 / 97.0);
    let cfg = config(0.05, 3.0);
    let err = gradient_check(
        |tape, x| {
            let t = tape.constant(target.clone());
            Ok(res_loss(tape, x, &labels, x, t, &labels, &[0.45, 0.55], &cfg)?.total)
        },
        &point,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-5, "res {err}");
    let err = gradient_check(|tape, x| haics_loss(tape, x, &labels), &point, 1e-6).unwrap();
    assert!(err < 1e-5, "haics {err}");
    let err = gradient_check(|tape, x| gradia_loss(tape, x, &labels), &point, 1e-6).unwrap();
    assert!(err < 1e-5, "gradia {err}");
}

proptest! {
    #[test]
    fn hinge_nonnegative_and_monotone_in_alpha(
        seed in any::<u64>(),
        a in 0.0f64..1.0,
        alpha in 0.0f64..1.9,
        step in 0.0f64..0.1,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_mask(&mut rng, 4, 4);
        let map: Vec<f64> = (0..16).map(|_| rng.gen()).collect();
        let lo = hinge_value(&map, &m, a, alpha, 50.0);
        let hi = hinge_value(&map, &m, a, alpha + step, 50.0);
        prop_assert!(lo >= 0.0 && hi >= 0.0);
        prop_assert!(hi <= lo);
    }

    #[test]
    fn exact_hinge_bounded(seed in any::<u64>(), a in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_mask(&mut rng, 4, 4);
        let map: Vec<f64> = (0..16).map(|_| rng.gen()).collect();
        let v = exact_hinge(&map, &m.signed(), a, 0.0);
        prop_assert!((0.0..=2.0).contains(&v));
    }
}
