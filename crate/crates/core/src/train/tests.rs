use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::data::{generate_synthetic, split, NoiseSpec, SyntheticConfig};
use crate::model::HEAD_BIAS;
use crate::threshold::brute_force_threshold;

fn toy_data(n: usize, seed: u64) -> Dataset {
    let clean = generate_synthetic(&SyntheticConfig {
        n,
        image_size: 32,
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap();
    clean
        .corrupted(&NoiseSpec {
            boundary_radius: 1,
            drop_probability: 0.3,
            seed,
        })
        .unwrap()
}

fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        widths: vec![4, 8],
        kernel_sizes: vec![3, 3],
        ..BackboneConfig::new(1, 32, 32, 2)
    }
}

fn config(variant: Supervision, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        warmup_epochs: 0,
        warmup_accuracy: 0.0,
        batch_size: 4,
        optimizer: AdamConfig {
            learning_rate: 3e-3,
            ..AdamConfig::default()
        },
        loss: RobustLossConfig {
            variant,
            ..RobustLossConfig::default()
        },
        seed: 9,
        ..TrainConfig::default()
    }
}

fn backbone_only(params: &ModelParams) -> ModelParams {
    params.without_prefix(crate::imputation::IMPUTER_PREFIX)
}

#[test]
fn identical_runs_are_bit_identical() {
    let data = toy_data(16, 1);
    let val = toy_data(8, 2);
    for variant in [Supervision::ResLearnable, Supervision::Haics] {
        let a = train(&small_backbone(), &config(variant, 2), &data, &val).unwrap();
        let b = train(&small_backbone(), &config(variant, 2), &data, &val).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn zero_weight_gates_every_variant() {
    let data = toy_data(12, 3);
    let runs: Vec<ModelParams> = Supervision::ALL
        .iter()
        .map(|&v| {
            let mut cfg = config(v, 2);
            cfg.loss.lambda_exp = 0.0;
            train(&small_backbone(), &cfg, &data, &Dataset::default()).unwrap().0
        })
        .collect();
    for r in &runs[1..] {
        assert_eq!(r, &runs[0]);
    }
}

#[test]
fn warmup_epochs_train_prediction_only() {
    let data = toy_data(12, 3);
    let run = |v: Supervision, warmup: usize| {
        let mut cfg = config(v, 2);
        cfg.warmup_epochs = warmup;
        train(&small_backbone(), &cfg, &data, &Dataset::default()).unwrap().0
    };
    let baseline = run(Supervision::None, 0);
    assert_eq!(backbone_only(&run(Supervision::ResLearnable, 2)), baseline);
    assert_eq!(run(Supervision::Haics, 2), baseline);
    assert_ne!(run(Supervision::Haics, 1), baseline);
}

#[test]
fn warmup_waits_for_training_accuracy() {
    let data = toy_data(12, 3);
    let mut cfg = config(Supervision::Haics, 6);
    cfg.warmup_epochs = 1;
    cfg.warmup_accuracy = 0.75;
    let mut trainer = Trainer::new(&small_backbone(), &cfg).unwrap();
    assert!(!trainer.supervising());
    for _ in 0..6 {
        let before = trainer.supervising();
        let losses = trainer.run_epoch(&data).unwrap();
        assert_eq!(losses.explanation != 0.0, before);
        assert_eq!(losses.accuracy * 12.0, (losses.accuracy * 12.0).round());
        assert_eq!(trainer.supervising(), before || losses.accuracy >= 0.75);
    }

    cfg.warmup_epochs = 0;
    cfg.warmup_accuracy = 0.0;
    assert!(Trainer::new(&small_backbone(), &cfg).unwrap().supervising());
    cfg.warmup_accuracy = 1.5;
    assert!(Trainer::new(&small_backbone(), &cfg).is_err());
}

#[test]
fn saturated_slack_with_exact_target_matches_baseline() {
    let data = toy_data(12, 4);
    let backbone = small_backbone();
    let mut cfg = config(Supervision::ResGaussian, 2);
    cfg.loss.alpha = 2.0;
    let mut trainer = Trainer::new(&backbone, &cfg).unwrap();
    trainer.use_map_as_target();
    let (supervised, _) = train_with(&mut trainer, &data, &Dataset::default()).unwrap();
    let (baseline, _) =
        train(&backbone, &config(Supervision::None, 2), &data, &Dataset::default()).unwrap();
    assert_eq!(supervised, baseline);
}

#[test]
fn every_step_uses_an_optimal_threshold() {
    let data = toy_data(12, 5);
    for scope in [ThresholdScope::Batch, ThresholdScope::PerSample] {
        let mut cfg = config(Supervision::ResGaussian, 1);
        cfg.threshold_scope = scope;
        let mut trainer = Trainer::new(&small_backbone(), &cfg).unwrap();
        for chunk in data.samples.chunks(4) {
            let samples: Vec<&Sample> = chunk.iter().collect();
            let record = trainer.step(&Batch::from_samples(&samples).unwrap()).unwrap();
            let units = if scope == ThresholdScope::Batch { 1 } else { chunk.len() };
            assert_eq!(record.constraints.len(), units);
            for (set, t) in record.constraints.iter().zip(&record.thresholds) {
                assert_eq!(set.satisfied_by(t.value), t.satisfied);
                assert_eq!(brute_force_threshold(set).unwrap().satisfied, t.satisfied);
            }
        }
    }
}

#[test]
fn objective_decreases_when_fitting_a_small_set() {
    let data = toy_data(8, 6);
    for variant in [Supervision::None, Supervision::ResGaussian, Supervision::ResLearnable] {
        let mut trainer = Trainer::new(&small_backbone(), &config(variant, 1)).unwrap();
        let first = trainer.run_epoch(&data).unwrap().objective;
        let mut last = first;
        for _ in 0..15 {
            last = trainer.run_epoch(&data).unwrap().objective;
        }
        assert!(last < first, "{variant}: {first} -> {last}");
    }
}

#[test]
fn learnable_imputer_is_trained() {
    let data = toy_data(8, 7);
    let cfg = config(Supervision::ResLearnable, 1);
    let mut trainer = Trainer::new(&small_backbone(), &cfg).unwrap();
    let before = trainer.params().with_prefix(crate::imputation::IMPUTER_PREFIX);
    assert!(!before.is_empty());
    trainer.run_epoch(&data).unwrap();
    let after = trainer.params().with_prefix(crate::imputation::IMPUTER_PREFIX);
    assert_ne!(before, after);
    let none = Trainer::new(&small_backbone(), &config(Supervision::ResGaussian, 1)).unwrap();
    assert_eq!(backbone_only(none.params()), *none.params());
}

#[test]
fn best_validation_epoch_is_reported() {
    let data = toy_data(16, 8);
    let val = toy_data(8, 9);
    let (params, report) =
        train(&small_backbone(), &config(Supervision::Gradia, 3), &data, &val).unwrap();
    assert_eq!(report.epochs.len(), 3);
    let best = report
        .epochs
        .iter()
        .map(|e| e.validation.unwrap().accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    let chosen = &report.epochs[report.best_epoch - 1];
    assert_eq!(chosen.validation.unwrap().accuracy, best);
    assert!(report.epochs[report.best_epoch..]
        .iter()
        .all(|e| e.validation.unwrap().accuracy < best));
    assert_eq!(evaluate(&small_backbone(), &params, &val).unwrap(), chosen.validation.unwrap());
}

#[test]
fn divergence_is_reported() {
    let mut data = toy_data(4, 10);
    data.samples[2].image.data_mut()[0] = f64::NAN;
    let err = train(&small_backbone(), &config(Supervision::ResGaussian, 1), &data, &Dataset::default())
        .unwrap_err();
    assert!(matches!(err, Error::Divergence { epoch: 1, .. }), "{err:?}");
}

#[test]
fn constant_model_scores_constant_data() {
    let mut data = toy_data(10, 11);
    for s in &mut data.samples {
        s.label = 0;
    }
    let backbone = small_backbone();
    let mut params = init_params(&backbone, 0).unwrap();
    params.get_mut(HEAD_BIAS).unwrap().data_mut()[0] = 1e6;
    let a = evaluate(&backbone, &params, &data).unwrap();
    assert_eq!(a.accuracy, 1.0);
    assert_eq!(evaluate(&backbone, &params, &data).unwrap(), a);
    assert!(evaluate(&backbone, &params, &Dataset::default()).is_err());
}

#[test]
fn random_models_are_near_chance() {
    let data = toy_data(200, 12);
    let backbone = small_backbone();
    let mut accs: Vec<f64> = (0..5)
        .map(|seed| evaluate(&backbone, &init_params(&backbone, seed).unwrap(), &data).unwrap().accuracy)
        .collect();
    accs.sort_by(f64::total_cmp);
    assert!((accs[2] - 0.5).abs() <= 0.1, "{accs:?}");
}

#[test]
fn stratified_split_feeds_training() {
    let data = toy_data(30, 13);
    let s = split(&data, (10, 10, 10), 0).unwrap();
    let (_, report) = train(&small_backbone(), &config(Supervision::Haics, 1), &s.train, &s.val).unwrap();
    assert!(report.epochs[0].train.objective.is_finite());
    assert!(report.epochs[0].train.mean_threshold.is_none());
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let c = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    assert!(c.validate().is_err());
    let mut c = TrainConfig::default();
    c.optimizer.learning_rate = 0.0;
    assert!(c.validate().is_err());
    assert_eq!("sample".parse::<ThresholdScope>().unwrap(), ThresholdScope::PerSample);
}
