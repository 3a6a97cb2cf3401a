//! Joint training of prediction and explanation losses.
//!
//! Every mini-batch alternates the two sub-problems: with the parameters
//! fixed, the saliency maps are computed and the adaptive threshold is
//! solved exactly; with the threshold fixed, one Adam step is taken on the
//! backbone (and on the imputer for the learnable variant).

mod adam;

pub use adam::{adam_step, AdamConfig, AdamState};

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::data::{AnnotationMask, Dataset, Sample};
use crate::error::{Error, Result};
use crate::imputation::{gaussian_impute, imputer_layers, init_imputer, learnable_impute, stack_masks, ImputerLayer};
use crate::loss::{gradia_loss, haics_loss, res_loss, total_objective, LabelLayer, RobustLossConfig, Supervision};
use crate::metrics::{score_maps, ExplanationScore, EVAL_THRESHOLD};
use crate::model::{forward, init_params, predict, prediction_loss, BackboneConfig, BoundParams, ModelParams};
use crate::rng;
use crate::saliency::compute_saliency;
use crate::tensor::{Tape, Tensor, Var};
use crate::threshold::{optimal_threshold, ConstraintSet, Threshold};

/// Batch size used by [`evaluate`]; results do not depend on it.
const EVAL_CHUNK: usize = 32;

/// Which labeled pixels share one adaptive threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ThresholdScope {
    /// One threshold for the whole mini-batch.
    #[default]
    Batch,
    /// One threshold per sample.
    PerSample,
}

impl core::str::FromStr for ThresholdScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(ThresholdScope::Batch),
            "sample" => Ok(ThresholdScope::PerSample),
            _ => Err(Error::InvalidArgument(format!("unknown threshold scope {s:?}"))),
        }
    }
}

impl core::fmt::Display for ThresholdScope {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            ThresholdScope::Batch => "batch",
            ThresholdScope::PerSample => "sample",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Leading epochs trained on the prediction loss alone.
    pub warmup_epochs: usize,
    /// The warm-up also lasts until an epoch ends with at least this
    /// training-batch accuracy; 0 makes it a pure epoch count.
    pub warmup_accuracy: f64,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub loss: RobustLossConfig,
    pub threshold_scope: ThresholdScope,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            warmup_epochs: 10,
            warmup_accuracy: 0.9,
            batch_size: 16,
            optimizer: AdamConfig::default(),
            loss: RobustLossConfig::default(),
            threshold_scope: ThresholdScope::Batch,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch size must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.warmup_accuracy) {
            return Err(Error::InvalidArgument(format!(
                "warm-up accuracy {} outside [0, 1]",
                self.warmup_accuracy
            )));
        }
        self.optimizer.validate()?;
        self.loss.validate()
    }

    /// Whether the explanation loss takes part in training at all.
    pub fn explanation_active(&self) -> bool {
        self.loss.variant != Supervision::None && self.loss.lambda_exp != 0.0
    }
}

/// Images, labels and masks of one mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `N×C×H×W`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub masks: Vec<AnnotationMask>,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
        Ok(Batch {
            images: Tensor::stack(&images)?,
            labels: samples.iter().map(|s| s.label).collect(),
            masks: samples.iter().map(|s| s.mask.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// The objective of one mini-batch on a tape.
#[derive(Clone, Debug)]
pub struct ObjectiveGraph {
    pub total: Var,
    pub prediction: Var,
    pub logits: Var,
    pub explanation: Option<Var>,
    /// Threshold applied to each sample (robust variants only). Passing these
    /// back into [`Objective::build`] evaluates the same surrogate at a
    /// nearby point.
    pub sample_thresholds: Vec<f64>,
    /// Constraint sets the thresholds were solved on, one per scope unit.
    pub constraints: Vec<ConstraintSet>,
    pub thresholds: Vec<Threshold>,
}

/// Builds the per-batch objective for a configuration.
#[derive(Clone, Debug)]
pub struct Objective<'a> {
    backbone: &'a BackboneConfig,
    loss: &'a RobustLossConfig,
    scope: ThresholdScope,
    imputer: Option<&'a [ImputerLayer]>,
    enabled: bool,
    target_is_map: bool,
}

impl<'a> Objective<'a> {
    pub fn new(
        backbone: &'a BackboneConfig,
        loss: &'a RobustLossConfig,
        scope: ThresholdScope,
        imputer: Option<&'a [ImputerLayer]>,
    ) -> Self {
        Objective {
            backbone,
            loss,
            scope,
            imputer,
            enabled: true,
            target_is_map: false,
        }
    }

    /// Switch the explanation loss off (prediction loss only).
    pub fn without_explanation(mut self) -> Self {
        self.enabled = false;
        self
    }

    fn active(&self) -> bool {
        self.enabled && self.loss.variant != Supervision::None && self.loss.lambda_exp != 0.0
    }

    fn solve_thresholds(&self, maps: &Tensor, masks: &[&AnnotationMask]) -> (Vec<ConstraintSet>, Vec<Threshold>, Vec<f64>) {
        let per = maps.len() / masks.len();
        let constraint = |range: core::ops::Range<usize>| {
            let mut set = ConstraintSet::default();
            for i in range {
                let m = masks[i];
                set.extend(
                    &maps.data()[i * per..(i + 1) * per],
                    m.positive.bits(),
                    m.negative.bits(),
                );
            }
            set
        };
        match self.scope {
            ThresholdScope::Batch => {
                let set = constraint(0..masks.len());
                let t = optimal_threshold(&set);
                (alloc::vec![set], alloc::vec![t], alloc::vec![t.value; masks.len()])
            }
            ThresholdScope::PerSample => {
                let sets: Vec<ConstraintSet> = (0..masks.len()).map(|i| constraint(i..i + 1)).collect();
                let ts: Vec<Threshold> = sets.iter().map(optimal_threshold).collect();
                let values = ts.iter().map(|t| t.value).collect();
                (sets, ts, values)
            }
        }
    }

    /// Record the objective of `batch` on `tape`. Per-sample thresholds are
    /// solved from the current maps unless `fixed_thresholds` is given.
    pub fn build(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        batch: &Batch,
        fixed_thresholds: Option<&[f64]>,
    ) -> Result<ObjectiveGraph> {
        let x = tape.constant(batch.images.clone());
        let out = forward(tape, self.backbone, params, x)?;
        let prediction = prediction_loss(tape, out.logits, &batch.labels)?;
        if !self.active() {
            return Ok(ObjectiveGraph {
                total: prediction,
                prediction,
                logits: out.logits,
                explanation: None,
                sample_thresholds: Vec::new(),
                constraints: Vec::new(),
                thresholds: Vec::new(),
            });
        }

        let full_size = (self.backbone.height, self.backbone.width);
        let sal = compute_saliency(tape, params, out.activations, &batch.labels, full_size)?;
        let masks: Vec<&AnnotationMask> = batch.masks.iter().collect();
        let full = LabelLayer::full(&masks)?;
        let mut constraints = Vec::new();
        let mut thresholds = Vec::new();
        let mut per_sample = Vec::new();
        let explanation = match self.loss.variant {
            Supervision::None => unreachable!("inactive objective returned above"),
            Supervision::Gradia => gradia_loss(tape, sal.full, &full)?,
            Supervision::Haics => haics_loss(tape, sal.full, &full)?,
            Supervision::ResGaussian | Supervision::ResLearnable => {
                let (sets, ts, values) = self.solve_thresholds(tape.value(sal.full), &masks);
                constraints = sets;
                thresholds = ts;
                per_sample = match fixed_thresholds {
                    Some(t) => t.to_vec(),
                    None => values,
                };
                let pooled;
                let (map, target, labels) = if self.loss.variant == Supervision::ResGaussian {
                    let target = if self.target_is_map {
                        tape.value(sal.full).clone()
                    } else {
                        let mut data = Vec::with_capacity(full.labeled.len());
                        for m in &masks {
                            data.extend(gaussian_impute(m, self.loss.gaussian_kernel, self.loss.gaussian_sigma)?);
                        }
                        Tensor::new(full.labeled.shape().to_vec(), data)?
                    };
                    (sal.full, tape.constant(target), &full)
                } else {
                    let layers = self.imputer.ok_or_else(|| {
                        Error::InvalidArgument("learnable imputation needs imputer layers".into())
                    })?;
                    let stacked = tape.constant(stack_masks(&masks)?);
                    let target = learnable_impute(tape, params, layers, stacked)?;
                    let s = tape.shape(sal.native);
                    pooled = LabelLayer::pooled(&masks, (s[2], s[3]))?;
                    (sal.native, target, &pooled)
                };
                res_loss(tape, sal.full, &full, map, target, labels, &per_sample, self.loss)?.total
            }
        };
        let total = total_objective(tape, prediction, explanation, self.loss.lambda_exp)?;
        Ok(ObjectiveGraph {
            total,
            prediction,
            logits: out.logits,
            explanation: Some(explanation),
            sample_thresholds: per_sample,
            constraints,
            thresholds,
        })
    }
}

/// Losses of one optimisation step, and the thresholds it used.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub prediction_loss: f64,
    pub explanation_loss: f64,
    /// Samples of the batch whose largest logit is their label.
    pub correct: usize,
    pub constraints: Vec<ConstraintSet>,
    pub thresholds: Vec<Threshold>,
}

/// Owns parameters and optimiser state of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    backbone: BackboneConfig,
    config: TrainConfig,
    params: ModelParams,
    optimizer: AdamState,
    imputer: Option<Vec<ImputerLayer>>,
    epoch: usize,
    supervising: bool,
    target_is_map: bool,
}

impl Trainer {
    /// Initialise parameters from `config.seed`. The imputer is only created
    /// when the learnable variant is actually trained.
    pub fn new(backbone: &BackboneConfig, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut params = init_params(backbone, config.seed)?;
        let imputer = if config.explanation_active() && config.loss.variant == Supervision::ResLearnable {
            let layers = imputer_layers(
                config.loss.imputer_depth,
                (backbone.height, backbone.width),
                backbone.feature_size(),
            )?;
            params.extend(init_imputer(&layers, config.seed));
            Some(layers)
        } else {
            None
        };
        Ok(Trainer {
            backbone: backbone.clone(),
            config: config.clone(),
            params,
            optimizer: AdamState::new(),
            imputer,
            epoch: 0,
            supervising: config.warmup_epochs == 0 && config.warmup_accuracy == 0.0,
            target_is_map: false,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn imputer_layers(&self) -> Option<&[ImputerLayer]> {
        self.imputer.as_deref()
    }

    /// Whether the warm-up is over.
    pub fn supervising(&self) -> bool {
        self.supervising
    }

    /// Replace the imputed target of the Gaussian variant by the saliency map
    /// itself, which zeroes the distance term.
    #[cfg(test)]
    pub(crate) fn use_map_as_target(&mut self) {
        self.target_is_map = true;
    }

    fn step_at(&mut self, batch: &Batch, step: usize) -> Result<StepRecord> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true);
        let mut objective = Objective::new(
            &self.backbone,
            &self.config.loss,
            self.config.threshold_scope,
            self.imputer.as_deref(),
        );
        objective.target_is_map = self.target_is_map;
        objective.enabled = self.supervising;
        let graph = objective.build(&mut tape, &bound, batch, None)?;
        let prediction_loss = tape.value(graph.prediction).data()[0];
        let explanation_loss = graph.explanation.map_or(0.0, |v| tape.value(v).data()[0]);
        let correct = predict(tape.value(graph.logits))
            .iter()
            .zip(&batch.labels)
            .filter(|(p, l)| p == l)
            .count();
        let diverged = || Error::Divergence {
            epoch: self.epoch + 1,
            step,
            pred_loss: prediction_loss,
            exp_loss: explanation_loss,
        };
        if !tape.value(graph.total).data()[0].is_finite() {
            return Err(diverged());
        }
        tape.backward(graph.total)?;
        let grads = bound.gradients(&tape);
        if grads.values().flatten().any(|g| !g.is_finite()) {
            return Err(diverged());
        }
        adam_step(&mut self.params, &grads, &mut self.optimizer, &self.config.optimizer)?;
        Ok(StepRecord {
            prediction_loss,
            explanation_loss,
            correct,
            constraints: graph.constraints,
            thresholds: graph.thresholds,
        })
    }

    /// One optimisation step on `batch`.
    pub fn step(&mut self, batch: &Batch) -> Result<StepRecord> {
        self.step_at(batch, 0)
    }

    /// One pass over `data` in an order drawn from the run seed and the
    /// epoch number.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochLosses> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream(self.config.seed, rng::tags::SHUFFLE, self.epoch as u64));
        let mut losses = EpochLosses::default();
        let mut threshold_sum = 0.0;
        let mut threshold_count = 0usize;
        let mut correct = 0usize;
        let steps = order.chunks(self.config.batch_size).count();
        for (step, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &data.samples[i]).collect();
            let record = self.step_at(&Batch::from_samples(&samples)?, step)?;
            losses.prediction += record.prediction_loss / steps as f64;
            losses.explanation += record.explanation_loss / steps as f64;
            correct += record.correct;
            for t in &record.thresholds {
                threshold_sum += t.value;
                threshold_count += 1;
            }
        }
        losses.objective = losses.prediction + self.config.loss.lambda_exp * losses.explanation;
        if threshold_count > 0 {
            losses.mean_threshold = Some(threshold_sum / threshold_count as f64);
        }
        losses.accuracy = correct as f64 / data.len() as f64;
        self.epoch += 1;
        if self.epoch >= self.config.warmup_epochs && losses.accuracy >= self.config.warmup_accuracy {
            self.supervising = true;
        }
        Ok(losses)
    }
}

/// Mean per-step losses over an epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochLosses {
    pub prediction: f64,
    pub explanation: f64,
    pub objective: f64,
    pub mean_threshold: Option<f64>,
    /// Training-batch accuracy, measured as the epoch went.
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub explanation: ExplanationScore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train: EpochLosses,
    pub validation: Option<Evaluation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub backbone: BackboneConfig,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    pub test: Option<Evaluation>,
    /// Filled in by callers that can read a clock.
    pub wall_clock_secs: Option<f64>,
}

/// Train for `config.epochs` epochs and return the parameters of the epoch
/// with the best validation accuracy (the latest such epoch on ties; the last
/// epoch when `val` is empty).
pub fn train(
    backbone: &BackboneConfig,
    config: &TrainConfig,
    train_set: &Dataset,
    val: &Dataset,
) -> Result<(ModelParams, TrainReport)> {
    let mut trainer = Trainer::new(backbone, config)?;
    train_with(&mut trainer, train_set, val)
}

fn train_with(
    trainer: &mut Trainer,
    train_set: &Dataset,
    val: &Dataset,
) -> Result<(ModelParams, TrainReport)> {
    let mut epochs = Vec::with_capacity(trainer.config.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    for _ in 0..trainer.config.epochs {
        let losses = trainer.run_epoch(train_set)?;
        let epoch = trainer.epoch();
        let validation = if val.is_empty() {
            None
        } else {
            Some(evaluate(&trainer.backbone, trainer.params(), val)?)
        };
        let accuracy = validation.map_or(f64::NEG_INFINITY, |v| v.accuracy);
        if best.as_ref().is_none_or(|(a, _, _)| accuracy >= *a) {
            best = Some((accuracy, epoch, trainer.params().clone()));
        }
        epochs.push(EpochRecord {
            epoch,
            train: losses,
            validation,
        });
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    let report = TrainReport {
        backbone: trainer.backbone.clone(),
        config: trainer.config.clone(),
        epochs,
        best_epoch,
        test: None,
        wall_clock_secs: None,
    };
    Ok((params, report))
}

/// Predicted classes for an `N×C×H×W` batch and their `N×1×H×W` saliency
/// maps.
pub fn explain(backbone: &BackboneConfig, params: &ModelParams, images: Tensor) -> Result<(Vec<usize>, Tensor)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(images);
    let out = forward(&mut tape, backbone, &bound, x)?;
    let predicted = predict(tape.value(out.logits));
    let sal = compute_saliency(
        &mut tape,
        &bound,
        out.activations,
        &predicted,
        (backbone.height, backbone.width),
    )?;
    Ok((predicted, tape.value(sal.full).clone()))
}

/// Accuracy and explanation quality of `params` on `data`.
///
/// Explanations are computed for the predicted class, binarised at 0.5 and
/// scored against the clean masks when a sample carries them.
pub fn evaluate(backbone: &BackboneConfig, params: &ModelParams, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let mut correct = 0usize;
    let mut scores = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(EVAL_CHUNK) {
        let samples: Vec<&Sample> = chunk.iter().collect();
        let batch = Batch::from_samples(&samples)?;
        let (predicted, maps) = explain(backbone, params, batch.images)?;
        correct += predicted.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
        let truth: Vec<AnnotationMask> = chunk.iter().map(|s| s.mask.clean_or_current()).collect();
        let truth: Vec<&AnnotationMask> = truth.iter().collect();
        scores.extend(score_maps(maps.data(), &truth, EVAL_THRESHOLD)?);
    }
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        explanation: ExplanationScore::mean(&scores),
    })
}

#[cfg(test)]
mod tests;
