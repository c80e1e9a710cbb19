//! Cross-entropy + Adam training and finite-difference gradient checking.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::TemporalExample;
use crate::error::{Error, Result};
use crate::model::{
    argmax, Batch, CheckpointMeta, Interventions, Model, ModelCheckpoint, TrainingStage,
};
use crate::numerics::{derive_seed, seeded_rng};

/// Batch size used for inference-only passes.
pub const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            batch_size: 32,
            epochs: 30,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch_size must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::arg("epochs must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::arg("adam betas must lie in [0, 1)"));
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::arg("adam_eps must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    /// Loss of the very first batch, before any update.
    pub first_batch_loss: f64,
    pub epoch_loss: Vec<f64>,
    pub epoch_accuracy: Vec<f64>,
    pub val_accuracy: Option<f64>,
    pub steps: usize,
    pub seconds: f64,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        *self.epoch_loss.last().expect("at least one epoch")
    }

    pub fn final_accuracy(&self) -> f64 {
        *self.epoch_accuracy.last().expect("at least one epoch")
    }
}

/// Adam optimiser state.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// One bias-corrected update. A zero learning rate leaves `params`
    /// untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], learning_rate: f64) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
        }
        if learning_rate == 0.0 {
            return;
        }
        for i in 0..params.len() {
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= learning_rate * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Labelled batch from examples, in the given order.
pub fn make_batch(examples: &[&TemporalExample]) -> Result<Batch> {
    let seqs: Vec<&[u32]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
    let labels = examples.iter().map(|e| e.label).collect();
    Batch::from_sequences(&seqs, Some(labels))
}

/// Trains a freshly initialised or base model on one slice.
///
/// The returned checkpoint is tagged as a base model when `model` carries no
/// prior training, which callers signal through [`fine_tune`] instead.
pub fn train(
    model: Model,
    train_slice: &[TemporalExample],
    config: &TrainConfig,
    val_slice: &[TemporalExample],
) -> Result<(ModelCheckpoint, TrainReport)> {
    run_training(model, train_slice, config, val_slice, TrainingStage::Base)
}

/// Continues training from `base`, recording its hash in the metadata.
pub fn fine_tune(
    base: &ModelCheckpoint,
    train_slice: &[TemporalExample],
    config: &TrainConfig,
    val_slice: &[TemporalExample],
) -> Result<(ModelCheckpoint, TrainReport)> {
    let stage = TrainingStage::FineTune {
        from_hash: base.model.content_hash(),
    };
    run_training(base.model.clone(), train_slice, config, val_slice, stage)
}

fn run_training(
    mut model: Model,
    train_slice: &[TemporalExample],
    config: &TrainConfig,
    val_slice: &[TemporalExample],
    stage: TrainingStage,
) -> Result<(ModelCheckpoint, TrainReport)> {
    config.validate()?;
    if train_slice.is_empty() {
        return Err(Error::arg("training slice is empty"));
    }
    let started = Instant::now();
    let mut rng = seeded_rng(derive_seed(config.seed, "shuffle"));
    let mut adam = Adam::new(
        model.num_params(),
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
    );
    let mut order: Vec<usize> = (0..train_slice.len()).collect();
    let mut first_batch_loss = None;
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    let mut epoch_accuracy = Vec::with_capacity(config.epochs);
    let mut steps = 0usize;
    for epoch in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let examples: Vec<&TemporalExample> = chunk.iter().map(|&i| &train_slice[i]).collect();
            let batch = make_batch(&examples)?;
            let (out, grads) = model.loss_and_gradients(&batch)?;
            if !out.loss.is_finite() || grads.0.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "loss became non-finite at step {steps} (epoch {epoch})"
                )));
            }
            first_batch_loss.get_or_insert(out.loss);
            loss_sum += out.loss * chunk.len() as f64;
            correct += out.correct;
            adam.step(model.params_mut(), &grads.0, config.learning_rate);
            steps += 1;
        }
        let n = train_slice.len() as f64;
        epoch_loss.push(loss_sum / n);
        epoch_accuracy.push(correct as f64 / n);
        log::debug!(
            "epoch {epoch}: loss {:.4} acc {:.4}",
            loss_sum / n,
            correct as f64 / n
        );
    }
    let val_accuracy = if val_slice.is_empty() {
        None
    } else {
        Some(accuracy(&model, val_slice, &Interventions::new())?)
    };
    let report = TrainReport {
        config: config.clone(),
        first_batch_loss: first_batch_loss.expect("at least one batch"),
        epoch_loss,
        epoch_accuracy,
        val_accuracy,
        steps,
        seconds: started.elapsed().as_secs_f64(),
    };
    let period = common_period(train_slice);
    let meta = CheckpointMeta {
        stage,
        period,
        train_config: Some(config.clone()),
        final_loss: Some(report.final_loss()),
        train_accuracy: Some(report.final_accuracy()),
    };
    Ok((ModelCheckpoint::new(model, meta), report))
}

fn common_period(slice: &[TemporalExample]) -> Option<i64> {
    let first = slice.first()?.period;
    slice.iter().all(|e| e.period == first).then_some(first)
}

/// Predicted labels under `interventions`, in input order.
pub fn predict(
    model: &Model,
    examples: &[TemporalExample],
    interventions: &Interventions,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_BATCH) {
        let seqs: Vec<&[u32]> = chunk.iter().map(|e| e.tokens.as_slice()).collect();
        let batch = Batch::from_sequences(&seqs, None)?;
        let logits = model.forward_with_intervention(&batch, interventions)?.logits;
        out.extend((0..chunk.len()).map(|i| argmax(logits.row(i))));
    }
    Ok(out)
}

/// Fraction of correctly predicted labels.
pub fn accuracy(
    model: &Model,
    examples: &[TemporalExample],
    interventions: &Interventions,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::arg("cannot evaluate on an empty slice"));
    }
    let preds = predict(model, examples, interventions)?;
    let correct = preds
        .iter()
        .zip(examples)
        .filter(|(p, e)| **p == e.label)
        .count();
    Ok(correct as f64 / examples.len() as f64)
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub n_checked: usize,
    /// Parameter tensor and flat index of the worst entry.
    pub worst: (String, usize),
    /// Largest analytic gradient magnitude among the sampled entries.
    pub max_abs_gradient: f64,
}

/// Minimum number of distinct parameters compared by [`grad_check`].
pub const GRAD_CHECK_SAMPLES: usize = 256;

/// Relative error with the denominator floored so that two tiny gradients
/// do not blow up; two exact zeros count as agreement.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients with central differences at a sample of
/// parameters. Every tensor contributes at least two entries; the rest are
/// drawn in proportion to tensor size.
pub fn grad_check(model: &Model, batch: &Batch, epsilon: f64) -> Result<GradCheckReport> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::arg("epsilon must be > 0"));
    }
    let (_, grads) = model.loss_and_gradients(batch)?;
    let indices = sample_indices(model, derive_seed(model.config().seed, "grad-check"));
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        n_checked: indices.len(),
        worst: (String::new(), 0),
        max_abs_gradient: 0.0,
    };
    for &i in &indices {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + epsilon;
        let plus = probe.loss(batch)?;
        probe.params_mut()[i] = orig - epsilon;
        let minus = probe.loss(batch)?;
        probe.params_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let analytic = grads.0[i];
        report.max_abs_gradient = report.max_abs_gradient.max(analytic.abs());
        let err = relative_error(analytic, numeric);
        if report.worst.0.is_empty() || err > report.max_relative_error {
            report.max_relative_error = err;
            let name = model.layout().owner(i).map(|t| t.name.clone()).unwrap_or_default();
            report.worst = (name, i);
        }
    }
    Ok(report)
}

fn sample_indices(model: &Model, seed: u64) -> Vec<usize> {
    let mut rng = seeded_rng(seed);
    let total = model.num_params();
    let mut out = BTreeSet::new();
    for t in model.layout().tensors() {
        let share = (GRAD_CHECK_SAMPLES as f64 * t.len() as f64 / total as f64).round() as usize;
        let n = share.max(2).min(t.len());
        out.extend(sample(&mut rng, t.len(), n).into_iter().map(|i| t.offset + i));
    }
    while out.len() < GRAD_CHECK_SAMPLES.min(total) {
        out.insert(rng.gen_range(0..total));
    }
    out.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttentionMode, ModelConfig};

    fn ex(tokens: Vec<u32>, label: usize) -> TemporalExample {
        TemporalExample {
            tokens,
            label,
            period: 0,
        }
    }

    fn tiny() -> Model {
        Model::init(ModelConfig {
            vocab_size: 20,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 8,
            n_classes: 3,
            attention_mode: AttentionMode::Causal,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn config_preconditions() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.epochs = 0;
        assert!(matches!(c.validate(), Err(Error::Argument(_))));
        let c = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn epochs_zero_and_empty_slice_rejected() {
        let data = vec![ex(vec![1, 2], 0)];
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(matches!(train(tiny(), &data, &cfg, &[]), Err(Error::Argument(_))));
        assert!(matches!(
            train(tiny(), &[], &TrainConfig::default(), &[]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn first_batch_loss_is_log_classes() {
        let data: Vec<_> = (0..10).map(|i| ex(vec![i as u32 % 20, 3, 4], i % 3)).collect();
        let cfg = TrainConfig {
            epochs: 1,
            ..Default::default()
        };
        let (_, report) = train(tiny(), &data, &cfg, &[]).unwrap();
        assert!((report.first_batch_loss - 3f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn zero_learning_rate_step_is_bitwise_noop() {
        let model = tiny();
        let data: Vec<_> = (0..6).map(|i| ex(vec![i as u32, 7, 9], i % 3)).collect();
        let refs: Vec<_> = data.iter().collect();
        let (_, grads) = model.loss_and_gradients(&make_batch(&refs).unwrap()).unwrap();
        let mut params = model.params().to_vec();
        let mut adam = Adam::new(params.len(), 0.9, 0.999, 1e-8);
        adam.step(&mut params, &grads.0, 0.0);
        let same = params
            .iter()
            .zip(model.params())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);
    }

    #[test]
    fn training_is_deterministic() {
        let data: Vec<_> = (0..20)
            .map(|i| ex(vec![(i % 7) as u32, (i % 5) as u32 + 10], i % 3))
            .collect();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let (a, ra) = train(tiny(), &data, &cfg, &data).unwrap();
        let (b, rb) = train(tiny(), &data, &cfg, &data).unwrap();
        assert_eq!(a.model.content_hash(), b.model.content_hash());
        assert_eq!(ra.epoch_loss, rb.epoch_loss);
        assert_eq!(a.meta.period, Some(0));
    }

    #[test]
    fn fine_tune_records_base_hash() {
        let data: Vec<_> = (0..8).map(|i| ex(vec![i as u32, 1], i % 3)).collect();
        let cfg = TrainConfig {
            epochs: 1,
            ..Default::default()
        };
        let (base, _) = train(tiny(), &data, &cfg, &[]).unwrap();
        let (ft, _) = fine_tune(&base, &data, &cfg, &[]).unwrap();
        assert_eq!(
            ft.meta.stage,
            TrainingStage::FineTune {
                from_hash: base.model.content_hash()
            }
        );
        assert_eq!(base.meta.stage, TrainingStage::Base);
    }

    #[test]
    fn relative_error_guard() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!(relative_error(1e-12, 0.0) <= 1e-4);
    }

    #[test]
    fn sample_covers_every_tensor() {
        let m = tiny();
        let idx = sample_indices(&m, 1);
        assert!(idx.len() >= GRAD_CHECK_SAMPLES);
        for t in m.layout().tensors() {
            assert!(idx.iter().any(|i| t.range().contains(i)), "{}", t.name);
        }
    }
}
