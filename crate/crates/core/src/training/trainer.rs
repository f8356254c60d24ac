//! Mini-batch training with periodic dev evaluation and early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::early_stop::{EarlyStopping, StopDecision};
use super::optim::{clip_gradients, Adam};
use crate::data::NliExample;
use crate::error::{Error, Result};
use crate::model::{ModelInput, NliModel};
use crate::nn::Dropout;
use crate::tensor::Tape;

/// Floor applied to probabilities before taking logs in evaluation.
pub const LOG_FLOOR: f64 = 1e-12;

// Offsets the dropout streams away from the shuffling generator.
const DROPOUT_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub clip_norm: f64,
    /// Evaluations without strict dev-loss improvement before stopping.
    pub patience: usize,
    /// Fraction of the training set between dev evaluations.
    pub step_fraction: f64,
    /// Overrides the model's own dropout ratio when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    pub seed: u64,
    /// Stop as soon as dev accuracy reaches this value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            max_epochs: 20,
            clip_norm: 5.0,
            patience: 4,
            step_fraction: 0.2,
            dropout: None,
            seed: 0,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning learning rate for pretrained encoders.
    pub fn finetune() -> Self {
        TrainConfig {
            learning_rate: 2e-5,
            ..TrainConfig::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" | "default" => Ok(TrainConfig::default()),
            "finetune" => Ok(TrainConfig::finetune()),
            other => Err(Error::Config(format!("unknown training preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.step_fraction > 0.0 && self.step_fraction <= 1.0) {
            return bad(format!("step_fraction must be in (0, 1], got {}", self.step_fraction));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if let Some(d) = self.dropout {
            if !(0.0..1.0).contains(&d) {
                return bad(format!("dropout must be in [0, 1), got {d}"));
            }
        }
        if let Some(a) = self.target_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return bad(format!("target_accuracy must be in [0, 1], got {a}"));
            }
        }
        Ok(())
    }
}

/// Loss and accuracy of a model on one labelled set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    /// Mean negative log-likelihood of the gold labels.
    pub loss: f64,
    pub accuracy: f64,
}

/// One row of the metric history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// 1-based evaluation index.
    pub step: usize,
    /// Mean training loss over the examples since the previous evaluation.
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_accuracy: f64,
}

fn encode_all(model: &NliModel, examples: &[NliExample]) -> Result<Vec<(ModelInput, usize)>> {
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let input = model
                .encode_example(ex)
                .map_err(|e| Error::Data(format!("example {}: {e}", ex.id_or_index(i))))?;
            Ok((input, ex.gold_label.index()))
        })
        .collect()
}

fn evaluate_encoded(model: &NliModel, encoded: &[(ModelInput, usize)]) -> Result<Evaluation> {
    if encoded.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty set".into()));
    }
    let probs: Vec<[f64; 3]> = encoded
        .par_iter()
        .map(|(input, _)| model.probabilities(input))
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (p, (_, gold)) in probs.iter().zip(encoded) {
        loss -= p[*gold].max(LOG_FLOOR).ln();
        if crate::data::Label::argmax(p).index() == *gold {
            correct += 1;
        }
    }
    let n = encoded.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}

/// Mean loss and accuracy in inference mode.
pub fn evaluate(model: &NliModel, examples: &[NliExample]) -> Result<Evaluation> {
    evaluate_encoded(model, &encode_all(model, examples)?)
}

type ParamGrads = Vec<Option<Vec<f64>>>;

fn example_gradients(
    model: &NliModel,
    input: &ModelInput,
    gold: usize,
    dropout: f64,
    seed: u64,
    stream: u64,
) -> Result<(f64, ParamGrads)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ DROPOUT_SEED_SALT);
    rng.set_stream(stream);
    let mut tape = Tape::new();
    let mut drop = Dropout::train(dropout, &mut rng);
    let probs = model.forward(&mut tape, input, &mut drop)?;
    let loss = tape.nll(probs, &[gold])?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    Ok((value, model.params().ids().map(|id| grads.param(id)).collect()))
}

/// Loss and summed gradients for one batch. Per-example work runs in
/// parallel; the reduction is sequential in batch order, so results do not
/// depend on thread scheduling.
fn batch_gradients(
    model: &NliModel,
    batch: &[&(ModelInput, usize)],
    dropout: f64,
    seed: u64,
    first_stream: u64,
) -> Result<(f64, ParamGrads)> {
    let parts: Vec<(f64, ParamGrads)> = batch
        .par_iter()
        .enumerate()
        .map(|(k, (input, gold))| example_gradients(model, input, *gold, dropout, seed, first_stream + k as u64))
        .collect::<Result<_>>()?;
    let mut total: ParamGrads = vec![None; model.params().len()];
    let mut loss = 0.0;
    for (l, grads) in parts {
        loss += l;
        for (slot, g) in total.iter_mut().zip(grads) {
            match (slot.as_mut(), g) {
                (Some(t), Some(g)) => t.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                (None, Some(g)) => *slot = Some(g),
                (_, None) => {}
            }
        }
    }
    Ok((loss, total))
}

/// Trains on `train_set`, scoring the dev set with `evaluate_dev` every
/// ⌈step_fraction·|train|⌉ examples (checked at batch boundaries, plus once
/// at the end if examples were seen since the last evaluation).
///
/// Returns the parameters and optimizer state from the evaluation with the
/// lowest dev loss. The provenance of the result is empty.
pub fn train_with_evaluator<F>(
    mut model: NliModel,
    train_set: &[NliExample],
    config: &TrainConfig,
    mut evaluate_dev: F,
) -> Result<Checkpoint>
where
    F: FnMut(&NliModel) -> Result<Evaluation>,
{
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let encoded = encode_all(&model, train_set)?;
    let dropout = config.dropout.unwrap_or_else(|| model.config().dropout());
    let n = encoded.len();
    let eval_every = ((config.step_fraction * n as f64).ceil() as usize).max(1);

    let mut adam = Adam::new(model.params());
    let mut stopper = EarlyStopping::new(config.patience);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::new();
    let mut best = None;
    let mut streams = 0u64;
    let mut seen = 0usize;
    let mut loss_sum = 0.0;

    let mut evaluate_now = |model: &NliModel,
                            adam: &Adam,
                            seen: &mut usize,
                            loss_sum: &mut f64,
                            history: &mut Vec<MetricRecord>|
     -> Result<bool> {
        let eval = evaluate_dev(model)?;
        let record = MetricRecord {
            step: history.len() + 1,
            train_loss: *loss_sum / *seen as f64,
            dev_loss: eval.loss,
            dev_accuracy: eval.accuracy,
        };
        log::info!(
            "eval {}: train_loss={:.6} dev_loss={:.6} dev_acc={:.4}",
            record.step,
            record.train_loss,
            record.dev_loss,
            record.dev_accuracy
        );
        history.push(record);
        *seen = 0;
        *loss_sum = 0.0;
        let decision = stopper.observe(eval.loss);
        if decision == StopDecision::Improved {
            best = Some((model.params().clone(), adam.clone(), record));
        }
        let reached = config.target_accuracy.is_some_and(|t| eval.accuracy >= t);
        Ok(decision == StopDecision::Stop || reached)
    };

    let mut stopped = false;
    'epochs: for _ in 0..config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| &encoded[i]).collect();
            let (loss, mut grads) = batch_gradients(&model, &batch, dropout, config.seed, streams)?;
            streams += batch.len() as u64;
            let scale = 1.0 / batch.len() as f64;
            grads
                .iter_mut()
                .flatten()
                .for_each(|g| g.iter_mut().for_each(|x| *x *= scale));
            clip_gradients(&mut grads, config.clip_norm);
            adam.step(model.params_mut(), &grads, config.learning_rate)?;
            loss_sum += loss;
            seen += batch.len();
            if seen >= eval_every && evaluate_now(&model, &adam, &mut seen, &mut loss_sum, &mut history)? {
                stopped = true;
                break 'epochs;
            }
        }
    }
    if !stopped && seen > 0 {
        evaluate_now(&model, &adam, &mut seen, &mut loss_sum, &mut history)?;
    }

    let (params, adam, record) = best.ok_or_else(|| Error::Numeric("dev loss was NaN at every evaluation".into()))?;
    *model.params_mut() = params;
    Ok(Checkpoint {
        model,
        train_config: config.clone(),
        optimizer: adam,
        provenance: Vec::new(),
        history,
        best: Some(record),
    })
}

/// Trains on `train_set` with early stopping on `dev_set` loss.
pub fn train(
    model: NliModel,
    train_set: &[NliExample],
    dev_set: &[NliExample],
    config: &TrainConfig,
) -> Result<Checkpoint> {
    if dev_set.is_empty() {
        return Err(Error::Data("dev set is empty".into()));
    }
    let dev = encode_all(&model, dev_set)?;
    train_with_evaluator(model, train_set, config, |m| evaluate_encoded(m, &dev))
}
