//! Minibatch Adam training, evaluation and checkpoints.

mod adam;
mod checkpoint;
mod runs;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, ArtifactHashes, Checkpoint, CheckpointMeta, FORMAT_VERSION, MAGIC,
};
pub use runs::{mean_and_std, repeated_runs, AggregateReport, RunResult};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::EncodedVisit;
use crate::error::{Error, Result};
use crate::model::{build_forward, forward_batch, Modality, ModelConfig, ModelInput, ModelWeights, TabularMode};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub split_ratio: f64,
    pub num_runs: usize,
    pub base_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            split_ratio: 0.8,
            num_runs: 5,
            base_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return fail("split_ratio must lie strictly between 0 and 1");
        }
        if self.num_runs == 0 {
            return fail("num_runs must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return fail("Adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }
}

/// Per-epoch mean training loss of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub seed: u64,
    pub modality: Modality,
    pub tabular_mode: TabularMode,
    pub epoch_loss: Vec<f64>,
}

impl RunHistory {
    pub fn final_loss(&self) -> f64 {
        self.epoch_loss.last().copied().unwrap_or(f64::NAN)
    }
}

/// Seeded shuffle of `0..n`; the first `round(ratio * n)` indices train.
pub fn split(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Data(format!("cannot split {n} visits")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    let cut = (ratio * n as f64).round() as usize;
    if cut == 0 || cut == n {
        return Err(Error::Data(format!(
            "ratio {ratio} leaves one side of {n} visits empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let test = idx.split_off(cut);
    Ok((idx, test))
}

/// Cross-entropy of one logit vector, via log-sum-exp.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    let k = logits.len();
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone().reshape(vec![1, k])?)?;
    let loss = tape.cross_entropy(x, &[label])?;
    Ok(tape.value(loss).data()[0])
}

/// Mean loss and the gradient of every parameter over one batch. Parameters
/// that do not influence the loss get all-zero gradients.
pub fn batch_gradients(
    weights: &ModelWeights,
    inputs: &[ModelInput],
    labels: &[usize],
    config: &ModelConfig,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let mut tape = Tape::new();
    let params = weights.bind(&mut tape)?;
    let graph = build_forward(&mut tape, &params, inputs, config)?;
    let loss = tape.cross_entropy(graph.logits, labels)?;
    tape.backward(loss)?;
    let value = tape.value(loss).data()[0];
    let grads = params
        .iter()
        .map(|(name, var)| {
            let g = tape
                .grad(var)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(var).len()]);
            (name.to_string(), g)
        })
        .collect();
    Ok((value, grads))
}

/// Trains a freshly initialized model. `seed` drives initialization and the
/// per-epoch batch order.
pub fn train(
    data: &[EncodedVisit],
    config: &ModelConfig,
    tc: &TrainConfig,
    seed: u64,
) -> Result<(ModelWeights, RunHistory)> {
    config.validate()?;
    tc.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if let Some(v) = data.iter().find(|v| v.label >= config.num_classes) {
        return Err(Error::out_of_range("label", v.label, config.num_classes));
    }
    let inputs: Vec<ModelInput> = data.iter().map(ModelInput::from_visit).collect();
    let mut weights = ModelWeights::init(config, seed)?;
    let mut state = AdamState::new(&weights);
    let frozen = ModelWeights::frozen(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_loss = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(tc.batch_size).enumerate() {
            let batch: Vec<ModelInput> = chunk.iter().map(|&i| inputs[i].clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data[i].label).collect();
            let context = |e: Error| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} (epoch {epoch}, batch {b})")),
                other => other,
            };
            let (loss, grads) = batch_gradients(&weights, &batch, &labels, config).map_err(context)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss (epoch {epoch}, batch {b})")));
            }
            adam_step(&mut weights, &grads, &mut state, tc, &frozen).map_err(context)?;
            total += loss * chunk.len() as f64;
        }
        let mean = total / data.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.5}");
        epoch_loss.push(mean);
    }
    Ok((
        weights,
        RunHistory {
            seed,
            modality: config.modality,
            tabular_mode: config.tabular_mode,
            epoch_loss,
        },
    ))
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

const EVAL_BATCH: usize = 256;

/// Class probabilities for model inputs, in input order.
pub fn predict_inputs(inputs: &[ModelInput], weights: &ModelWeights, config: &ModelConfig) -> Result<Vec<Vec<f64>>> {
    let chunks: Vec<Vec<Vec<f64>>> = inputs
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let out = forward_batch(chunk, weights, config, false)?;
            Ok((0..chunk.len()).map(|b| softmax(out.logits.row(b))).collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

pub fn predict_proba(visits: &[EncodedVisit], weights: &ModelWeights, config: &ModelConfig) -> Result<Vec<Vec<f64>>> {
    let inputs: Vec<ModelInput> = visits.iter().map(ModelInput::from_visit).collect();
    predict_inputs(&inputs, weights, config)
}

/// Share of visits whose argmax prediction equals the label, in percent.
pub fn accuracy(visits: &[EncodedVisit], weights: &ModelWeights, config: &ModelConfig) -> Result<f64> {
    let probs = predict_proba(visits, weights, config)?;
    let labels: Vec<usize> = visits.iter().map(|v| v.label).collect();
    crate::metrics::top1_accuracy(&probs, &labels)
}

#[cfg(test)]
mod tests;
