use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{predict_proba, split, train, RunHistory, TrainConfig};
use crate::data::{prepare, PrepareOptions, RawVisit};
use crate::error::{Error, Result};
use crate::metrics::{DecisionRule, MetricsReport};
use crate::model::{Modality, ModelConfig, TabularMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    pub train_visits: usize,
    pub test_visits: usize,
    /// Label string of each class index.
    pub labels: Vec<String>,
    pub metrics: MetricsReport,
    pub history: RunHistory,
}

/// Per-run metrics with their mean and sample standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub modality: Modality,
    pub tabular_mode: TabularMode,
    pub runs: Vec<RunResult>,
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
    /// Mean per-class AUC over the runs where the class was scorable.
    pub class_auc_mean: BTreeMap<String, f64>,
}

/// Mean and sample standard deviation; the deviation of a single value is 0.
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AggregateReport {
    pub fn from_runs(modality: Modality, tabular_mode: TabularMode, runs: Vec<RunResult>) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Data("no runs to aggregate".into()));
        }
        let mut mean = BTreeMap::new();
        let mut std = BTreeMap::new();
        for (i, name) in MetricsReport::SCALARS.iter().enumerate() {
            let values: Vec<f64> = runs.iter().map(|r| r.metrics.scalars()[i].1).collect();
            let (m, s) = mean_and_std(&values);
            mean.insert(name.to_string(), m);
            std.insert(name.to_string(), s);
        }
        let mut per_class: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &runs {
            for (label, auc) in r.labels.iter().zip(&r.metrics.per_class_auc) {
                if let Some(a) = auc {
                    per_class.entry(label.clone()).or_default().push(*a);
                }
            }
        }
        let class_auc_mean = per_class
            .into_iter()
            .map(|(l, v)| (l, v.iter().sum::<f64>() / v.len() as f64))
            .collect();
        Ok(Self {
            modality,
            tabular_mode,
            runs,
            mean,
            std,
            class_auc_mean,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&serde_json::to_value(self)?)?)
    }
}

/// Trains and evaluates `tc.num_runs` times; run `i` uses seed
/// `tc.base_seed + i` for its split, initialization and batch order.
/// Vocabulary, label space and statistics are refit on each training split,
/// and `model.vocab_size`/`model.num_classes` are set from them.
pub fn repeated_runs(
    raw: &[RawVisit],
    prep: &PrepareOptions,
    model: &ModelConfig,
    tc: &TrainConfig,
    rule: DecisionRule,
) -> Result<AggregateReport> {
    tc.validate()?;
    let runs: Vec<RunResult> = (0..tc.num_runs)
        .into_par_iter()
        .map(|run| {
            let seed = tc.base_seed + run as u64;
            let (train_idx, test_idx) = split(raw.len(), tc.split_ratio, seed)?;
            let data = prepare(raw, &train_idx, &test_idx, prep)?;
            let config = ModelConfig {
                vocab_size: data.vocab.len(),
                num_classes: data.labels.len(),
                max_text_len: prep.max_text_len,
                ..model.clone()
            };
            let (weights, history) = train(&data.train, &config, tc, seed)?;
            let probs = predict_proba(&data.test, &weights, &config)?;
            let labels: Vec<usize> = data.test.iter().map(|v| v.label).collect();
            let metrics = MetricsReport::compute(&probs, &labels, rule)?;
            log::info!(
                "{} / {} run {run}: micro AUC {:.2}, macro AUC {:.2}",
                config.modality,
                config.tabular_mode.as_str(),
                metrics.micro_auc,
                metrics.macro_auc
            );
            Ok(RunResult {
                run,
                seed,
                train_visits: data.train.len(),
                test_visits: data.test.len(),
                labels: data.labels.labels().to_vec(),
                metrics,
                history,
            })
        })
        .collect::<Result<_>>()?;
    AggregateReport::from_runs(model.modality, model.tabular_mode, runs)
}
