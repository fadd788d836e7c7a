use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::forward::build_forward;
use super::{BoundParams, ModelConfig, ModelInput, ModelWeights, TabularToken};
use crate::error::Result;
use crate::tensor::{grad_check_with, GradCheckReport, Stencil, Tensor};

/// Fourth-order finite-difference check of every parameter's gradient of the
/// mean batch cross-entropy.
pub fn check_model_gradients(
    weights: &ModelWeights,
    inputs: &[ModelInput],
    labels: &[usize],
    config: &ModelConfig,
    eps: f64,
) -> Result<GradCheckReport> {
    let params: Vec<(String, Tensor)> = weights.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    grad_check_with(&params, eps, Stencil::FourthOrder, |tape, vars| {
        let bound = BoundParams::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
        let graph = build_forward(tape, &bound, inputs, config)?;
        tape.cross_entropy(graph.logits, labels)
    })
}

/// Random visits for `config`: a few in-vocabulary tokens (possibly none)
/// and vitals drawn uniformly from `[-2, 2)`.
pub fn random_inputs(config: &ModelConfig, n: usize, seed: u64) -> (Vec<ModelInput>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.random_range(1..=config.max_text_len);
        let token_ids = (0..len).map(|_| rng.random_range(1..config.vocab_size)).collect();
        let tabular = (0..config.num_tabular_features)
            .map(|feature| TabularToken {
                feature,
                value: rng.random_range(-2.0..2.0),
                missing: false,
            })
            .collect();
        inputs.push(ModelInput { token_ids, tabular });
        labels.push(rng.random_range(0..config.num_classes));
    }
    (inputs, labels)
}
