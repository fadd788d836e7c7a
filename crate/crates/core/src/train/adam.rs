use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ModelWeights;

/// Adam moments per parameter name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(weights: &ModelWeights) -> Self {
        let zeros = |t: &crate::tensor::Tensor| vec![0.0; t.len()];
        Self {
            step: 0,
            m: weights.iter().map(|(n, t)| (n.to_string(), zeros(t))).collect(),
            v: weights.iter().map(|(n, t)| (n.to_string(), zeros(t))).collect(),
        }
    }
}

/// One bias-corrected Adam update. Parameters absent from `grads` are
/// treated as having zero gradient; names in `frozen` are left untouched.
pub fn adam_step(
    weights: &mut ModelWeights,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    config: &TrainConfig,
    frozen: &[&str],
) -> Result<()> {
    for (name, g) in grads {
        let len = weights.get(name)?.len();
        if g.len() != len {
            return Err(Error::shape("adam_step", &[g.len()], &[len]));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, param) in weights.iter_mut() {
        if frozen.contains(&name) {
            continue;
        }
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; param.len()]);
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; param.len()]);
        let g = grads.get(name);
        for (i, p) in param.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(0.0, |g| g[i]);
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            *p -= config.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + config.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn grads_like(weights: &ModelWeights, value: f64) -> BTreeMap<String, Vec<f64>> {
        weights
            .iter()
            .map(|(n, t)| (n.to_string(), vec![value; t.len()]))
            .collect()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let config = ModelConfig::tiny();
        let mut w = ModelWeights::init(&config, 0).unwrap();
        let before = w.clone();
        let mut state = AdamState::new(&w);
        adam_step(
            &mut w,
            &grads_like(&before, 0.0),
            &mut state,
            &TrainConfig::default(),
            &[],
        )
        .unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn first_step_moves_each_entry_by_learning_rate() {
        let config = ModelConfig::tiny();
        let mut w = ModelWeights::init(&config, 0).unwrap();
        let before = w.clone();
        let mut state = AdamState::new(&w);
        let tc = TrainConfig::default();
        adam_step(&mut w, &grads_like(&before, 0.37), &mut state, &tc, &["head.bias"]).unwrap();
        for (name, t) in w.iter() {
            let b = before.get(name).unwrap();
            for (x, y) in t.data().iter().zip(b.data()) {
                if name == "head.bias" {
                    assert_eq!(x, y);
                } else {
                    assert!(((y - x) - tc.learning_rate).abs() < 1e-10, "{name}");
                }
            }
        }
    }

    #[test]
    fn ten_steps_are_deterministic() {
        let config = ModelConfig::tiny();
        let run = || {
            let mut w = ModelWeights::init(&config, 1).unwrap();
            let mut state = AdamState::new(&w);
            for s in 0..10 {
                let g = grads_like(&w, (s as f64 * 0.3).sin());
                adam_step(&mut w, &g, &mut state, &TrainConfig::default(), &[]).unwrap();
            }
            w
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let config = ModelConfig::tiny();
        let mut w = ModelWeights::init(&config, 0).unwrap();
        let mut g = grads_like(&w, 0.0);
        g.get_mut("latent_init").unwrap()[0] = f64::NAN;
        let mut state = AdamState::new(&w);
        let err = adam_step(&mut w, &g, &mut state, &TrainConfig::default(), &[]).unwrap_err();
        assert!(err.to_string().contains("latent_init"));
    }
}
